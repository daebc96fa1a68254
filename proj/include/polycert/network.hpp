// network.hpp — network model: shapes, the mode-neutral parsed model document,
// and its instantiation over a scalar mode. Layers form a DAG in topological
// id order; every layer has one predecessor except residual joins (two) and
// the input (none).

#pragma once

#include <string>
#include <vector>

#include "polycert/decimal.hpp"
#include "polycert/interval.hpp"

namespace polycert {

struct Shape {
  int w = 1, h = 1, c = 1;

  int numel() const { return w * h * c; }
  bool operator==(const Shape&) const = default;
};

// Flat layout law used everywhere (weights, evaluation, bound matrices):
// cell (w, h, c) -> (h * W + w) * C + c. Channels are innermost.
inline int flat_index(const Shape& s, int w, int h, int c) {
  return (h * s.w + w) * s.c + c;
}

enum class LayerKind { Input, Dense, Conv, Relu, Join };

const char* layer_kind_name(LayerKind k);

// One parsed layer; numbers stay decimal strings until a mode is chosen.
struct LayerDoc {
  int id = 0;
  LayerKind kind = LayerKind::Input;
  std::vector<int> preds;

  // dense: weights[out][in] over the flattened predecessor, bias[out]
  std::vector<std::vector<std::string>> weights;
  std::vector<std::string> bias;

  // conv: filter flattened by ((fy * fw + fx) * c_in + ci) * c_out + co
  int fw = 0, fh = 0, cin = 0, cout = 0;
  int sw = 1, sh = 1, pw = 0, ph = 0;
  std::vector<std::string> filter;

  // filled in by validation
  Shape out_shape;
};

struct ModelDoc {
  Shape input_shape;
  std::vector<LayerDoc> layers;  // layers[0] is the implicit input layer
};

// Shape inference plus structural validation; throws std::runtime_error naming
// the offending layer id. Called by the parser, callable on built docs too.
void validate_model(ModelDoc& doc);

// JSON model file I/O (format documented in docs/model_format.md).
ModelDoc load_model(const std::string& path);
void save_model(const ModelDoc& doc, const std::string& path);
std::string model_to_json_text(const ModelDoc& doc);
ModelDoc model_from_json_text(const std::string& text);

// Inputs file: CSV, one comma-separated vector of decimal strings per line.
std::vector<std::vector<std::string>> load_inputs(const std::string& path);

// Residual-block geometry derived from the DAG: the unique deepest common
// ancestor of the join's two predecessors, and each branch's composed stride
// from the join frame back to the head (dense layers erase grid structure, so
// a branch containing one reports dense=true and no stride).
int join_head(const ModelDoc& doc, int join_id);

struct BranchTrace {
  bool dense = false;
  int stride_w = 1, stride_h = 1;
};
BranchTrace trace_branch(const ModelDoc& doc, int from_layer, int head);

// --- typed instantiation ------------------------------------------------

template <class P>
struct Layer {
  using S = typename P::Scalar;

  int id = 0;
  LayerKind kind = LayerKind::Input;
  std::vector<int> preds;
  Shape in_shape;   // predecessor's output shape (first pred for joins)
  Shape out_shape;

  std::vector<S> weights;  // dense, [out * in] row-major
  std::vector<S> bias;     // dense or conv
  std::vector<S> filter;   // conv, same flattening as LayerDoc
  int fw = 0, fh = 0, cin = 0, cout = 0, sw = 1, sh = 1, pw = 0, ph = 0;
  int join_head = -1;      // joins: deepest common ancestor of the branches
};

template <class P>
struct Network {
  Shape input_shape;
  std::vector<Layer<P>> layers;

  int output_layer() const { return static_cast<int>(layers.size()) - 1; }
  int output_size() const { return layers.back().out_shape.numel(); }
};

template <class P>
Network<P> instantiate(const ModelDoc& doc) {
  using S = typename P::Scalar;
  Network<P> net;
  net.input_shape = doc.input_shape;
  net.layers.reserve(doc.layers.size());
  for (const LayerDoc& ld : doc.layers) {
    Layer<P> l;
    l.id = ld.id;
    l.kind = ld.kind;
    l.preds = ld.preds;
    l.out_shape = ld.out_shape;
    if (!ld.preds.empty()) l.in_shape = doc.layers[ld.preds[0]].out_shape;
    l.fw = ld.fw; l.fh = ld.fh; l.cin = ld.cin; l.cout = ld.cout;
    l.sw = ld.sw; l.sh = ld.sh; l.pw = ld.pw; l.ph = ld.ph;
    if (ld.kind == LayerKind::Dense) {
      const int in = l.in_shape.numel();
      l.weights.reserve(ld.weights.size() * in);
      for (const auto& row : ld.weights)
        for (const std::string& t : row) l.weights.push_back(scalar_from_decimal<S>(t));
      for (const std::string& t : ld.bias) l.bias.push_back(scalar_from_decimal<S>(t));
    } else if (ld.kind == LayerKind::Conv) {
      l.filter.reserve(ld.filter.size());
      for (const std::string& t : ld.filter) l.filter.push_back(scalar_from_decimal<S>(t));
      for (const std::string& t : ld.bias) l.bias.push_back(scalar_from_decimal<S>(t));
    } else if (ld.kind == LayerKind::Join) {
      l.join_head = join_head(doc, ld.id);
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

// Conv filter accessor: coefficient between input cell channel ci and output
// channel co at filter offset (fx, fy).
template <class P>
const typename P::Scalar& filter_at(const Layer<P>& l, int fx, int fy, int ci, int co) {
  return l.filter[((fy * l.fw + fx) * l.cin + ci) * l.cout + co];
}

// --- input region -------------------------------------------------------

// Perturbation region around a point: per pixel [center - eps, center + eps],
// optionally clamped to [0, 1]. Widened outward first in float mode so the
// region never undershoots the nominal ball.
template <class P>
struct InputBox {
  std::vector<Interval<P>> pixels;
};

template <class P>
InputBox<P> input_box(const std::vector<typename P::Scalar>& center,
                      const typename P::Scalar& eps, bool clamp01) {
  using S = typename P::Scalar;
  if (eps < S(0)) throw std::invalid_argument("input_box: negative epsilon");
  InputBox<P> box;
  box.pixels.reserve(center.size());
  for (const S& c : center) {
    Interval<P> p = iv_add(Interval<P>::point(c), Interval<P>(S(-eps), eps));
    if (clamp01) {
      if (c < S(0) || S(1) < c)
        throw std::invalid_argument("input_box: clamped center outside [0,1]");
      p = Interval<P>(std::max(p.lo, S(0)), std::min(p.hi, S(1)));
    }
    box.pixels.push_back(std::move(p));
  }
  return box;
}

}  // namespace polycert
