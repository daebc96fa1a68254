// depsets.hpp — dependence-set geometry. A neuron's m-step dependence set in a
// convolutional chain is a cuboid: a square (or rectangular, for asymmetric
// filters) window times the full channel depth. Window widths, origins, and
// accumulated strides follow one-line recurrences; these functions are the
// single source of truth for them, shared with the backsubstitution frames.

#pragma once

#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "polycert/network.hpp"

namespace polycert {

// One conv layer's geometry, in walk-back order: element 0 is the conv that
// produces the query layer, element 1 the conv below it, and so on.
struct ConvStep {
  int fw = 1, fh = 1;
  int sw = 1, sh = 1;
  int pw = 0, ph = 0;
};

// W' = (W - 1) * s + f: one backward step of the window-width recurrence.
inline int grow_width(int width, int f, int s) { return (width - 1) * s + f; }

// origin' = origin * s - p: one backward step of the cuboid-origin recurrence.
// Origins are absolute grid coordinates; negative values are legal and mean
// the window hangs over the zero-padding border.
inline long long step_origin(long long origin, int s, int p) {
  return origin * static_cast<long long>(s) - p;
}

struct DepCuboid {
  int layer = 0;  // layer whose output grid the cuboid lives in
  long long origin_w = 0, origin_h = 0;
  int width_w = 1, width_h = 1;
  int channels = 1;

  long long size() const {
    return static_cast<long long>(width_w) * width_h * channels;
  }
};

struct AccumulatedStride {
  long long sw = 1, sh = 1;
};

// Window width after walking the whole chain (W^0 = 1 at the query neuron).
inline std::pair<int, int> dep_width(std::span<const ConvStep> chain) {
  int ww = 1, wh = 1;
  for (const ConvStep& st : chain) {
    ww = grow_width(ww, st.fw, st.sw);
    wh = grow_width(wh, st.fh, st.sh);
  }
  return {ww, wh};
}

// |D| = W_w * W_h * C: cuboid cell count for a window over C channels.
inline long long dep_size(std::pair<int, int> width, int channels) {
  return static_cast<long long>(width.first) * width.second * channels;
}

inline AccumulatedStride accumulated_stride(std::span<const ConvStep> chain) {
  AccumulatedStride s;
  for (const ConvStep& st : chain) {
    s.sw *= st.sw;
    s.sh *= st.sh;
  }
  return s;
}

// Cuboid origin for the query position (w, h) after walking the chain; with
// zero padding this reduces to (S * w, S * h) for the accumulated stride S.
inline std::pair<long long, long long> dep_position(int w, int h,
                                                    std::span<const ConvStep> chain) {
  long long ow = w, oh = h;
  for (const ConvStep& st : chain) {
    ow = step_origin(ow, st.sw, st.pw);
    oh = step_origin(oh, st.sh, st.ph);
  }
  return {ow, oh};
}

inline ConvStep conv_step_of(const LayerDoc& l) {
  return ConvStep{l.fw, l.fh, l.sw, l.sh, l.pw, l.ph};
}

// First dependence set of one neuron: the immediate-predecessor cuboid.
// Dense layers depend on the whole predecessor grid; ReLU and join neurons on
// the same coordinate in each predecessor (the join's second cuboid is the
// other half of the split, see dep_split_residual).
inline DepCuboid dep_set_first(const ModelDoc& doc, int layer_id, int w, int h, int c) {
  const LayerDoc& l = doc.layers[layer_id];
  if (l.kind == LayerKind::Input)
    throw std::invalid_argument("dep_set_first: input layer has no predecessors");
  (void)c;  // cuboids always span all predecessor channels
  const Shape in = doc.layers[l.preds[0]].out_shape;
  DepCuboid d;
  d.layer = l.preds[0];
  d.channels = in.c;
  switch (l.kind) {
    case LayerKind::Dense:
      d.origin_w = 0;
      d.origin_h = 0;
      d.width_w = in.w;
      d.width_h = in.h;
      break;
    case LayerKind::Conv:
      d.origin_w = step_origin(w, l.sw, l.pw);
      d.origin_h = step_origin(h, l.sh, l.ph);
      d.width_w = l.fw;
      d.width_h = l.fh;
      break;
    case LayerKind::Relu:
    case LayerKind::Join:
      d.origin_w = w;
      d.origin_h = h;
      d.width_w = 1;
      d.width_h = 1;
      break;
    case LayerKind::Input:
      break;
  }
  return d;
}

// A join neuron's first dependence set splits into one single-column cuboid
// per branch; the two cuboids live in the branch-end layers (for an identity
// skip, directly in the head).
inline std::pair<DepCuboid, DepCuboid> dep_split_residual(const ModelDoc& doc,
                                                          int join_id, int w, int h) {
  const LayerDoc& l = doc.layers[join_id];
  if (l.kind != LayerKind::Join)
    throw std::invalid_argument("dep_split_residual: not a join layer");
  auto one = [&](int pred) {
    DepCuboid d;
    d.layer = pred;
    d.origin_w = w;
    d.origin_h = h;
    d.width_w = 1;
    d.width_h = 1;
    d.channels = doc.layers[pred].out_shape.c;
    return d;
  };
  return {one(l.preds[0]), one(l.preds[1])};
}

// Composes one branch's conv steps from the join frame back to the block
// head, yielding the join neuron's dependence cuboid in the head layer. The
// identity skip composes no steps and stays a single column. Nested joins
// compose through their first branch (branch strides are validated equal).
inline DepCuboid dep_branch_to_head(const ModelDoc& doc, int join_id, int w, int h,
                                    int branch) {
  const LayerDoc& jl = doc.layers[join_id];
  if (jl.kind != LayerKind::Join)
    throw std::invalid_argument("dep_branch_to_head: not a join layer");
  const int head = join_head(doc, join_id);
  std::vector<ConvStep> steps;
  int cur = jl.preds[branch == 0 ? 0 : 1];
  while (cur != head) {
    const LayerDoc& l = doc.layers[cur];
    switch (l.kind) {
      case LayerKind::Conv:
        steps.push_back(conv_step_of(l));
        cur = l.preds[0];
        break;
      case LayerKind::Relu:
        cur = l.preds[0];
        break;
      case LayerKind::Join: {
        int inner_head = join_head(doc, cur);
        DepCuboid inner = dep_branch_to_head(doc, cur, 0, 0, 0);
        // splice the inner block's composed window in as one synthetic step
        ConvStep st;
        st.fw = inner.width_w;
        st.fh = inner.width_h;
        BranchTrace tr = trace_branch(doc, l.preds[0], inner_head);
        st.sw = tr.stride_w;
        st.sh = tr.stride_h;
        st.pw = static_cast<int>(-inner.origin_w);
        st.ph = static_cast<int>(-inner.origin_h);
        steps.push_back(st);
        cur = inner_head;
        break;
      }
      case LayerKind::Dense:
        throw std::invalid_argument("dep_branch_to_head: branch contains a dense layer");
      case LayerKind::Input:
        throw std::invalid_argument("dep_branch_to_head: walked past the input");
    }
  }
  DepCuboid d;
  d.layer = head;
  d.channels = doc.layers[head].out_shape.c;
  auto [ww, wh] = dep_width(steps);
  d.width_w = ww;
  d.width_h = wh;
  auto [ow, oh] = dep_position(w, h, steps);
  d.origin_w = ow;
  d.origin_h = oh;
  return d;
}

}  // namespace polycert
