// oracle.hpp — independent test oracles for the analyzer.
//
// Everything here is re-derived from the model document with dense
// exact-rational arithmetic and its own loops: convolutions are materialized
// as dense matrices, expressions are full-width coefficient vectors, and the
// only code shared with the engine is the model document itself.  The
// reference analyzer follows the same refinement schedule and the same
// freeze rule, so on exact-rational runs the engine must reproduce its
// bounds to the digit.
//
// Also provided: a BFS reachability walk over the network graph (ground
// truth for receptive-field geometry), a concrete evaluator with randomized
// summation order per neuron (ground truth for inference-order robustness),
// and a simple sampling attack (ground truth that "verified" regions contain
// no counterexample we can find).

#pragma once

#include <gmpxx.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "polycert/decimal.hpp"
#include "polycert/network.hpp"
#include "polycert/rng.hpp"

namespace polycert::oracle {

using Q = mpq_class;

struct QI {
  Q lo, hi;
};

inline int rid(const Shape& s, int w, int h, int c) { return (h * s.w + w) * s.c + c; }

// ---------------------------------------------------------------------------
// Dense rational materialization

struct RefLayer {
  LayerKind kind = LayerKind::Input;
  Shape shape;
  std::vector<int> preds;
  std::vector<Q> A;  // affine layers: numel x pred-numel, row-major
  std::vector<Q> b;
  int head = -1;  // joins: deepest common ancestor of the two branches
};

struct RefNet {
  std::vector<RefLayer> layers;
  int output() const { return static_cast<int>(layers.size()) - 1; }
};

inline int ref_join_head(const ModelDoc& doc, int a, int b) {
  auto ancestors = [&](int from) {
    std::set<int> seen;
    std::vector<int> stack{from};
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      if (!seen.insert(k).second) continue;
      for (int p : doc.layers[k].preds) stack.push_back(p);
    }
    return seen;
  };
  const std::set<int> anc_a = ancestors(a);
  const std::set<int> anc_b = ancestors(b);
  int best = -1;
  for (int k : anc_a)
    if (anc_b.count(k)) best = std::max(best, k);
  if (best < 0) throw std::logic_error("reference: join without a common ancestor");
  return best;
}

inline RefNet ref_instantiate(const ModelDoc& doc, size_t max_neurons) {
  size_t total = 0;
  for (const LayerDoc& L : doc.layers) total += static_cast<size_t>(L.out_shape.numel());
  if (total > max_neurons)
    throw std::invalid_argument("reference: network too large for the dense oracle");

  RefNet net;
  net.layers.resize(doc.layers.size());
  for (size_t k = 0; k < doc.layers.size(); ++k) {
    const LayerDoc& L = doc.layers[k];
    RefLayer& R = net.layers[k];
    R.kind = L.kind;
    R.shape = L.out_shape;
    R.preds = L.preds;
    switch (L.kind) {
      case LayerKind::Dense: {
        const int n_out = L.out_shape.numel();
        const int n_in = doc.layers[L.preds[0]].out_shape.numel();
        R.A.resize(static_cast<size_t>(n_out) * n_in);
        R.b.resize(n_out);
        for (int j = 0; j < n_out; ++j) {
          for (int t = 0; t < n_in; ++t)
            R.A[static_cast<size_t>(j) * n_in + t] = rational_from_decimal(L.weights[j][t]);
          R.b[j] = rational_from_decimal(L.bias[j]);
        }
        break;
      }
      case LayerKind::Conv: {
        const Shape in_s = doc.layers[L.preds[0]].out_shape;
        const Shape out_s = L.out_shape;
        const int n_in = in_s.numel();
        R.A.assign(static_cast<size_t>(out_s.numel()) * n_in, Q(0));
        R.b.resize(out_s.numel());
        for (int h = 0; h < out_s.h; ++h)
          for (int w = 0; w < out_s.w; ++w)
            for (int d = 0; d < out_s.c; ++d) {
              const int j = rid(out_s, w, h, d);
              R.b[j] = rational_from_decimal(L.bias[d]);
              for (int fy = 0; fy < L.fh; ++fy) {
                const int iy = h * L.sh - L.ph + fy;
                if (iy < 0 || iy >= in_s.h) continue;
                for (int fx = 0; fx < L.fw; ++fx) {
                  const int ix = w * L.sw - L.pw + fx;
                  if (ix < 0 || ix >= in_s.w) continue;
                  for (int ci = 0; ci < L.cin; ++ci)
                    R.A[static_cast<size_t>(j) * n_in + rid(in_s, ix, iy, ci)] =
                        rational_from_decimal(
                            L.filter[static_cast<size_t>((fy * L.fw + fx) * L.cin + ci) *
                                         L.cout +
                                     d]);
                }
              }
            }
        break;
      }
      case LayerKind::Join:
        R.head = ref_join_head(doc, L.preds[0], L.preds[1]);
        break;
      case LayerKind::Relu:
      case LayerKind::Input:
        break;
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Exact interval propagation

inline std::vector<QI> ref_input_box(const std::vector<Q>& center, const Q& eps,
                                     bool clamp01) {
  std::vector<QI> box(center.size());
  for (size_t i = 0; i < center.size(); ++i) {
    Q lo = center[i] - eps;
    Q hi = center[i] + eps;
    if (clamp01) {
      lo = std::max(lo, Q(0));
      hi = std::min(hi, Q(1));
      if (lo > hi) throw std::invalid_argument("reference: center outside [0,1]");
    }
    box[i] = {lo, hi};
  }
  return box;
}

inline void ref_layer_bounds(const RefNet& net, int k, std::vector<std::vector<QI>>& bounds) {
  const RefLayer& L = net.layers[k];
  const std::vector<QI>& x = bounds[L.preds[0]];
  std::vector<QI>& y = bounds[k];
  switch (L.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv: {
      const int n_out = L.shape.numel();
      const int n_in = static_cast<int>(x.size());
      y.assign(n_out, QI{Q(0), Q(0)});
      for (int j = 0; j < n_out; ++j) {
        Q lo = L.b[j], hi = L.b[j];
        const Q* row = &L.A[static_cast<size_t>(j) * n_in];
        for (int t = 0; t < n_in; ++t) {
          if (row[t] == 0) continue;
          if (row[t] > 0) {
            lo += row[t] * x[t].lo;
            hi += row[t] * x[t].hi;
          } else {
            lo += row[t] * x[t].hi;
            hi += row[t] * x[t].lo;
          }
        }
        y[j] = {lo, hi};
      }
      break;
    }
    case LayerKind::Relu:
      y.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i)
        y[i] = {std::max(x[i].lo, Q(0)), std::max(x[i].hi, Q(0))};
      break;
    case LayerKind::Join: {
      const std::vector<QI>& b2 = bounds[L.preds[1]];
      y.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) y[i] = {x[i].lo + b2[i].lo, x[i].hi + b2[i].hi};
      break;
    }
    case LayerKind::Input:
      throw std::logic_error("reference: input layer after layer 0");
  }
}

// ---------------------------------------------------------------------------
// Reference analysis

struct RefRelax {
  Q gamma = 0, delta = 0;  // upper line gamma*x + delta
  Q alpha = 0;             // lower line alpha*x (alpha in {0, 1})
};

inline RefRelax ref_relax(const QI& b) {
  RefRelax r;
  if (b.lo >= 0) {
    r.gamma = 1;
    r.alpha = 1;
  } else if (b.hi <= 0) {
    // all zero
  } else {
    r.gamma = b.hi / (b.hi - b.lo);
    r.delta = -b.lo * b.hi / (b.hi - b.lo);
    r.alpha = b.hi > -b.lo ? 1 : 0;
  }
  return r;
}

struct RefExpr {
  int layer = 0;
  std::vector<Q> c;
  Q k = 0;
};

// Walk an expression backward to `stop`, appending one concretized candidate
// per affine or join substitution (plus a final one if the walk arrives at
// the stop via a relu).  Branch walks never concretize.
inline void ref_walk(const RefNet& net, const std::vector<std::vector<RefRelax>>& relax,
                     const std::vector<std::vector<QI>>& bounds, RefExpr& e, int stop,
                     bool upper, std::vector<Q>* cands) {
  auto concretize = [&](const RefExpr& ex) {
    Q v = ex.k;
    const std::vector<QI>& bs = bounds[ex.layer];
    for (size_t j = 0; j < ex.c.size(); ++j) {
      if (ex.c[j] == 0) continue;
      const bool pos = ex.c[j] > 0;
      v += ex.c[j] * ((pos == upper) ? bs[j].hi : bs[j].lo);
    }
    return v;
  };

  bool pending = false;
  while (e.layer != stop) {
    const RefLayer& L = net.layers[e.layer];
    switch (L.kind) {
      case LayerKind::Dense:
      case LayerKind::Conv: {
        const int n_in = static_cast<int>(net.layers[L.preds[0]].shape.numel());
        std::vector<Q> nc(n_in, Q(0));
        for (size_t j = 0; j < e.c.size(); ++j) {
          if (e.c[j] == 0) continue;
          e.k += e.c[j] * L.b[j];
          const Q* row = &L.A[j * static_cast<size_t>(n_in)];
          for (int t = 0; t < n_in; ++t)
            if (row[t] != 0) nc[t] += e.c[j] * row[t];
        }
        e.c = std::move(nc);
        e.layer = L.preds[0];
        if (cands) cands->push_back(concretize(e));
        pending = false;
        break;
      }
      case LayerKind::Relu: {
        const int pred = L.preds[0];
        const std::vector<RefRelax>& rx = relax[pred];
        for (size_t j = 0; j < e.c.size(); ++j) {
          if (e.c[j] == 0) continue;
          const bool pos = e.c[j] > 0;
          if (pos == upper) {  // this side takes the upper relaxation line
            e.k += e.c[j] * rx[j].delta;
            e.c[j] *= rx[j].gamma;
          } else {
            e.c[j] *= rx[j].alpha;
          }
        }
        e.layer = pred;
        pending = true;
        break;
      }
      case LayerKind::Join: {
        RefExpr ea{L.preds[0], e.c, e.k};
        RefExpr eb{L.preds[1], std::move(e.c), Q(0)};
        ref_walk(net, relax, bounds, ea, L.head, upper, nullptr);
        ref_walk(net, relax, bounds, eb, L.head, upper, nullptr);
        e.layer = L.head;
        e.k = ea.k + eb.k;
        e.c.resize(ea.c.size());
        for (size_t j = 0; j < ea.c.size(); ++j) e.c[j] = ea.c[j] + eb.c[j];
        if (cands) cands->push_back(concretize(e));
        pending = false;
        break;
      }
      case LayerKind::Input:
        throw std::logic_error("reference: walk fell through the input layer");
    }
  }
  if (pending && cands) cands->push_back(concretize(e));
}

struct RefAnalysis {
  std::vector<std::vector<QI>> bounds;
  std::vector<Q> margin_lows;  // one per class j != label, ascending j
  bool verified = false;
};

// Full reference analysis; label < 0 skips the margin pass.
inline RefAnalysis reference_analyze(const ModelDoc& doc, const std::vector<Q>& center,
                                     const Q& eps, bool clamp01, int label,
                                     size_t max_neurons = 4000) {
  const RefNet net = ref_instantiate(doc, max_neurons);
  const int n_layers = static_cast<int>(net.layers.size());

  RefAnalysis out;
  out.bounds.resize(n_layers);
  out.bounds[0] = ref_input_box(center, eps, clamp01);
  for (int k = 1; k < n_layers; ++k) ref_layer_bounds(net, k, out.bounds);

  std::vector<char> feeds_relu(n_layers, 0);
  for (const RefLayer& L : net.layers)
    if (L.kind == LayerKind::Relu) feeds_relu[L.preds[0]] = 1;

  std::vector<std::vector<RefRelax>> relax(n_layers);
  auto refresh_relax = [&](int k) {
    relax[k].resize(out.bounds[k].size());
    for (size_t j = 0; j < out.bounds[k].size(); ++j) relax[k][j] = ref_relax(out.bounds[k][j]);
  };
  for (int k = 0; k < n_layers; ++k)
    if (feeds_relu[k]) refresh_relax(k);

  std::vector<int> targets;
  for (int k = 1; k < n_layers; ++k)
    if (feeds_relu[k] && k != net.output()) targets.push_back(k);
  targets.push_back(net.output());

  for (int t : targets) {
    const bool is_output = t == net.output();
    const RefLayer& T = net.layers[t];
    const bool affine = T.kind == LayerKind::Dense || T.kind == LayerKind::Conv;
    const int n = T.shape.numel();

    for (int q = 0; q < n; ++q) {
      Q lo = out.bounds[t][q].lo;
      Q hi = out.bounds[t][q].hi;
      const bool prestable = lo >= 0 || hi <= 0;
      if (!is_output && prestable) continue;  // frozen before any work

      std::vector<Q> ups, los;
      for (const bool upper : {true, false}) {
        RefExpr e;
        if (affine) {
          const int n_in = static_cast<int>(net.layers[T.preds[0]].shape.numel());
          e.layer = T.preds[0];
          e.c.assign(&T.A[static_cast<size_t>(q) * n_in],
                     &T.A[static_cast<size_t>(q) * n_in] + n_in);
          e.k = T.b[q];
          std::vector<Q>* cands = upper ? &ups : &los;
          {  // the init itself is an affine step: concretize immediately
            Q v = e.k;
            for (int j = 0; j < n_in; ++j) {
              if (e.c[j] == 0) continue;
              const bool pos = e.c[j] > 0;
              v += e.c[j] * ((pos == upper) ? out.bounds[e.layer][j].hi
                                            : out.bounds[e.layer][j].lo);
            }
            cands->push_back(v);
          }
          ref_walk(net, relax, out.bounds, e, 0, upper, cands);
        } else {
          e.layer = t;
          e.c.assign(n, Q(0));
          e.c[q] = 1;
          ref_walk(net, relax, out.bounds, e, 0, upper, upper ? &ups : &los);
        }
      }

      // Replay the checkpoint pairs with the freeze rule.
      if (ups.size() != los.size())
        throw std::logic_error("reference: polarity walks disagree on checkpoints");
      for (size_t i = 0; i < ups.size(); ++i) {
        hi = std::min(hi, ups[i]);
        lo = std::max(lo, los[i]);
        if (!is_output && (lo >= 0 || hi <= 0)) break;
      }
      out.bounds[t][q] = {lo, hi};
    }

    if (is_output) continue;
    if (feeds_relu[t]) refresh_relax(t);
    for (int k = t + 1; k < n_layers; ++k) {
      ref_layer_bounds(net, k, out.bounds);
      if (feeds_relu[k]) refresh_relax(k);
    }
  }

  if (label >= 0) {
    const int n_out = net.layers[net.output()].shape.numel();
    if (label >= n_out) throw std::invalid_argument("reference: label out of range");
    out.verified = true;
    for (int j = 0; j < n_out; ++j) {
      if (j == label) continue;
      RefExpr e;
      e.layer = net.output();
      e.c.assign(n_out, Q(0));
      e.c[label] = 1;
      e.c[j] = -1;
      std::vector<Q> los;
      ref_walk(net, relax, out.bounds, e, 0, /*upper=*/false, &los);
      if (los.empty()) throw std::logic_error("reference: margin walk had no checkpoint");
      Q best = los[0];
      for (const Q& v : los) best = std::max(best, v);
      out.margin_lows.push_back(best);
      if (best <= 0) out.verified = false;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reachability ground truth

// Frontier after exactly `steps` backward moves from one neuron; every
// element steps through its own layer (dense: all predecessor cells, conv:
// the in-grid window, relu: the same cell, join: the same cell in both
// branches).
inline std::set<std::array<int, 4>> reach(const ModelDoc& doc, int layer, int w, int h,
                                          int c, int steps) {
  std::set<std::array<int, 4>> frontier{{layer, w, h, c}};
  for (int s = 0; s < steps; ++s) {
    std::set<std::array<int, 4>> next;
    for (const auto& [k, cw, ch, cc] : frontier) {
      const LayerDoc& L = doc.layers[k];
      switch (L.kind) {
        case LayerKind::Input:
          next.insert({k, cw, ch, cc});  // nowhere further to go
          break;
        case LayerKind::Dense: {
          const Shape in_s = doc.layers[L.preds[0]].out_shape;
          for (int ih = 0; ih < in_s.h; ++ih)
            for (int iw = 0; iw < in_s.w; ++iw)
              for (int ic = 0; ic < in_s.c; ++ic) next.insert({L.preds[0], iw, ih, ic});
          break;
        }
        case LayerKind::Conv: {
          const Shape in_s = doc.layers[L.preds[0]].out_shape;
          for (int fy = 0; fy < L.fh; ++fy) {
            const int iy = ch * L.sh - L.ph + fy;
            if (iy < 0 || iy >= in_s.h) continue;
            for (int fx = 0; fx < L.fw; ++fx) {
              const int ix = cw * L.sw - L.pw + fx;
              if (ix < 0 || ix >= in_s.w) continue;
              for (int ic = 0; ic < in_s.c; ++ic) next.insert({L.preds[0], ix, iy, ic});
            }
          }
          break;
        }
        case LayerKind::Relu:
          next.insert({L.preds[0], cw, ch, cc});
          break;
        case LayerKind::Join:
          next.insert({L.preds[0], cw, ch, cc});
          next.insert({L.preds[1], cw, ch, cc});
          break;
      }
    }
    frontier = std::move(next);
  }
  return frontier;
}

// ---------------------------------------------------------------------------
// Concrete double evaluation with randomized summation order

// Evaluates the network in IEEE doubles; when `rng` is non-null, each
// neuron's terms (bias included) are summed in an independently shuffled
// order.  Returns every layer's activations.
inline std::vector<std::vector<double>> permuted_eval_layers(
    const ModelDoc& doc, const std::vector<double>& input, Rng* rng) {
  std::vector<std::vector<double>> act(doc.layers.size());
  if (static_cast<int>(input.size()) != doc.input_shape.numel())
    throw std::invalid_argument("permuted_eval: input size mismatch");
  act[0] = input;

  std::vector<double> terms;
  auto reduce = [&](std::vector<double>& ts) {
    if (rng) rng->shuffle(ts);
    double acc = 0.0;
    for (double v : ts) acc += v;
    return acc;
  };

  for (size_t k = 1; k < doc.layers.size(); ++k) {
    const LayerDoc& L = doc.layers[k];
    const std::vector<double>& x = act[L.preds[0]];
    std::vector<double>& y = act[k];
    switch (L.kind) {
      case LayerKind::Dense: {
        const int n_out = L.out_shape.numel();
        const int n_in = static_cast<int>(x.size());
        y.resize(n_out);
        for (int j = 0; j < n_out; ++j) {
          terms.clear();
          terms.push_back(double_from_decimal(L.bias[j]));
          for (int t = 0; t < n_in; ++t)
            terms.push_back(double_from_decimal(L.weights[j][t]) * x[t]);
          y[j] = reduce(terms);
        }
        break;
      }
      case LayerKind::Conv: {
        const Shape in_s = doc.layers[L.preds[0]].out_shape;
        const Shape out_s = L.out_shape;
        y.resize(out_s.numel());
        for (int h = 0; h < out_s.h; ++h)
          for (int w = 0; w < out_s.w; ++w)
            for (int d = 0; d < out_s.c; ++d) {
              terms.clear();
              terms.push_back(double_from_decimal(L.bias[d]));
              for (int fy = 0; fy < L.fh; ++fy) {
                const int iy = h * L.sh - L.ph + fy;
                if (iy < 0 || iy >= in_s.h) continue;
                for (int fx = 0; fx < L.fw; ++fx) {
                  const int ix = w * L.sw - L.pw + fx;
                  if (ix < 0 || ix >= in_s.w) continue;
                  for (int ci = 0; ci < L.cin; ++ci)
                    terms.push_back(
                        double_from_decimal(
                            L.filter[static_cast<size_t>((fy * L.fw + fx) * L.cin + ci) *
                                         L.cout +
                                     d]) *
                        x[rid(in_s, ix, iy, ci)]);
                }
              }
              y[rid(out_s, w, h, d)] = reduce(terms);
            }
        break;
      }
      case LayerKind::Relu:
        y.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      case LayerKind::Join: {
        const std::vector<double>& b = act[L.preds[1]];
        y.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + b[i];
        break;
      }
      case LayerKind::Input:
        throw std::logic_error("permuted_eval: input layer after layer 0");
    }
  }
  return act;
}

// Output-layer activations only; see permuted_eval_layers.
inline std::vector<double> permuted_eval(const ModelDoc& doc,
                                         const std::vector<double>& input, Rng* rng) {
  return permuted_eval_layers(doc, input, rng).back();
}

// ---------------------------------------------------------------------------
// Sampling attack

// Searches the box for an input where some other class matches or beats
// `label`.  Returns the counterexample input if found.  `budget` counts
// forward evaluations.
inline std::optional<std::vector<double>> attack(const ModelDoc& doc,
                                                 const std::vector<double>& center,
                                                 double eps, bool clamp01, int label,
                                                 int budget, Rng& rng) {
  const size_t n = center.size();
  std::vector<double> lo(n), hi(n);
  for (size_t i = 0; i < n; ++i) {
    lo[i] = center[i] - eps;
    hi[i] = center[i] + eps;
    if (clamp01) {
      lo[i] = std::max(lo[i], 0.0);
      hi[i] = std::min(hi[i], 1.0);
    }
  }

  auto is_counterexample = [&](const std::vector<double>& x) {
    const std::vector<double> out = permuted_eval(doc, x, nullptr);
    for (size_t j = 0; j < out.size(); ++j)
      if (static_cast<int>(j) != label && out[j] >= out[label]) return true;
    return false;
  };

  std::vector<double> x(n);
  for (int trial = 0; trial < budget; ++trial) {
    if (trial == 0) {
      x = center;
      for (size_t i = 0; i < n; ++i) x[i] = std::min(std::max(x[i], lo[i]), hi[i]);
    } else if (trial % 2 == 1) {  // random corner
      for (size_t i = 0; i < n; ++i) x[i] = (rng.next() & 1) ? hi[i] : lo[i];
    } else {  // uniform sample
      for (size_t i = 0; i < n; ++i) x[i] = lo[i] + rng.unit() * (hi[i] - lo[i]);
    }
    if (is_counterexample(x)) return x;
  }
  return std::nullopt;
}

}  // namespace polycert::oracle
