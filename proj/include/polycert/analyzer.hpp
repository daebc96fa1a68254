// analyzer.hpp — end-to-end analysis: relu relaxations, the refinement
// schedule (one backsubstitution pass per layer that feeds a relu, in
// topological order, then the output layer), downstream refreshes, and
// robustness verification via margin rows.

#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "polycert/backsub.hpp"
#include "polycert/eval.hpp"
#include "polycert/interval.hpp"
#include "polycert/network.hpp"

namespace polycert {

enum class NeuronStatus { StablePos, StableNeg, Unstable };

template <class P>
NeuronStatus neuron_status(const Interval<P>& b) {
  using S = typename P::Scalar;
  if (!(b.lo < S(0))) return NeuronStatus::StablePos;
  if (!(b.hi > S(0))) return NeuronStatus::StableNeg;
  return NeuronStatus::Unstable;
}

// Per-neuron relu relaxation over bound [l, u]:
//   stable positive (l >= 0): relu is the identity on the interval;
//   stable negative (u <= 0): relu is the zero map;
//   unstable:  upper line   u/(u-l) * x  -  l*u/(u-l),
//              lower line   a * x  with a = 1 if u > -l else 0.
// Slopes and offsets are intervals so inexact divisions carry their own
// rounding envelope.
template <class P>
NeuronRelax<P> relu_relaxation(const Interval<P>& b) {
  using S = typename P::Scalar;
  const Interval<P> one = Interval<P>::point(S(1));
  const Interval<P> zero;
  NeuronRelax<P> r;
  switch (neuron_status(b)) {
    case NeuronStatus::StablePos:
      r.alpha = one;
      r.beta = zero;
      r.gamma = one;
      r.delta = zero;
      break;
    case NeuronStatus::StableNeg:
      r.alpha = zero;
      r.beta = zero;
      r.gamma = zero;
      r.delta = zero;
      break;
    case NeuronStatus::Unstable: {
      const Interval<P> den =
          iv_sub(Interval<P>::point(b.hi), Interval<P>::point(b.lo));
      r.gamma = iv_div(Interval<P>::point(b.hi), den);
      const Interval<P> num =
          iv_mul(Interval<P>::point(-b.lo), Interval<P>::point(b.hi));
      r.delta = iv_div(num, den);
      r.alpha = b.hi > -b.lo ? one : zero;
      r.beta = zero;
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Inference-deviation allowances (widened mode only)
//
// dev[k][j] bounds the local rounding error a concrete evaluation of layer k
// can introduce at neuron j, under any summation order and rounding mode,
// given inputs anywhere in the predecessor's stored bounds.  Backsubstitution
// absorbs sum_j |coeff_j| * dev[k][j] into the row constant each time the
// expression crosses layer k, making every certificate valid for the network
// as deployed, not just as idealized.  Exact mode leaves all of this empty.

template <class P>
void recompute_dev(const Network<P>& net, AnalysisState<P>& state, int from_layer) {
  if constexpr (P::exact) {
    (void)net;
    (void)state;
    (void)from_layer;
    return;
  } else {
    using S = typename P::Scalar;
    state.dev.resize(net.layers.size());
    auto mag = [](const Interval<P>& b) {
      return std::max(scalar_abs<S>(b.lo), scalar_abs<S>(b.hi));
    };
    for (size_t k = std::max(from_layer, 1); k < net.layers.size(); ++k) {
      const Layer<P>& L = net.layers[k];
      std::vector<S>& dv = state.dev[k];
      switch (L.kind) {
        case LayerKind::Dense: {
          const int n_out = L.out_shape.numel();
          const int n_in = L.in_shape.numel();
          const std::vector<Interval<P>>& x = state.bounds[L.preds[0]];
          dv.assign(n_out, S(0));
          for (int j = 0; j < n_out; ++j) {
            S absrow = scalar_abs<S>(L.bias[j]);
            const S* w = &L.weights[static_cast<size_t>(j) * n_in];
            for (int t = 0; t < n_in; ++t)
              absrow = P::add_up(absrow, P::mul_up(scalar_abs<S>(w[t]), mag(x[t])));
            dv[j] = 2.0 * static_cast<S>(n_in + 2) * P::ulp_above(absrow);
          }
          break;
        }
        case LayerKind::Conv: {
          const Shape& in_s = L.in_shape;
          const Shape& out_s = L.out_shape;
          const std::vector<Interval<P>>& x = state.bounds[L.preds[0]];
          dv.assign(out_s.numel(), S(0));
          for (int h = 0; h < out_s.h; ++h)
            for (int w = 0; w < out_s.w; ++w)
              for (int d = 0; d < out_s.c; ++d) {
                S absrow = scalar_abs<S>(L.bias[d]);
                long long terms = 1;
                for (int fy = 0; fy < L.fh; ++fy) {
                  const long long iy = static_cast<long long>(h) * L.sh - L.ph + fy;
                  if (iy < 0 || iy >= in_s.h) continue;
                  for (int fx = 0; fx < L.fw; ++fx) {
                    const long long ix = static_cast<long long>(w) * L.sw - L.pw + fx;
                    if (ix < 0 || ix >= in_s.w) continue;
                    for (int ci = 0; ci < L.cin; ++ci) {
                      absrow = P::add_up(
                          absrow,
                          P::mul_up(scalar_abs<S>(filter_at(L, fx, fy, ci, d)),
                                    mag(x[flat_index(in_s, static_cast<int>(ix),
                                                     static_cast<int>(iy), ci)])));
                      ++terms;
                    }
                  }
                }
                dv[flat_index(out_s, w, h, d)] =
                    2.0 * static_cast<S>(terms + 1) * P::ulp_above(absrow);
              }
          break;
        }
        case LayerKind::Join: {
          const std::vector<Interval<P>>& a = state.bounds[L.preds[0]];
          const std::vector<Interval<P>>& b = state.bounds[L.preds[1]];
          dv.assign(a.size(), S(0));
          for (size_t j = 0; j < a.size(); ++j)
            dv[j] = 2.0 * P::ulp_above(P::add_up(mag(a[j]), mag(b[j])));
          break;
        }
        case LayerKind::Relu:  // exact elementwise max
        case LayerKind::Input:
          dv.clear();
          break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Analysis orchestration

struct AnalysisOptions {
  bool early_term = true;
  long long chunk_rows = 0;          // 0: derive from memory_budget
  long long memory_budget = 1ll << 30;
  int workers = 1;
};

template <class P>
struct AnalysisResult {
  AnalysisState<P> state;
  PassStats stats;
};

inline PassOptions pass_options(const AnalysisOptions& opt) {
  PassOptions p;
  p.early_term = opt.early_term;
  p.chunk_rows = opt.chunk_rows;
  p.memory_budget = opt.memory_budget;
  p.workers = opt.workers;
  return p;
}

// Layers whose output feeds a relu, in ascending (topological) order.
template <class P>
std::vector<char> relu_input_flags(const Network<P>& net) {
  std::vector<char> flags(net.layers.size(), 0);
  for (const Layer<P>& L : net.layers)
    if (L.kind == LayerKind::Relu) flags[L.preds[0]] = 1;
  return flags;
}

// Full analysis: forward interval pass, then one refinement pass per layer
// feeding a relu (ascending), each followed by a refresh of everything
// downstream, and finally a pass over the output layer.
template <class P>
AnalysisResult<P> analyze(const Network<P>& net, const InputBox<P>& box,
                          const AnalysisOptions& opt) {
  AnalysisResult<P> res;
  AnalysisState<P>& state = res.state;
  state.bounds = forward_interval(net, box);
  state.raw = forward_interval<P, false>(net, box);
  state.relax.resize(net.layers.size());
  state.dev.resize(net.layers.size());

  const std::vector<char> feeds_relu = relu_input_flags(net);
  for (size_t k = 0; k < net.layers.size(); ++k)
    if (feeds_relu[k]) {
      state.relax[k].resize(state.bounds[k].size());
      for (size_t j = 0; j < state.bounds[k].size(); ++j)
        state.relax[k][j] = relu_relaxation(state.bounds[k][j]);
    }
  recompute_dev(net, state, 1);

  const PassOptions popt = pass_options(opt);
  const int out = net.output_layer();

  std::vector<int> targets;
  for (size_t k = 1; k < net.layers.size(); ++k)
    if (feeds_relu[k] && static_cast<int>(k) != out) targets.push_back(static_cast<int>(k));
  targets.push_back(out);

  for (int t : targets) {
    const bool is_output = t == out;
    run_backsubstitution(net, state, t, /*allow_freeze=*/!is_output, popt, res.stats);
    if (is_output) continue;
    if (feeds_relu[t])
      for (size_t j = 0; j < state.bounds[t].size(); ++j)
        state.relax[t][j] = relu_relaxation(state.bounds[t][j]);
    for (size_t k = static_cast<size_t>(t) + 1; k < net.layers.size(); ++k) {
      compute_layer_bounds(net, k, state.bounds);
      compute_layer_bounds<P, false>(net, k, state.raw);
      if (feeds_relu[k])
        for (size_t j = 0; j < state.bounds[k].size(); ++j)
          state.relax[k][j] = relu_relaxation(state.bounds[k][j]);
    }
    recompute_dev(net, state, t + 1);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Robustness verification

template <class P>
struct Verdict {
  bool verified = false;
  int label = 0;
  // (class j, certified lower bound of out_label - out_j), ascending j.
  std::vector<std::pair<int, typename P::Scalar>> margins;
  PassStats stats;
};

template <class P>
Verdict<P> verify_robustness(const Network<P>& net, const InputBox<P>& box, int label,
                             const AnalysisOptions& opt) {
  using S = typename P::Scalar;
  AnalysisResult<P> ar = analyze(net, box, opt);
  const PassOptions popt = pass_options(opt);
  const std::vector<S> lows = run_margin_pass(net, ar.state, label, popt, ar.stats);

  Verdict<P> v;
  v.label = label;
  v.stats = ar.stats;
  v.verified = true;
  int r = 0;
  for (int j = 0; j < net.output_size(); ++j) {
    if (j == label) continue;
    v.margins.emplace_back(j, lows[r]);
    if (!(lows[r] > S(0))) v.verified = false;
    ++r;
  }
  return v;
}

}  // namespace polycert
