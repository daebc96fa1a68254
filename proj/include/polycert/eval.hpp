// eval.hpp — concrete forward evaluation and forward interval propagation.
//
// Widened-mode interval bounds carry a reorder allowance: concrete inference
// may sum products in any order under any rounding mode, so every affine
// bound is padded by 2*(t+1) units in the last place of an upper bound on
// the sum of term magnitudes (t = number of addends).  Exact mode needs no
// padding.
//
// Propagation is also available unpadded (Pad = false): same directed
// rounding, no reorder allowance.  These "raw" bounds describe the engine's
// own fixed-order arithmetic rather than any reordered deployment of the
// network; the backsubstitution freeze test reads them so that both scalar
// modes — which agree exactly wherever the arithmetic is exact — make the
// same freeze decisions.  In exact mode the two variants coincide.

#pragma once

#include <algorithm>
#include <cassert>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <vector>

#include "polycert/interval.hpp"
#include "polycert/network.hpp"

namespace polycert {

template <class P>
using Activations = std::vector<std::vector<typename P::Scalar>>;

template <class P>
using LayerBounds = std::vector<std::vector<Interval<P>>>;

// ---------------------------------------------------------------------------
// Concrete evaluation (reference order: bias first, then ascending inputs)

template <class P>
Activations<P> forward_eval(const Network<P>& net, const std::vector<typename P::Scalar>& input) {
  using S = typename P::Scalar;
  if (static_cast<int>(input.size()) != net.input_shape.numel())
    throw std::invalid_argument("forward_eval: input size mismatch");
  Activations<P> act(net.layers.size());
  act[0] = input;
  for (size_t k = 1; k < net.layers.size(); ++k) {
    const Layer<P>& L = net.layers[k];
    const std::vector<S>& x = act[L.preds[0]];
    std::vector<S>& y = act[k];
    switch (L.kind) {
      case LayerKind::Dense: {
        const int n_out = L.out_shape.numel();
        const int n_in = L.in_shape.numel();
        y.resize(n_out);
        for (int j = 0; j < n_out; ++j) {
          S acc = L.bias[j];
          const S* w = &L.weights[static_cast<size_t>(j) * n_in];
          for (int t = 0; t < n_in; ++t) acc += w[t] * x[t];
          y[j] = acc;
        }
        break;
      }
      case LayerKind::Conv: {
        const Shape& in_s = L.in_shape;
        const Shape& out_s = L.out_shape;
        y.resize(out_s.numel());
        for (int h = 0; h < out_s.h; ++h)
          for (int w = 0; w < out_s.w; ++w)
            for (int d = 0; d < out_s.c; ++d) {
              S acc = L.bias[d];
              for (int fy = 0; fy < L.fh; ++fy) {
                const long long iy = static_cast<long long>(h) * L.sh - L.ph + fy;
                if (iy < 0 || iy >= in_s.h) continue;
                for (int fx = 0; fx < L.fw; ++fx) {
                  const long long ix = static_cast<long long>(w) * L.sw - L.pw + fx;
                  if (ix < 0 || ix >= in_s.w) continue;
                  for (int ci = 0; ci < L.cin; ++ci)
                    acc += filter_at(L, fx, fy, ci, d) *
                           x[flat_index(in_s, static_cast<int>(ix), static_cast<int>(iy), ci)];
                }
              }
              y[flat_index(out_s, w, h, d)] = acc;
            }
        break;
      }
      case LayerKind::Relu: {
        y.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
        break;
      }
      case LayerKind::Join: {
        const std::vector<S>& b = act[L.preds[1]];
        y.resize(x.size());
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + b[i];
        break;
      }
      case LayerKind::Input:
        throw std::logic_error("forward_eval: input layer after layer 0");
    }
  }
  return act;
}

// ---------------------------------------------------------------------------
// Interval propagation

// Sound bound of  bias + sum_i ws[i] * xs[i]  over interval inputs, padded in
// widened mode (Pad) so it also contains any-order concrete evaluation.
template <class P, bool Pad = true>
Interval<P> affine_bound(std::span<const Interval<P>> xs,
                         std::span<const typename P::Scalar> ws,
                         const typename P::Scalar& bias) {
  using S = typename P::Scalar;
  assert(xs.size() == ws.size());
  if constexpr (P::exact) {
    S lo = bias, hi = bias;
    for (size_t i = 0; i < xs.size(); ++i) {
      const S& w = ws[i];
      if (w == S(0)) continue;
      if (w > S(0)) {
        lo += w * xs[i].lo;
        hi += w * xs[i].hi;
      } else {
        lo += w * xs[i].hi;
        hi += w * xs[i].lo;
      }
    }
    return Interval<P>(lo, hi);
  } else {
    S lo = bias, hi = bias;
    [[maybe_unused]] S abs_hi = scalar_abs<S>(bias);
    [[maybe_unused]] long long terms = 1;
    for (size_t i = 0; i < xs.size(); ++i) {
      const S w = ws[i];
      if (w == S(0)) continue;
      if constexpr (Pad) {
        ++terms;
        const S mag = std::max(scalar_abs<S>(xs[i].lo), scalar_abs<S>(xs[i].hi));
        abs_hi = P::add_up(abs_hi, P::mul_up(scalar_abs<S>(w), mag));
      }
      if (w > S(0)) {
        lo = P::add_down(lo, P::mul_down(w, xs[i].lo));
        hi = P::add_up(hi, P::mul_up(w, xs[i].hi));
      } else {
        lo = P::add_down(lo, P::mul_down(w, xs[i].hi));
        hi = P::add_up(hi, P::mul_up(w, xs[i].lo));
      }
    }
    if constexpr (Pad) {
      const S slack = 2.0 * static_cast<S>(terms + 1) * P::ulp_above(abs_hi);
      return Interval<P>(P::add_down(lo, -slack), P::add_up(hi, slack));
    } else {
      return Interval<P>(lo, hi);
    }
  }
}

// Recompute bounds[k] from the (already computed) bounds of its
// predecessors.  This is both a building block of forward_interval and the
// refresh step after a refinement pass tightens an earlier layer.
template <class P, bool Pad = true>
void compute_layer_bounds(const Network<P>& net, size_t k, LayerBounds<P>& bounds) {
  using S = typename P::Scalar;
  const Layer<P>& L = net.layers[k];
  const std::vector<Interval<P>>& x = bounds[L.preds[0]];
  std::vector<Interval<P>>& y = bounds[k];
  switch (L.kind) {
    case LayerKind::Dense: {
      const int n_out = L.out_shape.numel();
      const int n_in = L.in_shape.numel();
      y.assign(n_out, Interval<P>());
      for (int j = 0; j < n_out; ++j)
        y[j] = affine_bound<P, Pad>(std::span<const Interval<P>>(x.data(), n_in),
                                    std::span<const S>(
                                        &L.weights[static_cast<size_t>(j) * n_in],
                                        static_cast<size_t>(n_in)),
                                    L.bias[j]);
      break;
    }
    case LayerKind::Conv: {
      const Shape& in_s = L.in_shape;
      const Shape& out_s = L.out_shape;
      y.assign(out_s.numel(), Interval<P>());
      std::vector<Interval<P>> cs;
      std::vector<S> ws;
      for (int h = 0; h < out_s.h; ++h)
        for (int w = 0; w < out_s.w; ++w)
          for (int d = 0; d < out_s.c; ++d) {
            cs.clear();
            ws.clear();
            for (int fy = 0; fy < L.fh; ++fy) {
              const long long iy = static_cast<long long>(h) * L.sh - L.ph + fy;
              if (iy < 0 || iy >= in_s.h) continue;
              for (int fx = 0; fx < L.fw; ++fx) {
                const long long ix = static_cast<long long>(w) * L.sw - L.pw + fx;
                if (ix < 0 || ix >= in_s.w) continue;
                for (int ci = 0; ci < L.cin; ++ci) {
                  cs.push_back(x[flat_index(in_s, static_cast<int>(ix),
                                            static_cast<int>(iy), ci)]);
                  ws.push_back(filter_at(L, fx, fy, ci, d));
                }
              }
            }
            y[flat_index(out_s, w, h, d)] =
                affine_bound<P, Pad>(std::span<const Interval<P>>(cs),
                                     std::span<const S>(ws), L.bias[d]);
          }
      break;
    }
    case LayerKind::Relu: {
      y.assign(x.size(), Interval<P>());
      for (size_t i = 0; i < x.size(); ++i) {
        const S lo = x[i].lo > S(0) ? x[i].lo : S(0);
        const S hi = x[i].hi > S(0) ? x[i].hi : S(0);
        y[i] = Interval<P>(lo, hi);
      }
      break;
    }
    case LayerKind::Join: {
      const std::vector<Interval<P>>& b = bounds[L.preds[1]];
      y.assign(x.size(), Interval<P>());
      for (size_t i = 0; i < x.size(); ++i) y[i] = iv_add(x[i], b[i]);
      break;
    }
    case LayerKind::Input:
      throw std::logic_error("compute_layer_bounds: input layer after layer 0");
  }
}

template <class P, bool Pad = true>
LayerBounds<P> forward_interval(const Network<P>& net, const InputBox<P>& box) {
  LayerBounds<P> bounds(net.layers.size());
  bounds[0] = box.pixels;
  for (size_t k = 1; k < net.layers.size(); ++k)
    compute_layer_bounds<P, Pad>(net, k, bounds);
  return bounds;
}

}  // namespace polycert
