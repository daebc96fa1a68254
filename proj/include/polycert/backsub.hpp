// backsub.hpp — the backsubstitution engine.
//
// A refinement pass for a query layer carries, per query neuron, a symbolic
// affine expression over some earlier layer's cells ("the frame"), with
// interval coefficients and an interval constant.  The expression is pushed
// backward one layer at a time:
//
//   * dense layers substitute the full weight matrix,
//   * convolutions substitute filter taps directly on the sliding-window
//     geometry (the frame stays a small cuboid instead of a dense row),
//   * relus substitute the per-neuron linear relaxation, split by
//     coefficient sign,
//   * residual joins fork the expression down both branches and re-align the
//     two cuboids at the branch head by absolute coordinates.
//
// After every affine substitution the expression is concretized against the
// stored bounds of the current frame layer, yielding a candidate bound; the
// final bound for a row is the best candidate seen (seeded with the row's
// previously stored bound).  A row freezes once its running bound proves the
// neuron sign-stable (lo >= 0 or hi <= 0): later candidates are ignored for
// that row no matter what.  The freeze test reads a parallel "raw" candidate
// track — same directed rounding, none of the any-order inference allowances
// — so both scalar modes, whose raw values agree exactly wherever the
// arithmetic is exact, freeze the same rows at the same step; reported
// bounds always come from the padded track.  With early termination enabled
// frozen rows are also physically removed from the matrices, which is where
// the speed comes from; disabling it only spends more work computing
// candidates that the freeze rule then discards, so both settings produce
// identical bounds.
//
// Rows are mutually independent, so passes run in fixed-size row chunks
// (bounding peak memory) and each chunk's per-row loops are parallelized.
// All accumulation orders are fixed, making results bit-identical across
// chunk sizes and worker counts.

#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "polycert/depsets.hpp"
#include "polycert/eval.hpp"
#include "polycert/interval.hpp"
#include "polycert/network.hpp"
#include "polycert/threadpool.hpp"

namespace polycert {

enum class Polarity { Lower, Upper };

// Per-neuron relu relaxation: relu(x) <= gamma*x + delta and
// relu(x) >= alpha*x + beta over the neuron's bound interval.  Stored as
// intervals so inexact slopes carry their own rounding envelope.
template <class P>
struct NeuronRelax {
  Interval<P> alpha, beta, gamma, delta;
};

// Shared mutable state of an analysis: per-layer concrete bounds (plus their
// unpadded raw twin), per-layer relaxations (populated only for layers
// feeding a relu), and — in widened mode — a per-layer inference-deviation
// allowance absorbed into row constants so certificates cover any evaluation
// order of the concrete network (empty in exact mode).
template <class P>
struct AnalysisState {
  LayerBounds<P> bounds;
  // Unpadded twin of `bounds`: directed rounding only, no any-order
  // allowances.  Read exclusively by the freeze test (when empty, `bounds`
  // stands in); identical to `bounds` in exact mode.
  LayerBounds<P> raw;
  std::vector<std::vector<NeuronRelax<P>>> relax;
  std::vector<std::vector<typename P::Scalar>> dev;
};

// ---------------------------------------------------------------------------
// Frames and bound matrices

// Where a matrix's coefficients currently live.  Dense frames cover the whole
// flattened layer; cuboid frames cover a width_w x width_h window of the
// layer's grid (all channels), anchored per row at `origins` (absolute grid
// coordinates, possibly negative or past the edge — cells outside the grid
// are dead and stay zero).
struct Frame {
  int layer = 0;
  bool dense = true;
  int width_w = 0;
  int width_h = 0;
  std::vector<std::array<long long, 2>> origins;  // per row {ow, oh}; cuboid only
};

template <class P>
struct BoundMatrix {
  Polarity polarity = Polarity::Upper;
  int query_layer = 0;
  Frame frame;
  int row_cells = 0;                  // stride of `coeff`
  std::vector<Interval<P>> coeff;     // rows() * row_cells
  std::vector<Interval<P>> constant;  // rows()
  // `constant` minus the inference-deviation widenings: the freeze-test
  // (raw) constant column.  Identical to `constant` in exact mode.
  std::vector<Interval<P>> constant_raw;  // rows()
  std::vector<int> row_index;         // row -> query-neuron flat index

  int rows() const { return static_cast<int>(constant.size()); }
};

// Number of coefficient cells per row for a frame over `s`.
inline int frame_cells(const Frame& f, const Shape& s) {
  return f.dense ? s.numel() : f.width_w * f.width_h * s.c;
}

struct PassStats {
  long long rows_total = 0;
  long long rows_terminated_early = 0;
  long long gbc_madds = 0;         // multiply-adds actually executed in conv steps
  long long gbc_dense_equiv = 0;   // what dense materialization of the same steps would cost
  long long dense_madds = 0;       // multiply-adds executed in dense steps
  long long checkpoints = 0;

  PassStats& operator+=(const PassStats& o) {
    rows_total += o.rows_total;
    rows_terminated_early += o.rows_terminated_early;
    gbc_madds += o.gbc_madds;
    gbc_dense_equiv += o.gbc_dense_equiv;
    dense_madds += o.dense_madds;
    checkpoints += o.checkpoints;
    return *this;
  }
};

struct PassOptions {
  bool early_term = true;
  long long chunk_rows = 0;  // 0: derive from memory_budget
  long long memory_budget = 1ll << 30;
  int workers = 1;
};

// ---------------------------------------------------------------------------
// Small interval helpers local to the engine

namespace detail {

// Upper / lower endpoint of the product of two intervals (max / min corner).
template <class P>
typename P::Scalar corner_hi(const Interval<P>& a, const Interval<P>& b) {
  using S = typename P::Scalar;
  auto pr = [](const S& x, const S& y) { return P::mul_up(x, y); };
  S v = pr(a.lo, b.lo);
  v = std::max(v, pr(a.lo, b.hi));
  v = std::max(v, pr(a.hi, b.lo));
  v = std::max(v, pr(a.hi, b.hi));
  return v;
}

template <class P>
typename P::Scalar corner_lo(const Interval<P>& a, const Interval<P>& b) {
  using S = typename P::Scalar;
  auto pr = [](const S& x, const S& y) { return P::mul_down(x, y); };
  S v = pr(a.lo, b.lo);
  v = std::min(v, pr(a.lo, b.hi));
  v = std::min(v, pr(a.hi, b.lo));
  v = std::min(v, pr(a.hi, b.hi));
  return v;
}

// In widened mode, grow an interval constant by +/- dev (an up-rounded
// magnitude); exact mode never calls this with dev != 0.
template <class P>
void widen_constant(Interval<P>& k, const typename P::Scalar& dev) {
  if (dev == typename P::Scalar(0)) return;
  k = Interval<P>(P::add_down(k.lo, -dev), P::add_up(k.hi, dev));
}

// dev accumulator: sum of |coeff| * dev_j, rounded upward.
template <class P>
struct DevAccum {
  using S = typename P::Scalar;
  S total = S(0);
  bool active = false;
  void add(const Interval<P>& c, const S& dev_j) {
    if (!active) return;
    if (dev_j == S(0)) return;
    const S mag = std::max(scalar_abs<typename P::Scalar>(c.lo),
                           scalar_abs<typename P::Scalar>(c.hi));
    total = P::add_up(total, P::mul_up(mag, dev_j));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix initialization

// Exact affine rows for a dense or conv query layer: the row is the neuron's
// own expression over its predecessor (weights / filter taps), so the first
// frame already sits one layer back.  In widened mode the constant absorbs
// the query layer's inference-deviation allowance.
template <class P>
BoundMatrix<P> init_affine_rows(const Network<P>& net, const AnalysisState<P>& state,
                                int layer, std::span<const int> rows_sel, Polarity pol) {
  const Layer<P>& L = net.layers[layer];
  assert(L.kind == LayerKind::Dense || L.kind == LayerKind::Conv);
  const int pred = L.preds[0];
  const Shape& in_s = L.in_shape;
  const Shape& out_s = L.out_shape;
  const bool have_dev = !state.dev.empty() && !state.dev[layer].empty();

  BoundMatrix<P> m;
  m.polarity = pol;
  m.query_layer = layer;
  m.row_index.assign(rows_sel.begin(), rows_sel.end());
  m.frame.layer = pred;
  const int n_rows = static_cast<int>(rows_sel.size());

  if (L.kind == LayerKind::Dense) {
    m.frame.dense = true;
    m.row_cells = in_s.numel();
    m.coeff.assign(static_cast<size_t>(n_rows) * m.row_cells, Interval<P>());
    m.constant.reserve(n_rows);
    m.constant_raw.reserve(n_rows);
    const int n_in = in_s.numel();
    for (int r = 0; r < n_rows; ++r) {
      const int q = rows_sel[r];
      for (int t = 0; t < n_in; ++t)
        m.coeff[static_cast<size_t>(r) * m.row_cells + t] =
            Interval<P>::point(L.weights[static_cast<size_t>(q) * n_in + t]);
      Interval<P> k = Interval<P>::point(L.bias[q]);
      m.constant_raw.push_back(k);
      if (have_dev) detail::widen_constant(k, state.dev[layer][q]);
      m.constant.push_back(k);
    }
  } else {
    m.frame.dense = false;
    m.frame.width_w = L.fw;
    m.frame.width_h = L.fh;
    m.frame.origins.resize(n_rows);
    m.row_cells = L.fw * L.fh * in_s.c;
    m.coeff.assign(static_cast<size_t>(n_rows) * m.row_cells, Interval<P>());
    m.constant.reserve(n_rows);
    m.constant_raw.reserve(n_rows);
    for (int r = 0; r < n_rows; ++r) {
      const int q = rows_sel[r];
      const int c = q % out_s.c;
      const int w = (q / out_s.c) % out_s.w;
      const int h = q / (out_s.c * out_s.w);
      m.frame.origins[r] = {static_cast<long long>(w) * L.sw - L.pw,
                            static_cast<long long>(h) * L.sh - L.ph};
      Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      for (int fy = 0; fy < L.fh; ++fy)
        for (int fx = 0; fx < L.fw; ++fx)
          for (int ci = 0; ci < L.cin; ++ci)
            row[(fy * L.fw + fx) * in_s.c + ci] =
                Interval<P>::point(filter_at(L, fx, fy, ci, c));
      Interval<P> k = Interval<P>::point(L.bias[c]);
      m.constant_raw.push_back(k);
      if (have_dev) detail::widen_constant(k, state.dev[layer][q]);
      m.constant.push_back(k);
    }
  }
  return m;
}

// Identity rows over the query layer itself, for targets whose own layer is
// not affine (residual joins, relus).  The walk then consumes the layer as
// its first step.
template <class P>
BoundMatrix<P> init_identity_rows(const Network<P>& net, int layer,
                                  std::span<const int> rows_sel, Polarity pol) {
  const Shape& s = net.layers[layer].out_shape;
  BoundMatrix<P> m;
  m.polarity = pol;
  m.query_layer = layer;
  m.row_index.assign(rows_sel.begin(), rows_sel.end());
  m.frame.layer = layer;
  const int n_rows = static_cast<int>(rows_sel.size());
  if (s.w == 1 && s.h == 1) {
    m.frame.dense = true;
    m.row_cells = s.numel();
    m.coeff.assign(static_cast<size_t>(n_rows) * m.row_cells, Interval<P>());
    for (int r = 0; r < n_rows; ++r)
      m.coeff[static_cast<size_t>(r) * m.row_cells + rows_sel[r]] =
          Interval<P>::point(typename P::Scalar(1));
  } else {
    m.frame.dense = false;
    m.frame.width_w = 1;
    m.frame.width_h = 1;
    m.frame.origins.resize(n_rows);
    m.row_cells = s.c;
    m.coeff.assign(static_cast<size_t>(n_rows) * m.row_cells, Interval<P>());
    for (int r = 0; r < n_rows; ++r) {
      const int q = rows_sel[r];
      const int c = q % s.c;
      const int w = (q / s.c) % s.w;
      const int h = q / (s.c * s.w);
      m.frame.origins[r] = {w, h};
      m.coeff[static_cast<size_t>(r) * m.row_cells + c] =
          Interval<P>::point(typename P::Scalar(1));
    }
  }
  m.constant.assign(n_rows, Interval<P>());
  m.constant_raw.assign(n_rows, Interval<P>());
  return m;
}

// Virtual margin rows out_label - out_j over the output layer, one per
// class j != label, in ascending class order.
template <class P>
BoundMatrix<P> init_margin_rows(const Network<P>& net, int label, Polarity pol) {
  const int out = net.output_layer();
  const int n = net.output_size();
  if (label < 0 || label >= n) throw std::invalid_argument("margin: label out of range");
  BoundMatrix<P> m;
  m.polarity = pol;
  m.query_layer = out;
  m.frame.layer = out;
  m.frame.dense = true;
  m.row_cells = n;
  for (int j = 0; j < n; ++j) {
    if (j == label) continue;
    m.row_index.push_back(j);
    const size_t base = m.coeff.size();
    m.coeff.resize(base + n, Interval<P>());
    m.coeff[base + label] = Interval<P>::point(typename P::Scalar(1));
    m.coeff[base + j] = Interval<P>::point(typename P::Scalar(-1));
    m.constant.push_back(Interval<P>());
    m.constant_raw.push_back(Interval<P>());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Steps

// Substitute a dense layer: frame moves from the layer's output to its
// predecessor, always landing dense.
template <class P>
void dense_step(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>& m,
                PassStats& stats, int workers) {
  const Layer<P>& L = net.layers[m.frame.layer];
  assert(L.kind == LayerKind::Dense);
  const Shape& out_s = L.out_shape;
  const Shape& in_s = L.in_shape;
  const int n_in = in_s.numel();
  const int n_rows = m.rows();
  const bool have_dev = !state.dev.empty() && !state.dev[m.frame.layer].empty();

  std::vector<Interval<P>> ncoeff(static_cast<size_t>(n_rows) * n_in, Interval<P>());
  std::vector<long long> madds(std::max(1, workers), 0);

  parallel_for(n_rows, workers, [&](int widx, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      const Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      Interval<P>* nrow = &ncoeff[static_cast<size_t>(r) * n_in];
      Interval<P>& k = m.constant[r];
      Interval<P>& kraw = m.constant_raw[r];
      detail::DevAccum<P> dev;
      dev.active = have_dev;
      for (int cell = 0; cell < m.row_cells; ++cell) {
        const Interval<P>& c = row[cell];
        if (c.is_zero()) continue;
        int j;
        if (m.frame.dense) {
          j = cell;
        } else {
          const int cc = cell % out_s.c;
          const int cw = (cell / out_s.c) % m.frame.width_w;
          const int ch = cell / (out_s.c * m.frame.width_w);
          const long long aw = m.frame.origins[r][0] + cw;
          const long long ah = m.frame.origins[r][1] + ch;
          if (aw < 0 || aw >= out_s.w || ah < 0 || ah >= out_s.h) continue;
          j = flat_index(out_s, static_cast<int>(aw), static_cast<int>(ah), cc);
        }
        const Interval<P> bterm = iv_mul_scalar(c, L.bias[j]);
        iv_acc(k, bterm);
        iv_acc(kraw, bterm);
        if (have_dev) dev.add(c, state.dev[m.frame.layer][j]);
        const typename P::Scalar* wrow = &L.weights[static_cast<size_t>(j) * n_in];
        for (int t = 0; t < n_in; ++t) iv_acc(nrow[t], iv_mul_scalar(c, wrow[t]));
        madds[widx] += n_in;
      }
      if (have_dev) detail::widen_constant(k, dev.total);
    }
  });

  for (long long v : madds) stats.dense_madds += v;
  m.coeff = std::move(ncoeff);
  m.row_cells = n_in;
  m.frame.layer = L.preds[0];
  m.frame.dense = true;
  m.frame.width_w = m.frame.width_h = 0;
  m.frame.origins.clear();
}

// Substitute a convolution backward without materializing it: every in-frame
// output cell scatters its coefficient through the filter taps into the
// receptive-field cuboid one stride step back.  A dense frame stays dense; a
// cuboid frame grows by the window-growth recurrence and its origins step by
// the origin recurrence.  Loop order is fixed: frame cell (h, then w), output
// channel, filter row, filter column, input channel.
template <class P>
void gbc_step(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>& m,
              PassStats& stats, int workers) {
  const Layer<P>& L = net.layers[m.frame.layer];
  assert(L.kind == LayerKind::Conv);
  const Shape& out_s = L.out_shape;
  const Shape& in_s = L.in_shape;
  const int n_rows = m.rows();
  const bool have_dev = !state.dev.empty() && !state.dev[m.frame.layer].empty();

  Frame nf;
  nf.layer = L.preds[0];
  nf.dense = m.frame.dense;
  int n_cells;
  if (nf.dense) {
    n_cells = in_s.numel();
  } else {
    nf.width_w = grow_width(m.frame.width_w, L.fw, L.sw);
    nf.width_h = grow_width(m.frame.width_h, L.fh, L.sh);
    nf.origins.resize(n_rows);
    n_cells = nf.width_w * nf.width_h * in_s.c;
  }

  std::vector<Interval<P>> ncoeff(static_cast<size_t>(n_rows) * n_cells, Interval<P>());
  std::vector<long long> madds(std::max(1, workers), 0);

  parallel_for(n_rows, workers, [&](int widx, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      const Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      Interval<P>* nrow = &ncoeff[static_cast<size_t>(r) * n_cells];
      Interval<P>& k = m.constant[r];
      Interval<P>& kraw = m.constant_raw[r];
      detail::DevAccum<P> dev;
      dev.active = have_dev;
      long long ow = 0, oh = 0;  // this row's cuboid origin
      if (!m.frame.dense) {
        ow = m.frame.origins[r][0];
        oh = m.frame.origins[r][1];
        nf.origins[r] = {step_origin(ow, L.sw, L.pw), step_origin(oh, L.sh, L.ph)};
      }
      const int cw_n = m.frame.dense ? out_s.w : m.frame.width_w;
      const int ch_n = m.frame.dense ? out_s.h : m.frame.width_h;
      for (int ch = 0; ch < ch_n; ++ch) {
        for (int cw = 0; cw < cw_n; ++cw) {
          const long long aw = m.frame.dense ? cw : ow + cw;
          const long long ah = m.frame.dense ? ch : oh + ch;
          if (aw < 0 || aw >= out_s.w || ah < 0 || ah >= out_s.h) continue;
          for (int d = 0; d < out_s.c; ++d) {
            const Interval<P>& c =
                row[m.frame.dense
                        ? flat_index(out_s, static_cast<int>(aw), static_cast<int>(ah), d)
                        : (ch * m.frame.width_w + cw) * out_s.c + d];
            if (c.is_zero()) continue;
            const Interval<P> bterm = iv_mul_scalar(c, L.bias[d]);
            iv_acc(k, bterm);
            iv_acc(kraw, bterm);
            if (have_dev)
              dev.add(c, state.dev[m.frame.layer][flat_index(
                             out_s, static_cast<int>(aw), static_cast<int>(ah), d)]);
            for (int fy = 0; fy < L.fh; ++fy) {
              const long long iy = ah * L.sh - L.ph + fy;
              if (iy < 0 || iy >= in_s.h) continue;
              for (int fx = 0; fx < L.fw; ++fx) {
                const long long ix = aw * L.sw - L.pw + fx;
                if (ix < 0 || ix >= in_s.w) continue;
                size_t tbase;
                if (nf.dense) {
                  tbase = static_cast<size_t>(
                      flat_index(in_s, static_cast<int>(ix), static_cast<int>(iy), 0));
                } else {
                  const long long a = static_cast<long long>(cw) * L.sw + fx;
                  const long long b = static_cast<long long>(ch) * L.sh + fy;
                  tbase = static_cast<size_t>((b * nf.width_w + a) * in_s.c);
                }
                for (int ci = 0; ci < L.cin; ++ci)
                  iv_acc(nrow[tbase + ci], iv_mul_scalar(c, filter_at(L, fx, fy, ci, d)));
                madds[widx] += L.cin;
              }
            }
          }
        }
      }
      if (have_dev) detail::widen_constant(k, dev.total);
    }
  });

  for (long long v : madds) stats.gbc_madds += v;
  stats.gbc_dense_equiv +=
      static_cast<long long>(n_rows) * out_s.numel() * in_s.numel();
  m.coeff = std::move(ncoeff);
  m.row_cells = n_cells;
  m.frame = std::move(nf);
}

// Substitute a relu layer: coefficients are rewritten in place against the
// predecessor's relaxation, split by sign so interval coefficients straddling
// zero stay sound.  Frame geometry is unchanged (relu is elementwise).
template <class P>
void relu_step(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>& m,
               int workers) {
  const Layer<P>& L = net.layers[m.frame.layer];
  assert(L.kind == LayerKind::Relu);
  const int pred = L.preds[0];
  const Shape& s = L.out_shape;  // == in_shape
  assert(!state.relax[pred].empty());
  const std::vector<NeuronRelax<P>>& relax = state.relax[pred];
  const bool upper = m.polarity == Polarity::Upper;
  const int n_rows = m.rows();

  parallel_for(n_rows, workers, [&](int, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      Interval<P>& k = m.constant[r];
      Interval<P>& kraw = m.constant_raw[r];
      for (int cell = 0; cell < m.row_cells; ++cell) {
        Interval<P>& c = row[cell];
        if (c.is_zero()) continue;
        int j;
        if (m.frame.dense) {
          j = cell;
        } else {
          const int cc = cell % s.c;
          const int cw = (cell / s.c) % m.frame.width_w;
          const int chh = cell / (s.c * m.frame.width_w);
          const long long aw = m.frame.origins[r][0] + cw;
          const long long ah = m.frame.origins[r][1] + chh;
          if (aw < 0 || aw >= s.w || ah < 0 || ah >= s.h) continue;
          j = flat_index(s, static_cast<int>(aw), static_cast<int>(ah), cc);
        }
        const NeuronRelax<P>& R = relax[j];
        // Upper rows bound from above: positive coefficients take the upper
        // relaxation line, negative ones the lower line.  Lower rows mirror.
        const Interval<P>& slope_pos = upper ? R.gamma : R.alpha;
        const Interval<P>& off_pos = upper ? R.delta : R.beta;
        const Interval<P>& slope_neg = upper ? R.alpha : R.gamma;
        const Interval<P>& off_neg = upper ? R.beta : R.delta;
        if (!(c.lo < typename P::Scalar(0))) {
          const Interval<P> off = iv_mul(c, off_pos);
          iv_acc(k, off);
          iv_acc(kraw, off);
          c = iv_mul(c, slope_pos);
        } else if (!(c.hi > typename P::Scalar(0))) {
          const Interval<P> off = iv_mul(c, off_neg);
          iv_acc(k, off);
          iv_acc(kraw, off);
          c = iv_mul(c, slope_neg);
        } else {
          const Interval<P> pos = iv_pos_part(c);
          const Interval<P> neg = iv_neg_part(c);
          const Interval<P> offp = iv_mul(pos, off_pos);
          const Interval<P> offn = iv_mul(neg, off_neg);
          iv_acc(k, offp);
          iv_acc(kraw, offp);
          iv_acc(k, offn);
          iv_acc(kraw, offn);
          c = iv_add(iv_mul(pos, slope_pos), iv_mul(neg, slope_neg));
        }
      }
    }
  });
  m.frame.layer = pred;
}

// ---------------------------------------------------------------------------
// Residual joins: fork, walk both branches, re-align at the head

template <class P>
void walk_back(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>* up,
               BoundMatrix<P>* lo, int stop_layer, PassStats& stats, int workers,
               const std::function<void(bool)>& checkpoint);

// Expand a cuboid-frame matrix to a dense frame over the same layer.
template <class P>
void densify(const Network<P>& net, BoundMatrix<P>& m, int workers) {
  if (m.frame.dense) return;
  const Shape& s = net.layers[m.frame.layer].out_shape;
  const int n_rows = m.rows();
  const int n_cells = s.numel();
  std::vector<Interval<P>> ncoeff(static_cast<size_t>(n_rows) * n_cells, Interval<P>());
  parallel_for(n_rows, workers, [&](int, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      const Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      Interval<P>* nrow = &ncoeff[static_cast<size_t>(r) * n_cells];
      for (int cell = 0; cell < m.row_cells; ++cell) {
        const Interval<P>& c = row[cell];
        if (c.is_zero()) continue;
        const int cc = cell % s.c;
        const int cw = (cell / s.c) % m.frame.width_w;
        const int chh = cell / (s.c * m.frame.width_w);
        const long long aw = m.frame.origins[r][0] + cw;
        const long long ah = m.frame.origins[r][1] + chh;
        if (aw < 0 || aw >= s.w || ah < 0 || ah >= s.h) continue;
        nrow[flat_index(s, static_cast<int>(aw), static_cast<int>(ah), cc)] = c;
      }
    }
  });
  m.coeff = std::move(ncoeff);
  m.row_cells = n_cells;
  m.frame.dense = true;
  m.frame.width_w = m.frame.width_h = 0;
  m.frame.origins.clear();
}

// Add matrix `b` into matrix `a` (same layer, same rows), aligning cuboid
// frames by absolute coordinates over the union extent.  Residual branches
// have stride-equal geometry, so the per-row union extent is row-invariant.
template <class P>
void align_add(const Network<P>& net, BoundMatrix<P>& a, BoundMatrix<P>& b, int workers) {
  assert(a.frame.layer == b.frame.layer);
  assert(a.rows() == b.rows());
  const Shape& s = net.layers[a.frame.layer].out_shape;
  const int n_rows = a.rows();

  if (a.frame.dense || b.frame.dense) {
    densify(net, a, workers);
    densify(net, b, workers);
    parallel_for(n_rows, workers, [&](int, int rb, int re) {
      for (int r = rb; r < re; ++r) {
        Interval<P>* arow = &a.coeff[static_cast<size_t>(r) * a.row_cells];
        const Interval<P>* brow = &b.coeff[static_cast<size_t>(r) * b.row_cells];
        for (int cell = 0; cell < a.row_cells; ++cell) iv_acc(arow[cell], brow[cell]);
        iv_acc(a.constant[r], b.constant[r]);
        iv_acc(a.constant_raw[r], b.constant_raw[r]);
      }
    });
    return;
  }

  // Union cuboid geometry (validated row-invariant).
  Frame nf;
  nf.layer = a.frame.layer;
  nf.dense = false;
  nf.origins.resize(n_rows);
  long long dw = 0, dh = 0;  // union widths, fixed across rows
  for (int r = 0; r < n_rows; ++r) {
    const long long ow = std::min(a.frame.origins[r][0], b.frame.origins[r][0]);
    const long long oh = std::min(a.frame.origins[r][1], b.frame.origins[r][1]);
    const long long ew = std::max(a.frame.origins[r][0] + a.frame.width_w,
                                  b.frame.origins[r][0] + b.frame.width_w);
    const long long eh = std::max(a.frame.origins[r][1] + a.frame.width_h,
                                  b.frame.origins[r][1] + b.frame.width_h);
    nf.origins[r] = {ow, oh};
    if (r == 0) {
      dw = ew - ow;
      dh = eh - oh;
    } else if (dw != ew - ow || dh != eh - oh) {
      throw std::logic_error("join: branch frames are not stride-aligned");
    }
  }
  nf.width_w = static_cast<int>(dw);
  nf.width_h = static_cast<int>(dh);
  const int n_cells = nf.width_w * nf.width_h * s.c;

  std::vector<Interval<P>> ncoeff(static_cast<size_t>(n_rows) * n_cells, Interval<P>());
  parallel_for(n_rows, workers, [&](int, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      Interval<P>* nrow = &ncoeff[static_cast<size_t>(r) * n_cells];
      auto scatter = [&](const BoundMatrix<P>& src) {
        const Interval<P>* row = &src.coeff[static_cast<size_t>(r) * src.row_cells];
        for (int cell = 0; cell < src.row_cells; ++cell) {
          const Interval<P>& c = row[cell];
          if (c.is_zero()) continue;
          const int cc = cell % s.c;
          const int cw = (cell / s.c) % src.frame.width_w;
          const int chh = cell / (s.c * src.frame.width_w);
          const long long aw = src.frame.origins[r][0] + cw;
          const long long ah = src.frame.origins[r][1] + chh;
          const long long rw = aw - nf.origins[r][0];
          const long long rh = ah - nf.origins[r][1];
          iv_acc(nrow[(rh * nf.width_w + rw) * s.c + cc], c);
        }
      };
      scatter(a);
      scatter(b);
      iv_acc(a.constant[r], b.constant[r]);
      iv_acc(a.constant_raw[r], b.constant_raw[r]);
    }
  });
  a.coeff = std::move(ncoeff);
  a.row_cells = n_cells;
  a.frame = std::move(nf);
}

// Substitute a residual join: fork the expression down both branches (the
// first fork keeps the constant, the second starts from zero so nothing is
// double-counted), walk each branch to the join head with no intermediate
// concretization, then re-align and add.  The caller concretizes once after.
template <class P>
void join_step(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>& m,
               PassStats& stats, int workers) {
  const Layer<P>& L = net.layers[m.frame.layer];
  assert(L.kind == LayerKind::Join);
  const int head = L.join_head;

  BoundMatrix<P> mb = m;  // second branch: zero constants
  for (auto& k : mb.constant) k = Interval<P>();
  for (auto& k : mb.constant_raw) k = Interval<P>();
  m.frame.layer = L.preds[0];
  mb.frame.layer = L.preds[1];

  const std::function<void(bool)> no_checkpoint;
  walk_back<P>(net, state, m.polarity == Polarity::Upper ? &m : nullptr,
               m.polarity == Polarity::Upper ? nullptr : &m, head, stats, workers,
               no_checkpoint);
  walk_back<P>(net, state, mb.polarity == Polarity::Upper ? &mb : nullptr,
               mb.polarity == Polarity::Upper ? nullptr : &mb, head, stats, workers,
               no_checkpoint);
  align_add(net, m, mb, workers);
}

// ---------------------------------------------------------------------------
// Concretization

// One endpoint per row of  K + sum_j coeff_j * bounds[frame.layer][j],
// accumulated in ascending cell order against the given bounds of the frame
// layer.  Upper matrices produce upper endpoints, lower matrices lower ones.
// `raw` selects the freeze-test track: the raw constant column against raw
// frame bounds (the caller passes the matching container).
template <class P>
void concretize(const Network<P>& net, const LayerBounds<P>& frame_bounds,
                const BoundMatrix<P>& m, bool raw,
                std::vector<typename P::Scalar>& out, int workers) {
  using S = typename P::Scalar;
  const Shape& s = net.layers[m.frame.layer].out_shape;
  const std::vector<Interval<P>>& bounds = frame_bounds[m.frame.layer];
  const std::vector<Interval<P>>& kcol = raw ? m.constant_raw : m.constant;
  const bool upper = m.polarity == Polarity::Upper;
  const int n_rows = m.rows();
  out.assign(n_rows, S(0));

  parallel_for(n_rows, workers, [&](int, int rb, int re) {
    for (int r = rb; r < re; ++r) {
      const Interval<P>* row = &m.coeff[static_cast<size_t>(r) * m.row_cells];
      S acc = upper ? kcol[r].hi : kcol[r].lo;
      for (int cell = 0; cell < m.row_cells; ++cell) {
        const Interval<P>& c = row[cell];
        if (c.is_zero()) continue;
        int j;
        if (m.frame.dense) {
          j = cell;
        } else {
          const int cc = cell % s.c;
          const int cw = (cell / s.c) % m.frame.width_w;
          const int chh = cell / (s.c * m.frame.width_w);
          const long long aw = m.frame.origins[r][0] + cw;
          const long long ah = m.frame.origins[r][1] + chh;
          if (aw < 0 || aw >= s.w || ah < 0 || ah >= s.h) continue;
          j = flat_index(s, static_cast<int>(aw), static_cast<int>(ah), cc);
        }
        if (upper)
          acc = P::add_up(acc, detail::corner_hi(c, bounds[j]));
        else
          acc = P::add_down(acc, detail::corner_lo(c, bounds[j]));
      }
      out[r] = acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Candidates, freezing, compaction

// Per-query-neuron running best bounds.  Real-layer passes seed from the
// stored bounds; margin passes start empty.  A frozen neuron's bounds are
// final: the freeze rule ignores all later candidates for it.  Two tracks run
// side by side: the padded track feeds the reported bounds, the raw track —
// identical to it in exact mode — alone decides sign stability, so both
// scalar modes freeze the same rows.
template <class P>
struct CandidateSet {
  using S = typename P::Scalar;
  std::vector<S> lo, hi;
  std::vector<S> raw_lo, raw_hi;
  std::vector<char> has_lo, has_hi, frozen;

  explicit CandidateSet(int n)
      : lo(n, S(0)),
        hi(n, S(0)),
        raw_lo(n, S(0)),
        raw_hi(n, S(0)),
        has_lo(n, 0),
        has_hi(n, 0),
        frozen(n, 0) {}

  void seed(int q, const Interval<P>& b, const Interval<P>& rb) {
    lo[q] = b.lo;
    hi[q] = b.hi;
    raw_lo[q] = rb.lo;
    raw_hi[q] = rb.hi;
    has_lo[q] = has_hi[q] = 1;
  }
  void offer_lo(int q, const S& v, const S& rv) {
    if (frozen[q]) return;
    if (!has_lo[q] || v > lo[q]) {
      lo[q] = v;
      has_lo[q] = 1;
    }
    if (rv > raw_lo[q]) raw_lo[q] = rv;
  }
  void offer_hi(int q, const S& v, const S& rv) {
    if (frozen[q]) return;
    if (!has_hi[q] || v < hi[q]) {
      hi[q] = v;
      has_hi[q] = 1;
    }
    if (rv < raw_hi[q]) raw_hi[q] = rv;
  }
  bool stable(int q) const {
    if (!has_lo[q] || !has_hi[q]) return false;
    return !(raw_lo[q] < S(0)) || !(raw_hi[q] > S(0));
  }
};

// Remove rows whose query neuron is frozen from a matrix, preserving order.
template <class P>
int compact_rows(BoundMatrix<P>& m, const std::vector<char>& frozen) {
  const int n_rows = m.rows();
  int keep = 0;
  for (int r = 0; r < n_rows; ++r) {
    if (frozen[m.row_index[r]]) continue;
    if (keep != r) {
      std::move(m.coeff.begin() + static_cast<size_t>(r) * m.row_cells,
                m.coeff.begin() + static_cast<size_t>(r + 1) * m.row_cells,
                m.coeff.begin() + static_cast<size_t>(keep) * m.row_cells);
      m.constant[keep] = std::move(m.constant[r]);
      m.constant_raw[keep] = std::move(m.constant_raw[r]);
      m.row_index[keep] = m.row_index[r];
      if (!m.frame.dense) m.frame.origins[keep] = m.frame.origins[r];
    }
    ++keep;
  }
  const int removed = n_rows - keep;
  m.coeff.resize(static_cast<size_t>(keep) * m.row_cells);
  m.constant.resize(keep);
  m.constant_raw.resize(keep);
  m.row_index.resize(keep);
  if (!m.frame.dense) m.frame.origins.resize(keep);
  return removed;
}

// ---------------------------------------------------------------------------
// The walk

// Push the matrices backward until the frame reaches `stop_layer`, invoking
// `checkpoint(final)` after every affine or join substitution (when set).
// If the walk arrives at the stop layer via a relu step, a final checkpoint
// still fires so every pass concretizes at least once at its floor.
template <class P>
void walk_back(const Network<P>& net, const AnalysisState<P>& state, BoundMatrix<P>* up,
               BoundMatrix<P>* lo, int stop_layer, PassStats& stats, int workers,
               const std::function<void(bool)>& checkpoint) {
  BoundMatrix<P>* any = up ? up : lo;
  bool pending_checkpoint = false;  // a non-affine step since the last one
  while (any->frame.layer != stop_layer) {
    if (any->rows() == 0) return;  // everything froze and was compacted
    const int k = any->frame.layer;
    const LayerKind kind = net.layers[k].kind;
    switch (kind) {
      case LayerKind::Dense:
        if (up) dense_step(net, state, *up, stats, workers);
        if (lo) dense_step(net, state, *lo, stats, workers);
        if (checkpoint) checkpoint(any->frame.layer == stop_layer);
        pending_checkpoint = false;
        break;
      case LayerKind::Conv:
        if (up) gbc_step(net, state, *up, stats, workers);
        if (lo) gbc_step(net, state, *lo, stats, workers);
        if (checkpoint) checkpoint(any->frame.layer == stop_layer);
        pending_checkpoint = false;
        break;
      case LayerKind::Relu:
        if (up) relu_step(net, state, *up, workers);
        if (lo) relu_step(net, state, *lo, workers);
        pending_checkpoint = true;
        break;
      case LayerKind::Join:
        if (up) join_step(net, state, *up, stats, workers);
        if (lo) join_step(net, state, *lo, stats, workers);
        if (checkpoint) checkpoint(any->frame.layer == stop_layer);
        pending_checkpoint = false;
        break;
      case LayerKind::Input:
        throw std::logic_error("walk: frame fell through the input layer");
    }
  }
  if (pending_checkpoint && checkpoint) checkpoint(true);
}

// ---------------------------------------------------------------------------
// Pass drivers

// Peak per-row coefficient cells over the whole walk for a query layer —
// a geometry dry run used only to size chunks.  Frame state is (dense, ww,
// wh); joins recurse into both branches (alive simultaneously) and continue
// with a conservative union width.
namespace detail {

struct SimState {
  bool dense;
  long long ww, wh;
};

template <class P>
long long sim_cells(const Network<P>& net, int layer, const SimState& st) {
  const Shape& s = net.layers[layer].out_shape;
  return st.dense ? s.numel() : st.ww * st.wh * s.c;
}

// Walks a frame at `layer` down to `stop`; returns {state at stop, peak}.
template <class P>
std::pair<SimState, long long> sim_walk(const Network<P>& net, int layer, SimState st,
                                        int stop) {
  long long peak = sim_cells(net, layer, st);
  while (layer != stop) {
    const Layer<P>& L = net.layers[layer];
    switch (L.kind) {
      case LayerKind::Dense:
        st = {true, 0, 0};
        layer = L.preds[0];
        break;
      case LayerKind::Conv:
        if (!st.dense) {
          st.ww = grow_width(static_cast<int>(std::min<long long>(st.ww, 1 << 20)), L.fw, L.sw);
          st.wh = grow_width(static_cast<int>(std::min<long long>(st.wh, 1 << 20)), L.fh, L.sh);
        }
        layer = L.preds[0];
        break;
      case LayerKind::Relu:
        layer = L.preds[0];
        break;
      case LayerKind::Join: {
        const int head = L.join_head;
        auto [sa, pa] = sim_walk(net, L.preds[0], st, head);
        auto [sb, pb] = sim_walk(net, L.preds[1], st, head);
        peak = std::max(peak, pa + pb);
        layer = head;
        if (sa.dense || sb.dense)
          st = {true, 0, 0};
        else  // union extent is at most the sum of the branch extents
          st = {false, sa.ww + sb.ww, sa.wh + sb.wh};
        break;
      }
      case LayerKind::Input:
        return {st, peak};
    }
    peak = std::max(peak, sim_cells(net, layer, st));
  }
  return {st, peak};
}

}  // namespace detail

template <class P>
long long peak_row_cells(const Network<P>& net, int query_layer) {
  const Layer<P>& Q = net.layers[query_layer];
  detail::SimState st{true, 0, 0};
  int start = query_layer;
  if (Q.kind == LayerKind::Conv) {
    st = {false, Q.fw, Q.fh};
    start = Q.preds[0];
  } else if (Q.kind == LayerKind::Dense) {
    start = Q.preds[0];
  } else if (Q.out_shape.w > 1 || Q.out_shape.h > 1) {
    st = {false, 1, 1};
  }
  auto [end_state, peak] = detail::sim_walk(net, start, st, 0);
  (void)end_state;
  return std::max<long long>(peak, 1);
}

template <class P>
long long rows_per_chunk(const Network<P>& net, int query_layer, const PassOptions& opt) {
  if (opt.chunk_rows > 0) return opt.chunk_rows;
  const long long cells = peak_row_cells(net, query_layer);
  // Two polarities, a transient second copy during joins, and for exact
  // scalars a fudge factor for heap-allocated limbs.
  const long long per_iv = static_cast<long long>(sizeof(Interval<P>)) + (P::exact ? 64 : 0);
  const long long per_row = cells * per_iv * 4 + 1024;
  const long long budget = std::max<long long>(opt.memory_budget, per_row);
  return std::max<long long>(1, budget / per_row);
}

// Run one refinement pass for a real layer: compute candidate lower and upper
// bounds for the selected rows and store the best into `state.bounds`.
// `allow_freeze` is off for the output layer, whose rows always run to the
// input.
template <class P>
void run_backsubstitution(const Network<P>& net, AnalysisState<P>& state, int query_layer,
                          bool allow_freeze, const PassOptions& opt, PassStats& stats) {
  const Layer<P>& Q = net.layers[query_layer];
  const int n = Q.out_shape.numel();
  const bool have_raw = !state.raw.empty();
  const LayerBounds<P>& raw_bounds = have_raw ? state.raw : state.bounds;
  CandidateSet<P> cand(n);
  for (int q = 0; q < n; ++q)
    cand.seed(q, state.bounds[query_layer][q], raw_bounds[query_layer][q]);

  if (allow_freeze)
    for (int q = 0; q < n; ++q)
      if (cand.stable(q)) {
        cand.frozen[q] = 1;
        if (opt.early_term) ++stats.rows_terminated_early;
      }
  stats.rows_total += n;

  std::vector<int> live;
  live.reserve(n);
  for (int q = 0; q < n; ++q)
    if (!(opt.early_term && cand.frozen[q])) live.push_back(q);

  const bool affine_init = Q.kind == LayerKind::Dense || Q.kind == LayerKind::Conv;
  const long long chunk = rows_per_chunk(net, query_layer, opt);

  for (size_t base = 0; base < live.size(); base += static_cast<size_t>(chunk)) {
    const size_t end = std::min(live.size(), base + static_cast<size_t>(chunk));
    std::span<const int> rows_sel(live.data() + base, end - base);

    BoundMatrix<P> up = affine_init
                            ? init_affine_rows(net, state, query_layer, rows_sel, Polarity::Upper)
                            : init_identity_rows(net, query_layer, rows_sel, Polarity::Upper);
    BoundMatrix<P> lo = affine_init
                            ? init_affine_rows(net, state, query_layer, rows_sel, Polarity::Lower)
                            : init_identity_rows(net, query_layer, rows_sel, Polarity::Lower);

    std::vector<typename P::Scalar> vals, rvals;
    const std::function<void(bool)> checkpoint = [&](bool) {
      ++stats.checkpoints;
      concretize(net, state.bounds, up, false, vals, opt.workers);
      concretize(net, raw_bounds, up, true, rvals, opt.workers);
      for (int r = 0; r < up.rows(); ++r) cand.offer_hi(up.row_index[r], vals[r], rvals[r]);
      concretize(net, state.bounds, lo, false, vals, opt.workers);
      concretize(net, raw_bounds, lo, true, rvals, opt.workers);
      for (int r = 0; r < lo.rows(); ++r) cand.offer_lo(lo.row_index[r], vals[r], rvals[r]);
      if (!allow_freeze) return;
      bool any_frozen = false;
      for (int r = 0; r < up.rows(); ++r) {
        const int q = up.row_index[r];
        if (!cand.frozen[q] && cand.stable(q)) {
          cand.frozen[q] = 1;
          any_frozen = true;
          if (opt.early_term) ++stats.rows_terminated_early;
        }
      }
      if (opt.early_term && any_frozen) {
        compact_rows(up, cand.frozen);
        compact_rows(lo, cand.frozen);
      }
    };

    if (affine_init) checkpoint(false);  // the init itself was an affine step
    walk_back<P>(net, state, &up, &lo, 0, stats, opt.workers, checkpoint);
  }

  for (int q = 0; q < n; ++q) {
    state.bounds[query_layer][q] = Interval<P>(cand.lo[q], cand.hi[q]);
    if (have_raw)
      state.raw[query_layer][q] = Interval<P>(cand.raw_lo[q], cand.raw_hi[q]);
  }
}

// Run the verification pass: lower bounds of the margins out_label - out_j
// for every class j != label, in ascending class order.  Margin rows never
// freeze.
template <class P>
std::vector<typename P::Scalar> run_margin_pass(const Network<P>& net,
                                                const AnalysisState<P>& state, int label,
                                                const PassOptions& opt, PassStats& stats) {
  using S = typename P::Scalar;
  BoundMatrix<P> lo = init_margin_rows(net, label, Polarity::Lower);
  const int n_rows = lo.rows();
  stats.rows_total += n_rows;

  std::vector<S> best(n_rows, S(0));
  std::vector<char> has(n_rows, 0);
  std::vector<S> vals;
  const std::function<void(bool)> checkpoint = [&](bool) {
    ++stats.checkpoints;
    concretize(net, state.bounds, lo, false, vals, opt.workers);
    for (int r = 0; r < lo.rows(); ++r) {
      if (!has[r] || vals[r] > best[r]) {
        best[r] = vals[r];
        has[r] = 1;
      }
    }
  };
  walk_back<P>(net, state, nullptr, &lo, 0, stats, opt.workers, checkpoint);
  for (int r = 0; r < n_rows; ++r)
    if (!has[r]) throw std::logic_error("margin pass produced no candidate");
  return best;
}

}  // namespace polycert
