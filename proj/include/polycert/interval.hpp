// interval.hpp — sound interval arithmetic behind the verifier's two scalar
// modes: outward-widened IEEE doubles and exact GMP rationals. A whole analysis
// runs in exactly one mode; the mode is a template parameter, so mixing modes
// is rejected at compile time.

#pragma once

#include <gmpxx.h>

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>

namespace polycert {

// Widened double mode. Every endpoint produced by an INEXACT rounded operation
// is the round-to-nearest result stepped one representable value outward; an
// exact operation returns its result untouched, since the exact value already
// equals both directed roundings. For any real x, step_down(nearest(x)) <=
// round_toward(-inf, x) and symmetrically for step_up, so the results dominate
// directed rounding without touching the FPU environment, and stay sound if
// the process runs under any rounding mode. Preserving exactness matters
// beyond precision: dyadic weights and inputs then take bit-identical values
// in both scalar modes, so data-dependent choices (stability tests, relaxation
// selection) cannot drift apart between them on exact prefixes of the
// computation. Inexactness is detected by the error-free residuals (TwoSum for
// addition, an fma for multiply and divide); residuals are exact for normal
// results, so results near the subnormal range are conservatively treated as
// inexact. Overflow saturates to +/-infinity (sound); NaN endpoints are
// rejected.
struct WidenedFloat64 {
  using Scalar = double;
  static constexpr bool exact = false;

  static double infinity() { return std::numeric_limits<double>::infinity(); }
  static double step_down(double x) { return std::nextafter(x, -infinity()); }
  static double step_up(double x) { return std::nextafter(x, infinity()); }

  // Smallest magnitude at which the residual tests below are trusted; below
  // it (deep in or near the subnormal range) every result counts as inexact.
  static constexpr double kResidualFloor = 0x1p-500;

  static bool sum_exact(double a, double b, double s) {
    if (!std::isfinite(s)) return false;
    const double a1 = s - b;
    const double b1 = s - a1;
    const double da = a - a1;
    const double db = b - b1;
    return da + db == 0.0;
  }

  static double add_down(double a, double b) {
    double s = a + b;
    if (std::isnan(s)) return -infinity();  // -inf + +inf between saturated endpoints
    return sum_exact(a, b, s) ? s : step_down(s);
  }
  static double add_up(double a, double b) {
    double s = a + b;
    if (std::isnan(s)) return infinity();
    return sum_exact(a, b, s) ? s : step_up(s);
  }
  // Exact-zero factors short-circuit to 0: the real product is exactly zero,
  // and the annihilator also keeps 0 * inf from manufacturing NaN.
  static bool mul_exact(double a, double b, double p) {
    return std::isfinite(p) && std::fabs(p) >= kResidualFloor && std::fma(a, b, -p) == 0.0;
  }
  static double mul_down(double a, double b) {
    if (a == 0.0 || b == 0.0) return 0.0;
    double p = a * b;
    return mul_exact(a, b, p) ? p : step_down(p);
  }
  static double mul_up(double a, double b) {
    if (a == 0.0 || b == 0.0) return 0.0;
    double p = a * b;
    return mul_exact(a, b, p) ? p : step_up(p);
  }
  static bool div_exact(double a, double b, double q) {
    return std::isfinite(q) && std::fabs(a) >= kResidualFloor && std::fma(q, b, -a) == 0.0;
  }
  static double div_down(double a, double b) {
    if (a == 0.0) return 0.0;
    double q = a / b;
    return div_exact(a, b, q) ? q : step_down(q);
  }
  static double div_up(double a, double b) {
    if (a == 0.0) return 0.0;
    double q = a / b;
    return div_exact(a, b, q) ? q : step_up(q);
  }
  // Distance to the next representable value above |x|; used for slack terms.
  static double ulp_above(double x) {
    double m = std::fabs(x);
    if (!std::isfinite(m)) return infinity();
    return step_up(m) - m;
  }
};

// Exact rational mode backed by GMP. No rounding, no saturation; mpq_class
// keeps operands canonical. Used as the testing oracle mode. Directed
// rounding is the identity here; the mirrored statics let mode-generic code
// call one surface in both modes.
struct ExactRational {
  using Scalar = mpq_class;
  static constexpr bool exact = true;

  static mpq_class add_down(const mpq_class& a, const mpq_class& b) { return a + b; }
  static mpq_class add_up(const mpq_class& a, const mpq_class& b) { return a + b; }
  static mpq_class mul_down(const mpq_class& a, const mpq_class& b) { return a * b; }
  static mpq_class mul_up(const mpq_class& a, const mpq_class& b) { return a * b; }
  static mpq_class div_down(const mpq_class& a, const mpq_class& b) { return a / b; }
  static mpq_class div_up(const mpq_class& a, const mpq_class& b) { return a / b; }
  static mpq_class ulp_above(const mpq_class&) { return 0; }
};

template <class S>
S scalar_abs(const S& x) {
  return x < S(0) ? S(-x) : x;
}

template <class P>
struct Interval {
  using Scalar = typename P::Scalar;

  Scalar lo{};
  Scalar hi{};

  Interval() : lo(0), hi(0) {}
  Interval(Scalar l, Scalar h) : lo(std::move(l)), hi(std::move(h)) {
    if constexpr (!P::exact) {
      if (std::isnan(lo) || std::isnan(hi))
        throw std::invalid_argument("Interval: NaN endpoint");
    }
    assert(!(hi < lo));
  }

  static Interval point(Scalar v) {
    Interval r;
    r.lo = v;
    r.hi = std::move(v);
    return r;
  }

  bool is_zero() const { return lo == Scalar(0) && hi == Scalar(0); }
  bool is_point() const { return lo == hi; }
  bool contains(const Interval& inner) const {
    return !(inner.lo < lo) && !(hi < inner.hi);
  }
  bool contains_value(const Scalar& v) const { return !(v < lo) && !(hi < v); }

  bool operator==(const Interval& o) const { return lo == o.lo && hi == o.hi; }
};

using IvF = Interval<WidenedFloat64>;
using IvQ = Interval<ExactRational>;

template <class P>
Interval<P> iv_add(const Interval<P>& a, const Interval<P>& b) {
  if constexpr (P::exact) {
    return Interval<P>(a.lo + b.lo, a.hi + b.hi);
  } else {
    return Interval<P>(P::add_down(a.lo, b.lo), P::add_up(a.hi, b.hi));
  }
}

template <class P>
Interval<P> iv_neg(const Interval<P>& a) {
  return Interval<P>(-a.hi, -a.lo);  // negation is exact in both modes
}

template <class P>
Interval<P> iv_sub(const Interval<P>& a, const Interval<P>& b) {
  return iv_add(a, iv_neg(b));
}

// In-place a += b with the degenerate zero interval as exact identity. The
// skip matters: zero-weight and padding terms must not widen accumulations,
// and a conventional evaluation adding literal zeros incurs no rounding.
template <class P>
void iv_acc(Interval<P>& a, const Interval<P>& b) {
  if (b.is_zero()) return;
  if constexpr (P::exact) {
    a.lo += b.lo;
    a.hi += b.hi;
  } else {
    a.lo = P::add_down(a.lo, b.lo);
    a.hi = P::add_up(a.hi, b.hi);
  }
}

template <class P>
Interval<P> iv_mul_scalar(const Interval<P>& a, const typename P::Scalar& w) {
  using S = typename P::Scalar;
  if (w == S(0) || a.is_zero()) return Interval<P>();
  if constexpr (P::exact) {
    if (w > S(0)) return Interval<P>(a.lo * w, a.hi * w);
    return Interval<P>(a.hi * w, a.lo * w);
  } else {
    if (w > S(0)) return Interval<P>(P::mul_down(a.lo, w), P::mul_up(a.hi, w));
    return Interval<P>(P::mul_down(a.hi, w), P::mul_up(a.lo, w));
  }
}

template <class P>
Interval<P> iv_mul(const Interval<P>& a, const Interval<P>& b) {
  if (a.is_zero() || b.is_zero()) return Interval<P>();
  if constexpr (P::exact) {
    using S = typename P::Scalar;
    S p1 = a.lo * b.lo, p2 = a.lo * b.hi, p3 = a.hi * b.lo, p4 = a.hi * b.hi;
    return Interval<P>(std::min(std::min(p1, p2), std::min(p3, p4)),
                       std::max(std::max(p1, p2), std::max(p3, p4)));
  } else {
    double l1 = P::mul_down(a.lo, b.lo), l2 = P::mul_down(a.lo, b.hi);
    double l3 = P::mul_down(a.hi, b.lo), l4 = P::mul_down(a.hi, b.hi);
    double u1 = P::mul_up(a.lo, b.lo), u2 = P::mul_up(a.lo, b.hi);
    double u3 = P::mul_up(a.hi, b.lo), u4 = P::mul_up(a.hi, b.hi);
    return Interval<P>(std::min(std::min(l1, l2), std::min(l3, l4)),
                       std::max(std::max(u1, u2), std::max(u3, u4)));
  }
}

// Division by an interval strictly above zero (the only shape the analyzer
// needs: ReLU chord denominators u - l with l < 0 < u).
template <class P>
Interval<P> iv_div(const Interval<P>& a, const Interval<P>& b) {
  using S = typename P::Scalar;
  if (!(S(0) < b.lo)) throw std::invalid_argument("iv_div: divisor must be > 0");
  if (a.is_zero()) return Interval<P>();
  if constexpr (P::exact) {
    S q1 = a.lo / b.lo, q2 = a.lo / b.hi, q3 = a.hi / b.lo, q4 = a.hi / b.hi;
    return Interval<P>(std::min(std::min(q1, q2), std::min(q3, q4)),
                       std::max(std::max(q1, q2), std::max(q3, q4)));
  } else {
    double l1 = P::div_down(a.lo, b.lo), l2 = P::div_down(a.lo, b.hi);
    double l3 = P::div_down(a.hi, b.lo), l4 = P::div_down(a.hi, b.hi);
    double u1 = P::div_up(a.lo, b.lo), u2 = P::div_up(a.lo, b.hi);
    double u3 = P::div_up(a.hi, b.lo), u4 = P::div_up(a.hi, b.hi);
    return Interval<P>(std::min(std::min(l1, l2), std::min(l3, l4)),
                       std::max(std::max(u1, u2), std::max(u3, u4)));
  }
}

// [max(lo,0), max(hi,0)] and [min(lo,0), min(hi,0)]: the positive/negative
// parts used for sign-split substitution when a coefficient interval straddles
// zero. pos + neg recovers the original interval.
template <class P>
Interval<P> iv_pos_part(const Interval<P>& a) {
  using S = typename P::Scalar;
  return Interval<P>(std::max(a.lo, S(0)), std::max(a.hi, S(0)));
}

template <class P>
Interval<P> iv_neg_part(const Interval<P>& a) {
  using S = typename P::Scalar;
  return Interval<P>(std::min(a.lo, S(0)), std::min(a.hi, S(0)));
}

template <class P>
typename P::Scalar iv_mag(const Interval<P>& a) {
  return std::max(scalar_abs(a.lo), scalar_abs(a.hi));
}

// Sound dot product sum(coeffs[i] * weights[i]), accumulated in ascending
// index order. In widened mode the result also contains every conventional
// scalar evaluation of the same dot product under ANY summation order and ANY
// rounding mode: each term and each partial sum is stepped outward (covers
// fixed-order directed rounding), and the final interval is widened by
// 2*(n+1) ulp of an upper bound on sum(|term|), which dominates worst-case
// reassociation error (every partial sum is bounded by sum(|term|), and each
// of the n adds and n products contributes less than one ulp at that scale).
template <class P>
Interval<P> iv_dot(std::span<const Interval<P>> coeffs,
                   std::span<const typename P::Scalar> weights) {
  if (coeffs.size() != weights.size())
    throw std::invalid_argument("iv_dot: length mismatch");
  if constexpr (P::exact) {
    mpq_class lo(0), hi(0);
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
      if (weights[i] == 0) continue;
      Interval<P> t = iv_mul_scalar(coeffs[i], weights[i]);
      lo += t.lo;
      hi += t.hi;
    }
    return Interval<P>(std::move(lo), std::move(hi));
  } else {
    double lo = 0.0, hi = 0.0, abs_hi = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
      if (weights[i] == 0.0) continue;
      Interval<P> t = iv_mul_scalar(coeffs[i], weights[i]);
      if (t.is_zero()) continue;
      lo = P::add_down(lo, t.lo);
      hi = P::add_up(hi, t.hi);
      abs_hi = P::add_up(abs_hi, iv_mag(t));
      ++n;
    }
    if (n > 0) {
      if (!std::isfinite(abs_hi)) return Interval<P>(-P::infinity(), P::infinity());
      double slack = P::mul_up(2.0 * static_cast<double>(n + 1), P::ulp_above(abs_hi));
      lo = P::add_down(lo, -slack);
      hi = P::add_up(hi, slack);
    }
    return Interval<P>(lo, hi);
  }
}

// Reporting helper: collapse a mode scalar to double (round-to-nearest; only
// used for human-facing output, never inside the analysis).
inline double scalar_to_double(const double& x) { return x; }

// mpq_get_d truncates toward zero, so correct it to round-to-nearest (ties to
// even): the nearest double is either the truncation or its neighbor away from
// zero, and both distances are exactly comparable in rationals.
inline double scalar_to_double(const mpq_class& x) {
  const double a = x.get_d();
  if (!std::isfinite(a) || bool(mpq_class(a) == x)) return a;
  const double inf = std::numeric_limits<double>::infinity();
  const double b = std::nextafter(a, bool(x > mpq_class(a)) ? inf : -inf);
  if (!std::isfinite(b)) return a;
  const mpq_class ea = abs(x - mpq_class(a));
  const mpq_class eb = abs(mpq_class(b) - x);
  if (bool(ea < eb)) return a;
  if (bool(eb < ea)) return b;
  return (std::bit_cast<std::uint64_t>(a) & 1) == 0 ? a : b;
}

}  // namespace polycert
