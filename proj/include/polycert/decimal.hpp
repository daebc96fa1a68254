// decimal.hpp — exact decimal-string conversions. The model format stores
// every number as a decimal string so that both scalar modes parse the same
// written value: rationals exactly, doubles with a single correct rounding.

#pragma once

#include <gmpxx.h>

#include <string>

namespace polycert {

// Parses [+-]?digits[.digits] into an exact rational (digits / 10^frac_len).
// Throws std::invalid_argument on malformed input.
mpq_class rational_from_decimal(const std::string& text);

// Same grammar, parsed to the nearest double (single rounding via strtod).
double double_from_decimal(const std::string& text);

template <class S>
S scalar_from_decimal(const std::string& text);

template <>
inline mpq_class scalar_from_decimal<mpq_class>(const std::string& text) {
  return rational_from_decimal(text);
}
template <>
inline double scalar_from_decimal<double>(const std::string& text) {
  return double_from_decimal(text);
}

// Formats a rational whose denominator divides 2^a * 5^b as its exact finite
// decimal expansion (minimal digits, no exponent). Throws if the value has no
// finite decimal form. The generator emits dyadic values, so emitted models
// round-trip byte-identically and mean the same real number in both modes.
std::string decimal_from_rational(const mpq_class& value);

}  // namespace polycert
