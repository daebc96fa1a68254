#include "polycert/decimal.hpp"

#include <cctype>
#include <cstdlib>
#include <stdexcept>

namespace polycert {

namespace {

// Splits [+-]?digits[.digits] into sign, digit string, and fractional length.
// Exponents are deliberately not part of the model grammar.
void split_decimal(const std::string& text, bool& negative, std::string& digits,
                   std::size_t& frac_len) {
  std::size_t i = 0;
  negative = false;
  if (i < text.size() && (text[i] == '+' || text[i] == '-')) {
    negative = text[i] == '-';
    ++i;
  }
  digits.clear();
  frac_len = 0;
  std::size_t int_len = 0;
  bool seen_point = false;
  for (; i < text.size(); ++i) {
    char c = text[i];
    if (c == '.') {
      if (seen_point) throw std::invalid_argument("bad decimal: " + text);
      seen_point = true;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      digits.push_back(c);
      if (seen_point)
        ++frac_len;
      else
        ++int_len;
    } else {
      throw std::invalid_argument("bad decimal: " + text);
    }
  }
  // Digits are mandatory on both sides of a point: "1." and ".5" are not
  // part of the grammar.
  if (int_len == 0 || (seen_point && frac_len == 0))
    throw std::invalid_argument("bad decimal: " + text);
}

}  // namespace

mpq_class rational_from_decimal(const std::string& text) {
  bool negative;
  std::string digits;
  std::size_t frac_len;
  split_decimal(text, negative, digits, frac_len);

  mpz_class num(digits, 10);
  if (negative) num = -num;
  mpz_class den(1);
  for (std::size_t i = 0; i < frac_len; ++i) den *= 10;
  mpq_class q(num, den);
  q.canonicalize();
  return q;
}

double double_from_decimal(const std::string& text) {
  // Validate with the shared grammar first, then let strtod do the one
  // correctly-rounded conversion.
  bool negative;
  std::string digits;
  std::size_t frac_len;
  split_decimal(text, negative, digits, frac_len);

  char* end = nullptr;
  double v = std::strtod(text.c_str(), &end);
  if (end == nullptr || *end != '\0')
    throw std::invalid_argument("bad decimal: " + text);
  return v;
}

std::string decimal_from_rational(const mpq_class& value) {
  mpz_class num = value.get_num();
  mpz_class den = value.get_den();

  // A rational has a finite decimal expansion iff its reduced denominator is
  // 2^a * 5^b; scale numerator and denominator up to a power of ten.
  mpz_class rest = den;
  unsigned twos = 0, fives = 0;
  while (rest % 2 == 0) {
    rest /= 2;
    ++twos;
  }
  while (rest % 5 == 0) {
    rest /= 5;
    ++fives;
  }
  if (rest != 1)
    throw std::invalid_argument("rational has no finite decimal expansion");

  unsigned digits_after_point = std::max(twos, fives);
  for (unsigned i = twos; i < digits_after_point; ++i) num *= 2;
  for (unsigned i = fives; i < digits_after_point; ++i) num *= 5;

  bool negative = num < 0;
  if (negative) num = -num;
  std::string body = num.get_str();

  std::string out;
  if (digits_after_point == 0) {
    out = body;
  } else {
    if (body.size() <= digits_after_point)
      body.insert(0, digits_after_point - body.size() + 1, '0');
    out = body.substr(0, body.size() - digits_after_point) + "." +
          body.substr(body.size() - digits_after_point);
    while (out.back() == '0') out.pop_back();
    if (out.back() == '.') out.pop_back();
  }
  if (negative && out != "0") out.insert(out.begin(), '-');
  return out;
}

}  // namespace polycert
