#include <string>

#include "doctest.h"
#include "polycert/decimal.hpp"
#include "polycert/rng.hpp"

using namespace polycert;
using Q = mpq_class;

TEST_CASE("rational_from_decimal parses exactly") {
  CHECK(bool(rational_from_decimal("0.25") == Q(1, 4)));
  CHECK(bool(rational_from_decimal("-0.5") == Q(-1, 2)));
  CHECK(bool(rational_from_decimal("+3") == Q(3)));
  CHECK(bool(rational_from_decimal("0.1") == Q(1, 10)));
  CHECK(bool(rational_from_decimal("10.0625") == Q(161, 16)));
  CHECK(bool(rational_from_decimal("0") == Q(0)));
  CHECK(bool(rational_from_decimal("-0.0") == Q(0)));
}

TEST_CASE("rational_from_decimal rejects malformed input") {
  CHECK_THROWS_AS(rational_from_decimal(""), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("."), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("1."), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal(".5"), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("1e3"), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("1.2.3"), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("a"), std::invalid_argument);
  CHECK_THROWS_AS(rational_from_decimal("1 "), std::invalid_argument);
}

TEST_CASE("double_from_decimal rounds once") {
  CHECK(double_from_decimal("0.5") == 0.5);
  CHECK(double_from_decimal("-0.25") == -0.25);
  CHECK(double_from_decimal("0.1") == 0.1);  // same rounding as a literal
  CHECK_THROWS_AS(double_from_decimal("x"), std::invalid_argument);
}

TEST_CASE("decimal_from_rational emits minimal exact decimals") {
  CHECK(decimal_from_rational(Q(1, 4)) == "0.25");
  CHECK(decimal_from_rational(Q(3, 8)) == "0.375");
  CHECK(decimal_from_rational(Q(-1, 64)) == "-0.015625");
  CHECK(decimal_from_rational(Q(7)) == "7");
  CHECK(decimal_from_rational(Q(0)) == "0");
  CHECK(decimal_from_rational(Q(1, 10)) == "0.1");
  CHECK(decimal_from_rational(Q(3, 20)) == "0.15");
  CHECK_THROWS(decimal_from_rational(Q(1, 3)));
  CHECK_THROWS(decimal_from_rational(Q(5, 7)));
}

TEST_CASE("dyadic values round-trip through decimal text") {
  Rng rng{42};
  for (int it = 0; it < 2000; ++it) {
    const long num = rng.irange(-100000, 100000);
    const long den = 1l << rng.irange(0, 20);
    Q v(num, den);
    v.canonicalize();
    const std::string text = decimal_from_rational(v);
    CHECK(bool(rational_from_decimal(text) == v));
    // Both modes read the same written value: the double parse equals the
    // correctly rounded rational.
    const double d = double_from_decimal(text);
    CHECK(bool(Q(d) == v));  // dyadics this small are exactly representable
  }
}
