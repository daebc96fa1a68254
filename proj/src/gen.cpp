#include "polycert/gen.hpp"

#include <cctype>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "polycert/decimal.hpp"

namespace polycert::gen {

namespace {

// --- architecture grammar ---------------------------------------------------

struct Parser {
  const std::string& s;
  size_t i = 0;

  void ws() {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  }
  bool done() {
    ws();
    return i >= s.size();
  }
  bool eat(char c) {
    ws();
    if (i < s.size() && s[i] == c) {
      ++i;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!eat(c)) fail(std::string("expected '") + c + "'");
  }
  char peek() {
    ws();
    return i < s.size() ? s[i] : '\0';
  }
  std::string word() {
    ws();
    const size_t b = i;
    while (i < s.size() && std::isalpha(static_cast<unsigned char>(s[i]))) ++i;
    if (b == i) fail("expected a keyword");
    return s.substr(b, i - b);
  }
  int integer() {
    ws();
    const size_t b = i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (b == i) fail("expected a number");
    return std::stoi(s.substr(b, i - b));
  }
  [[noreturn]] void fail(const std::string& what) {
    throw std::invalid_argument("arch: " + what + " at offset " + std::to_string(i));
  }
};

// --- deterministic dyadic weight drawing ------------------------------------

// Smallest t with 2^t >= n.
int ceil_log2(int n) {
  int t = 0;
  while ((1 << t) < n) ++t;
  return t;
}

// Uniform dyadic draw in roughly [-1, 1] scaled down by about fan_in / 2:
// numerator in [-64, 64], denominator 64 * 2^max(0, ceil_log2(fan_in) - 1).
std::string draw_weight(Rng& rng, int fan_in) {
  const int num = rng.irange(-64, 64);
  const int shift = std::max(0, ceil_log2(std::max(fan_in, 1)) - 1);
  mpq_class q(num, 64L << shift);
  q.canonicalize();
  return decimal_from_rational(q);
}

std::string draw_bias(Rng& rng) {
  mpq_class q(rng.irange(-32, 32), 64);
  q.canonicalize();
  return decimal_from_rational(q);
}

// --- builder ----------------------------------------------------------------

struct Builder {
  ModelDoc doc;
  Rng rng;

  explicit Builder(uint64_t seed) : rng(seed) {}

  int last() const { return static_cast<int>(doc.layers.size()) - 1; }
  const Shape& shape_of(int id) const { return doc.layers[id].out_shape; }

  void set_input(int w, int h, int c) {
    if (!doc.layers.empty()) throw std::invalid_argument("arch: duplicate input");
    doc.input_shape = Shape{w, h, c};
    LayerDoc ld;
    ld.id = 0;
    ld.kind = LayerKind::Input;
    ld.out_shape = doc.input_shape;
    doc.layers.push_back(std::move(ld));
  }

  int add_dense(int pred, int n) {
    const int fan_in = shape_of(pred).numel();
    LayerDoc ld;
    ld.id = static_cast<int>(doc.layers.size());
    ld.kind = LayerKind::Dense;
    ld.preds = {pred};
    ld.weights.resize(n);
    for (int j = 0; j < n; ++j) {
      ld.weights[j].reserve(fan_in);
      for (int t = 0; t < fan_in; ++t) ld.weights[j].push_back(draw_weight(rng, fan_in));
    }
    for (int j = 0; j < n; ++j) ld.bias.push_back(draw_bias(rng));
    ld.out_shape = Shape{1, 1, n};
    const int id = ld.id;
    doc.layers.push_back(std::move(ld));
    return id;
  }

  int add_conv(int pred, int fw, int fh, int cout, int stride, int pad) {
    const Shape in = shape_of(pred);
    LayerDoc ld;
    ld.id = static_cast<int>(doc.layers.size());
    ld.kind = LayerKind::Conv;
    ld.preds = {pred};
    ld.fw = fw;
    ld.fh = fh;
    ld.cin = in.c;
    ld.cout = cout;
    ld.sw = ld.sh = stride;
    ld.pw = ld.ph = pad;
    const int fan_in = fw * fh * in.c;
    const int taps = fw * fh * in.c * cout;
    ld.filter.reserve(taps);
    for (int t = 0; t < taps; ++t) ld.filter.push_back(draw_weight(rng, fan_in));
    for (int j = 0; j < cout; ++j) ld.bias.push_back(draw_bias(rng));
    const int num_w = in.w + 2 * pad - fw;
    const int num_h = in.h + 2 * pad - fh;
    if (num_w < 0 || num_h < 0 || num_w % stride != 0 || num_h % stride != 0)
      throw std::invalid_argument("arch: conv does not tile its input exactly");
    ld.out_shape = Shape{num_w / stride + 1, num_h / stride + 1, cout};
    const int id = ld.id;
    doc.layers.push_back(std::move(ld));
    return id;
  }

  int add_relu(int pred) {
    LayerDoc ld;
    ld.id = static_cast<int>(doc.layers.size());
    ld.kind = LayerKind::Relu;
    ld.preds = {pred};
    ld.out_shape = shape_of(pred);
    const int id = ld.id;
    doc.layers.push_back(std::move(ld));
    return id;
  }

  int add_join(int a, int b) {
    LayerDoc ld;
    ld.id = static_cast<int>(doc.layers.size());
    ld.kind = LayerKind::Join;
    ld.preds = {a, b};
    ld.out_shape = shape_of(a);
    const int id = ld.id;
    doc.layers.push_back(std::move(ld));
    return id;
  }
};

// Parses one chain of statements starting at layer `from`; returns the last
// layer id.  `top` allows the `input` statement (only as the first statement
// of the whole string).
int parse_chain(Parser& p, Builder& b, int from, bool top) {
  int cur = from;
  bool first = true;
  while (true) {
    if (p.done()) break;
    const char c = p.peek();
    if (c == '|' || c == ')') break;
    if (!first) p.expect(';');
    if (p.done() || p.peek() == '|' || p.peek() == ')') break;  // trailing ';'
    first = false;

    if (p.peek() == 'b' && p.s.compare(p.i, 5, "block") == 0) {
      p.i += 5;
      p.expect('(');
      const int end_a = parse_chain(p, b, cur, false);
      p.expect('|');
      const int end_b = parse_chain(p, b, cur, false);
      p.expect(')');
      cur = b.add_join(end_a, end_b);
      continue;
    }

    const std::string kw = p.word();
    if (kw == "input") {
      if (!top || cur >= 0) p.fail("'input' must be the first statement");
      const int w = p.integer();
      p.expect('x');
      const int h = p.integer();
      p.expect('x');
      const int ch = p.integer();
      b.set_input(w, h, ch);
      cur = 0;
    } else if (kw == "conv") {
      if (cur < 0) p.fail("'input' must come first");
      const int fw = p.integer();
      p.expect('x');
      const int fh = p.integer();
      p.expect('x');
      const int co = p.integer();
      int stride = 1, pad = 0;
      while (p.peek() == 's' || p.peek() == 'p') {
        const std::string opt = p.word();
        if (opt == "s")
          stride = p.integer();
        else if (opt == "p")
          pad = p.integer();
        else
          p.fail("unknown conv option '" + opt + "'");
      }
      cur = b.add_conv(cur, fw, fh, co, stride, pad);
    } else if (kw == "dense") {
      if (cur < 0) p.fail("'input' must come first");
      cur = b.add_dense(cur, p.integer());
    } else if (kw == "relu") {
      if (cur < 0) p.fail("'input' must come first");
      cur = b.add_relu(cur);
    } else if (kw == "skip") {
      if (top) p.fail("'skip' is only valid inside a block branch");
      // identity branch: the chain ends where it started
    } else {
      p.fail("unknown statement '" + kw + "'");
    }
  }
  return cur;
}

}  // namespace

ModelDoc generate(uint64_t seed, const std::string& arch) {
  Parser p{arch};
  Builder b(seed);
  const int end = parse_chain(p, b, -1, true);
  if (!p.done()) p.fail("trailing input");
  if (end <= 0) throw std::invalid_argument("arch: no layers");
  validate_model(b.doc);
  return b.doc;
}

std::vector<std::vector<std::string>> random_inputs(uint64_t seed, int count, int dim) {
  Rng rng(seed);
  std::vector<std::vector<std::string>> rows;
  rows.reserve(count);
  for (int r = 0; r < count; ++r) {
    std::vector<std::string> row;
    row.reserve(dim);
    for (int i = 0; i < dim; ++i) {
      mpq_class q(static_cast<long>(rng.below(257)), 256);
      q.canonicalize();
      row.push_back(decimal_from_rational(q));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sample_arch(Rng& rng, int size_class) {
  const bool small = size_class > 0;
  std::string a;
  const int family = rng.irange(0, 5);  // 0-2 dense, 3-4 conv, 5 residual
  auto num = [](int v) { return std::to_string(v); };

  if (family <= 2) {
    const int d = small ? rng.irange(8, 16) : rng.irange(4, 8);
    a = "input 1x1x" + num(d);
    const int hidden = small ? rng.irange(2, 3) : rng.irange(1, 2);
    for (int i = 0; i < hidden; ++i) {
      const int w = small ? rng.irange(16, 28) : rng.irange(8, 20);
      a += "; dense " + num(w) + "; relu";
    }
    a += "; dense " + num(rng.irange(2, small ? 6 : 4));
  } else if (family <= 4) {
    const int side = small ? 6 : (rng.irange(0, 1) ? 4 : 6);
    const int cin = rng.irange(1, 2);
    a = "input " + num(side) + "x" + num(side) + "x" + num(cin);
    const int convs = small ? 2 : rng.irange(1, 2);
    for (int i = 0; i < convs; ++i) {
      const int k = small ? rng.irange(3, 4) : rng.irange(2, 3);
      a += "; conv 3x3x" + num(k) + " s1 p1; relu";
    }
    if (rng.irange(0, 3) == 0) {  // occasionally end with a strided conv
      a = "input 5x5x" + num(cin) + "; conv 3x3x" + num(rng.irange(2, 3)) +
          " s2 p0; relu";
    }
    a += "; dense " + num(rng.irange(2, 4));
  } else {
    const int side = small ? 6 : rng.irange(4, 6);
    const int ch = small ? 3 : 2;
    a = "input " + num(side) + "x" + num(side) + "x" + num(rng.irange(1, 2));
    a += "; conv 3x3x" + num(ch) + " s1 p1; relu";
    a += "; block(conv 3x3x" + num(ch) + " s1 p1; relu | skip); relu";
    a += "; dense " + num(rng.irange(2, 4));
  }
  return a;
}

}  // namespace polycert::gen
