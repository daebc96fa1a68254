#include <cstdio>
#include <fstream>
#include <string>

#include "doctest.h"
#include "polycert/gen.hpp"
#include "polycert/network.hpp"
#include "test_util.hpp"

using namespace polycert;
using Q = mpq_class;

namespace {

LayerDoc conv_layer(int id, int pred, int fw, int fh, int cin, int cout, int s, int p) {
  LayerDoc l;
  l.id = id;
  l.kind = LayerKind::Conv;
  l.preds = {pred};
  l.fw = fw;
  l.fh = fh;
  l.cin = cin;
  l.cout = cout;
  l.sw = l.sh = s;
  l.pw = l.ph = p;
  l.filter.assign(static_cast<size_t>(fw) * fh * cin * cout, "0");
  l.bias.assign(static_cast<size_t>(cout), "0");
  return l;
}

ModelDoc conv_doc(Shape input, int fw, int fh, int cout, int s, int p) {
  ModelDoc doc;
  doc.input_shape = input;
  LayerDoc in;
  in.id = 0;
  doc.layers.push_back(in);
  doc.layers.push_back(conv_layer(1, 0, fw, fh, input.c, cout, s, p));
  return doc;
}

}  // namespace

TEST_CASE("flat layout law: channels innermost, then width, then height") {
  Shape s{5, 4, 3};
  CHECK(flat_index(s, 0, 0, 0) == 0);
  CHECK(flat_index(s, 0, 0, 2) == 2);
  CHECK(flat_index(s, 1, 0, 0) == 3);
  CHECK(flat_index(s, 0, 1, 0) == 15);
  CHECK(flat_index(s, 4, 3, 2) == s.numel() - 1);
}

TEST_CASE("conv shape inference") {
  SUBCASE("5x5 f3 s1 p0 -> 3x3") {
    ModelDoc d = conv_doc(Shape{5, 5, 2}, 3, 3, 4, 1, 0);
    validate_model(d);
    CHECK(d.layers[1].out_shape == Shape{3, 3, 4});
  }
  SUBCASE("5x5 f3 s1 p1 -> 5x5") {
    ModelDoc d = conv_doc(Shape{5, 5, 1}, 3, 3, 2, 1, 1);
    validate_model(d);
    CHECK(d.layers[1].out_shape == Shape{5, 5, 2});
  }
  SUBCASE("5x5 f3 s2 p1 -> 3x3") {
    ModelDoc d = conv_doc(Shape{5, 5, 1}, 3, 3, 1, 2, 1);
    validate_model(d);
    CHECK(d.layers[1].out_shape == Shape{3, 3, 1});
  }
  SUBCASE("non-exact tiling is rejected") {
    ModelDoc d = conv_doc(Shape{4, 4, 1}, 3, 3, 1, 2, 0);
    CHECK_THROWS_WITH_AS(validate_model(d),
                         doctest::Contains("layer 1"), std::runtime_error);
  }
  SUBCASE("channel mismatch is rejected") {
    ModelDoc d = conv_doc(Shape{4, 4, 3}, 3, 3, 1, 1, 0);  // cin says 3? no: input.c=3
    d.layers[1].cin = 2;  // disagrees with the predecessor
    d.layers[1].filter.assign(3 * 3 * 2 * 1, "0");
    CHECK_THROWS_AS(validate_model(d), std::runtime_error);
  }
}

TEST_CASE("structural validation rejects malformed docs") {
  SUBCASE("relu fed by relu") {
    ModelDoc d = testutil::identity_doc();
    LayerDoc r1;
    r1.id = 2;
    r1.kind = LayerKind::Relu;
    r1.preds = {1};
    LayerDoc r2 = r1;
    r2.id = 3;
    r2.preds = {2};
    d.layers.push_back(r1);
    d.layers.push_back(r2);
    CHECK_THROWS_WITH_AS(validate_model(d),
                         doctest::Contains("layer 3"), std::runtime_error);
  }
  SUBCASE("non-consecutive ids") {
    ModelDoc d = testutil::identity_doc();
    d.layers[1].id = 5;
    CHECK_THROWS_AS(validate_model(d), std::runtime_error);
  }
  SUBCASE("dense weight row width mismatch") {
    ModelDoc d = testutil::identity_doc();
    d.layers[1].weights[0].push_back("1");
    CHECK_THROWS_AS(validate_model(d), std::runtime_error);
  }
  SUBCASE("join with mismatched branch shapes") {
    ModelDoc d;
    d.input_shape = Shape{4, 4, 1};
    LayerDoc in;
    in.id = 0;
    d.layers.push_back(in);
    d.layers.push_back(conv_layer(1, 0, 3, 3, 1, 1, 1, 1));  // 4x4x1
    d.layers.push_back(conv_layer(2, 0, 3, 3, 1, 2, 1, 1));  // 4x4x2
    LayerDoc j;
    j.id = 3;
    j.kind = LayerKind::Join;
    j.preds = {1, 2};
    d.layers.push_back(j);
    CHECK_THROWS_AS(validate_model(d), std::runtime_error);
  }
}

TEST_CASE("join shape and head on a residual block") {
  ModelDoc d;
  d.input_shape = Shape{4, 4, 2};
  LayerDoc in;
  in.id = 0;
  d.layers.push_back(in);
  d.layers.push_back(conv_layer(1, 0, 3, 3, 2, 2, 1, 1));  // branch a
  LayerDoc r;
  r.id = 2;
  r.kind = LayerKind::Relu;
  r.preds = {1};
  d.layers.push_back(r);
  d.layers.push_back(conv_layer(3, 2, 3, 3, 2, 2, 1, 1));
  LayerDoc j;
  j.id = 4;
  j.kind = LayerKind::Join;
  j.preds = {3, 0};  // identity skip from the input
  d.layers.push_back(j);
  validate_model(d);
  CHECK(d.layers[4].out_shape == Shape{4, 4, 2});
  CHECK(join_head(d, 4) == 0);

  BranchTrace t = trace_branch(d, 3, 0);
  CHECK(t.stride_w == 1);
  CHECK(t.stride_h == 1);
}

TEST_CASE("model JSON round-trips byte-identically") {
  const ModelDoc doc = gen::generate(11, "input 6x6x2; conv 3x3x3 s1 p1; relu; dense 5");
  const std::string text = model_to_json_text(doc);
  CHECK(text.back() == '\n');
  ModelDoc re = model_from_json_text(text);
  CHECK(model_to_json_text(re) == text);
  CHECK(re.input_shape == doc.input_shape);
  CHECK(re.layers.size() == doc.layers.size());

  const std::string path = "roundtrip_model.json";
  save_model(doc, path);
  ModelDoc loaded = load_model(path);
  CHECK(model_to_json_text(loaded) == text);
  std::remove(path.c_str());
}

TEST_CASE("malformed model JSON is rejected") {
  CHECK_THROWS(model_from_json_text("{}"));
  CHECK_THROWS(model_from_json_text("not json"));
  CHECK_THROWS(model_from_json_text("{\"format\":\"wrong-tag\"}"));
}

TEST_CASE("instantiate places weights by the documented layout") {
  // Conv with distinct filter entries: check filter_at against the flat law.
  ModelDoc d = conv_doc(Shape{3, 3, 2}, 2, 2, 3, 1, 0);
  for (size_t i = 0; i < d.layers[1].filter.size(); ++i)
    d.layers[1].filter[i] = std::to_string(i);
  validate_model(d);
  const Network<ExactRational> net = instantiate<ExactRational>(d);
  const Layer<ExactRational>& L = net.layers[1];
  for (int fy = 0; fy < 2; ++fy)
    for (int fx = 0; fx < 2; ++fx)
      for (int ci = 0; ci < 2; ++ci)
        for (int co = 0; co < 3; ++co) {
          const int flat = ((fy * 2 + fx) * 2 + ci) * 3 + co;
          CHECK(bool(filter_at(L, fx, fy, ci, co) == Q(flat)));
        }

  // Dense rows flatten [out][in] -> out * n_in + in.
  const ModelDoc id2 = testutil::identity_doc();
  const Network<ExactRational> inet = instantiate<ExactRational>(id2);
  CHECK(bool(inet.layers[1].weights[0] == Q(1)));
  CHECK(bool(inet.layers[1].weights[1] == Q(0)));
  CHECK(bool(inet.layers[1].weights[2] == Q(0)));
  CHECK(bool(inet.layers[1].weights[3] == Q(1)));
}

TEST_CASE("input_box widens then clamps") {
  using P = WidenedFloat64;
  std::vector<double> c = {0.7, 0.1};
  InputBox<P> b = input_box<P>(c, 0.4, true);
  CHECK(b.pixels[0].lo == doctest::Approx(0.3));
  CHECK(b.pixels[0].hi == 1.0);  // clamped exactly
  CHECK(b.pixels[1].lo == 0.0);
  CHECK(b.pixels[1].hi == doctest::Approx(0.5));
  // The widened box must contain the nominal ball even before clamping.
  CHECK(b.pixels[0].lo <= 0.7 - 0.4 + 1e-15);

  InputBox<ExactRational> rb =
      input_box<ExactRational>({Q(7, 10), Q(1, 10)}, Q(2, 5), true);
  CHECK(rb.pixels[0] == Interval<ExactRational>(Q(3, 10), Q(1)));
  CHECK(rb.pixels[1] == Interval<ExactRational>(Q(0), Q(1, 2)));

  CHECK_THROWS_AS(input_box<P>({0.5}, -0.1, true), std::invalid_argument);
  CHECK_THROWS_AS(input_box<P>({1.5}, 0.1, true), std::invalid_argument);
  CHECK_NOTHROW(input_box<P>({1.5}, 0.1, false));  // unclamped: any center
}

TEST_CASE("load_inputs parses CSV rows") {
  const std::string path = "inputs_test.csv";
  {
    std::ofstream f(path);
    f << "0.5,0.25\n0,1\n";
  }
  auto rows = load_inputs(path);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == std::vector<std::string>{"0.5", "0.25"});
  CHECK(rows[1] == std::vector<std::string>{"0", "1"});
  std::remove(path.c_str());
  CHECK_THROWS(load_inputs("does_not_exist.csv"));
}
