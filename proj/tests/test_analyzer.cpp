#include <vector>

#include "doctest.h"
#include "polycert/analyzer.hpp"
#include "polycert/gen.hpp"
#include "polycert/oracle.hpp"
#include "polycert/rng.hpp"
#include "test_util.hpp"

using namespace polycert;
using Q = mpq_class;
using QI = Interval<ExactRational>;

TEST_CASE("relu relaxation cases") {
  using P = ExactRational;
  SUBCASE("stable positive: identity") {
    NeuronRelax<P> r = relu_relaxation<P>(QI(Q(1, 2), Q(2)));
    CHECK(r.alpha == QI::point(Q(1)));
    CHECK(r.beta == QI::point(Q(0)));
    CHECK(r.gamma == QI::point(Q(1)));
    CHECK(r.delta == QI::point(Q(0)));
  }
  SUBCASE("stable negative: zero") {
    NeuronRelax<P> r = relu_relaxation<P>(QI(Q(-2), Q(0)));
    CHECK(r.alpha == QI::point(Q(0)));
    CHECK(r.gamma == QI::point(Q(0)));
    CHECK(r.delta == QI::point(Q(0)));
  }
  SUBCASE("unstable: chord above, best-area line below") {
    // l = -1, u = 3: chord slope 3/4, offset 3/4; u > -l picks slope 1 below.
    NeuronRelax<P> r = relu_relaxation<P>(QI(Q(-1), Q(3)));
    CHECK(r.gamma == QI::point(Q(3, 4)));
    CHECK(r.delta == QI::point(Q(3, 4)));
    CHECK(r.alpha == QI::point(Q(1)));
    CHECK(r.beta == QI::point(Q(0)));
    // l = -3, u = 1: area now favors slope 0 below.
    NeuronRelax<P> r2 = relu_relaxation<P>(QI(Q(-3), Q(1)));
    CHECK(r2.gamma == QI::point(Q(1, 4)));
    CHECK(r2.delta == QI::point(Q(3, 4)));
    CHECK(r2.alpha == QI::point(Q(0)));
  }
}

TEST_CASE("identity network: exact margins and verdicts") {
  const ModelDoc doc = testutil::identity_doc();
  const auto net = instantiate<ExactRational>(doc);
  const std::vector<Q> c = {Q(7, 10), Q(1, 10)};
  AnalysisOptions opt;

  SUBCASE("small radius verifies with margin 2/5") {
    const auto box = input_box<ExactRational>(c, Q(1, 10), true);
    const Verdict<ExactRational> v = verify_robustness(net, box, 0, opt);
    CHECK(v.verified);
    REQUIRE(v.margins.size() == 1);
    CHECK(v.margins[0].first == 1);
    CHECK(bool(v.margins[0].second == Q(2, 5)));
  }
  SUBCASE("large radius stays unknown with margin -1/5") {
    const auto box = input_box<ExactRational>(c, Q(2, 5), true);
    const Verdict<ExactRational> v = verify_robustness(net, box, 0, opt);
    CHECK(!v.verified);
    REQUIRE(v.margins.size() == 1);
    CHECK(bool(v.margins[0].second == Q(-1, 5)));
  }
  SUBCASE("widened mode agrees on both verdicts") {
    const auto fnet = instantiate<WidenedFloat64>(doc);
    const std::vector<double> fc = {0.7, 0.1};
    const Verdict<WidenedFloat64> v1 =
        verify_robustness(fnet, input_box<WidenedFloat64>(fc, 0.1, true), 0, opt);
    CHECK(v1.verified);
    CHECK(v1.margins[0].second == doctest::Approx(0.4).epsilon(1e-12));
    const Verdict<WidenedFloat64> v2 =
        verify_robustness(fnet, input_box<WidenedFloat64>(fc, 0.4, true), 0, opt);
    CHECK(!v2.verified);
    CHECK(v2.margins[0].second == doctest::Approx(-0.2).epsilon(1e-12));
  }
}

TEST_CASE("relu-free networks get the exact affine image") {
  const ModelDoc doc = testutil::make_dense_net(
      Shape{1, 1, 3},
      {testutil::DenseSpec{{{"1", "-1", "0.5"}, {"0", "2", "-1"}}, {"0.25", "0"}, false},
       testutil::DenseSpec{{{"1", "1"}, {"1", "-1"}}, {"0", "0.5"}, false}});
  const auto net = instantiate<ExactRational>(doc);
  std::vector<Q> c = {Q(1, 2), Q(1, 4), Q(3, 4)};
  const auto box = input_box<ExactRational>(c, Q(1, 8), true);
  AnalysisOptions opt;
  const auto r = analyze(net, box, opt);

  // Without relus the composed map is affine; backsubstitution to the input
  // yields the exact range of each output coordinate over the box.
  const auto ref = oracle::reference_analyze(doc, c, Q(1, 8), true, -1);
  for (size_t k = 0; k < r.state.bounds.size(); ++k)
    for (size_t j = 0; j < r.state.bounds[k].size(); ++j) {
      CHECK(bool(r.state.bounds[k][j].lo == ref.bounds[k][j].lo));
      CHECK(bool(r.state.bounds[k][j].hi == ref.bounds[k][j].hi));
    }

  // Hand check output 0: w = (1,-1,0.5)+(0,2,-1) = x0 + x1 - 0.5 x2 + 0.25.
  const QI o0 = r.state.bounds.back()[0];
  CHECK(bool(o0.lo == Q(1, 2) - Q(1, 8) + Q(1, 4) - Q(1, 8) - (Q(7, 8) * Q(1, 2)) + Q(1, 4)));
}

TEST_CASE("margins match explicit output differences") {
  // Three outputs; margins for label 1 are lower bounds of o1 - o0 and o1 - o2.
  const ModelDoc doc = testutil::make_dense_net(
      Shape{1, 1, 2},
      {testutil::DenseSpec{{{"1", "0"}, {"0", "1"}, {"0.5", "0.5"}}, {"0", "0.25", "0"}, false}});
  const auto net = instantiate<ExactRational>(doc);
  const std::vector<Q> c = {Q(1, 2), Q(1, 2)};
  AnalysisOptions opt;
  const auto v = verify_robustness(net, input_box<ExactRational>(c, Q(1, 16), true), 1, opt);
  REQUIRE(v.margins.size() == 2);
  CHECK(v.margins[0].first == 0);
  CHECK(v.margins[1].first == 2);
  // o1 - o0 = x1 - x0 + 1/4: min = -1/16 - 1/16*... both move opposite:
  // min = (1/2-1/16) is x1 low, x0 high -> -1/8 + 1/4 = 1/8.
  CHECK(bool(v.margins[0].second == Q(1, 8)));
  // o1 - o2 = x1/2 - x0/2 + 1/4: min = -1/16 + 1/4 = 3/16.
  CHECK(bool(v.margins[1].second == Q(3, 16)));
  CHECK(v.verified);
}

TEST_CASE("analysis refines forward intervals on random networks") {
  Rng rng{31337};
  for (int it = 0; it < 6; ++it) {
    const std::string arch = gen::sample_arch(rng, rng.irange(0, 4));
    const ModelDoc doc = gen::generate(3000 + it, arch);
    const auto net = instantiate<WidenedFloat64>(doc);
    std::vector<double> c;
    for (int i = 0; i < doc.input_shape.numel(); ++i)
      c.push_back(static_cast<double>(rng.irange(0, 256)) / 256.0);
    const auto box = input_box<WidenedFloat64>(c, 0.03, true);
    const auto fwd = forward_interval(net, box);
    AnalysisOptions opt;
    const auto r = analyze(net, box, opt);
    for (size_t k = 0; k < fwd.size(); ++k)
      for (size_t j = 0; j < fwd[k].size(); ++j) {
        CHECK(fwd[k][j].lo <= r.state.bounds[k][j].lo);
        CHECK(r.state.bounds[k][j].hi <= fwd[k][j].hi);
      }
  }
}

TEST_CASE("widened bounds contain rational bounds") {
  Rng rng{1123};
  for (int it = 0; it < 4; ++it) {
    const std::string arch = gen::sample_arch(rng, rng.irange(0, 3));
    const ModelDoc doc = gen::generate(4000 + it, arch);
    const auto fnet = instantiate<WidenedFloat64>(doc);
    const auto qnet = instantiate<ExactRational>(doc);
    std::vector<double> fc;
    std::vector<Q> qc;
    for (int i = 0; i < doc.input_shape.numel(); ++i) {
      const int k = rng.irange(0, 256);
      fc.push_back(static_cast<double>(k) / 256.0);
      qc.emplace_back(k, 256);
    }
    AnalysisOptions opt;
    const auto fr = analyze(fnet, input_box<WidenedFloat64>(fc, 0.0625, true), opt);
    const auto qr = analyze(qnet, input_box<ExactRational>(qc, Q(1, 16), true), opt);
    for (size_t k = 0; k < fr.state.bounds.size(); ++k)
      for (size_t j = 0; j < fr.state.bounds[k].size(); ++j) {
        CHECK(bool(Q(fr.state.bounds[k][j].lo) <= qr.state.bounds[k][j].lo));
        CHECK(bool(qr.state.bounds[k][j].hi <= Q(fr.state.bounds[k][j].hi)));
      }
  }
}

TEST_CASE("rejects invalid labels") {
  const ModelDoc doc = testutil::identity_doc();
  const auto net = instantiate<ExactRational>(doc);
  const auto box = input_box<ExactRational>({Q(1, 2), Q(1, 2)}, Q(1, 10), true);
  AnalysisOptions opt;
  CHECK_THROWS(verify_robustness(net, box, -1, opt));
  CHECK_THROWS(verify_robustness(net, box, 2, opt));
}
