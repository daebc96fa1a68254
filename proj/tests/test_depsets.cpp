#include <array>
#include <set>
#include <vector>

#include "doctest.h"
#include "polycert/depsets.hpp"
#include "polycert/gen.hpp"
#include "polycert/oracle.hpp"

using namespace polycert;

namespace {

ConvStep step(int f, int s, int p = 0) { return ConvStep{f, f, s, s, p, p}; }

// In-grid cells of a cuboid as (w, h, c) triples in the given layer's grid.
std::set<std::array<int, 3>> cuboid_cells(const DepCuboid& d, const Shape& grid) {
  std::set<std::array<int, 3>> cells;
  for (int dh = 0; dh < d.width_h; ++dh)
    for (int dw = 0; dw < d.width_w; ++dw) {
      const long long w = d.origin_w + dw, h = d.origin_h + dh;
      if (w < 0 || h < 0 || w >= grid.w || h >= grid.h) continue;
      for (int c = 0; c < d.channels; ++c)
        cells.insert({static_cast<int>(w), static_cast<int>(h), c});
    }
  return cells;
}

}  // namespace

TEST_CASE("window-width recurrence") {
  CHECK(grow_width(1, 3, 1) == 3);
  CHECK(grow_width(3, 2, 1) == 4);
  CHECK(grow_width(3, 3, 2) == 7);
  CHECK(grow_width(1, 1, 3) == 1);  // 1x1 filters never widen

  // Walk-back through (f3 s1) then (f2 s1): widths 1 -> 3 -> 4,
  // cuboid sizes over 2 channels: 18 and 32.
  std::vector<ConvStep> chain = {step(3, 1), step(2, 1)};
  CHECK(dep_width(std::span<const ConvStep>(chain.data(), 1)) ==
        std::pair<int, int>{3, 3});
  CHECK(dep_width(chain) == std::pair<int, int>{4, 4});
  CHECK(dep_size({3, 3}, 2) == 18);
  CHECK(dep_size({4, 4}, 2) == 32);

  // Strided chain: (f3 s2) twice gives widths 1 -> 3 -> 7.
  std::vector<ConvStep> strided = {step(3, 2), step(3, 2)};
  CHECK(dep_width(strided) == std::pair<int, int>{7, 7});
}

TEST_CASE("accumulated stride and origin recurrence") {
  std::vector<ConvStep> strided = {step(3, 2), step(3, 2)};
  const AccumulatedStride s = accumulated_stride(strided);
  CHECK(s.sw == 4);
  CHECK(s.sh == 4);

  CHECK(step_origin(3, 2, 0) == 6);
  CHECK(step_origin(0, 1, 1) == -1);  // hangs over the padding border

  // With zero padding the origin is S * w.
  std::vector<ConvStep> nopad = {step(3, 2, 0)};
  CHECK(dep_position(3, 5, nopad) == std::pair<long long, long long>{6, 10});

  // Padding shifts the origin back at each step: w=0 under p=1 goes negative.
  std::vector<ConvStep> padded = {step(3, 1, 1), step(3, 1, 1)};
  CHECK(dep_position(0, 0, padded) == std::pair<long long, long long>{-2, -2});
}

TEST_CASE("first dependence sets per layer kind") {
  const ModelDoc doc = gen::generate(
      3, "input 6x6x2; conv 3x3x2 s1 p1; relu; conv 2x2x3 s2 p0; relu; dense 4");

  SUBCASE("conv window") {
    DepCuboid d = dep_set_first(doc, 3, 1, 2, 0);  // the s2 p0 conv
    CHECK(d.layer == 2);
    CHECK(d.width_w == 2);
    CHECK(d.width_h == 2);
    CHECK(d.origin_w == 2);
    CHECK(d.origin_h == 4);
    CHECK(d.channels == 2);
  }
  SUBCASE("padded conv window hangs over the border") {
    DepCuboid d = dep_set_first(doc, 1, 0, 0, 1);
    CHECK(d.origin_w == -1);
    CHECK(d.origin_h == -1);
    CHECK(d.width_w == 3);
  }
  SUBCASE("dense depends on the whole grid") {
    DepCuboid d = dep_set_first(doc, 5, 0, 0, 2);
    CHECK(d.layer == 4);
    CHECK(d.width_w == doc.layers[4].out_shape.w);
    CHECK(d.width_h == doc.layers[4].out_shape.h);
    CHECK(d.channels == doc.layers[4].out_shape.c);
    CHECK(d.origin_w == 0);
  }
  SUBCASE("relu depends on its own column") {
    DepCuboid d = dep_set_first(doc, 2, 3, 4, 1);
    CHECK(d.layer == 1);
    CHECK(d.width_w == 1);
    CHECK(d.width_h == 1);
    CHECK(d.origin_w == 3);
    CHECK(d.origin_h == 4);
  }
  SUBCASE("input layer has none") {
    CHECK_THROWS_AS(dep_set_first(doc, 0, 0, 0, 0), std::invalid_argument);
  }
}

TEST_CASE("join split and branch composition") {
  const ModelDoc doc = gen::generate(
      9, "input 6x6x2; block(conv 3x3x2 s1 p1; relu; conv 3x3x2 s1 p1 | skip); dense 3");
  int join_id = -1;
  for (const auto& l : doc.layers)
    if (l.kind == LayerKind::Join) join_id = l.id;
  REQUIRE(join_id > 0);

  auto [a, b] = dep_split_residual(doc, join_id, 2, 3);
  CHECK(a.width_w == 1);
  CHECK(b.width_w == 1);
  CHECK(a.origin_w == 2);
  CHECK(b.origin_h == 3);
  CHECK(a.layer != b.layer);

  const int head = join_head(doc, join_id);
  // Conv branch composes two 3x3 s1 p1 filters into a 5x5 window at the head.
  DepCuboid cb = dep_branch_to_head(doc, join_id, 2, 3, 0);
  CHECK(cb.layer == head);
  CHECK(cb.width_w == 5);
  CHECK(cb.width_h == 5);
  CHECK(cb.origin_w == 0);
  CHECK(cb.origin_h == 1);
  // Identity skip stays a single column.
  DepCuboid sb = dep_branch_to_head(doc, join_id, 2, 3, 1);
  CHECK(sb.layer == head);
  CHECK(sb.width_w == 1);
  CHECK(sb.origin_w == 2);
}

TEST_CASE("cuboid geometry equals breadth-first reach on conv chains") {
  // Small sweep here; the acceptance suite runs the full product.
  for (int f : {2, 3})
    for (int s : {1, 2})
      for (int p : {0, 1}) {
        const int g = 6;
        if ((g + 2 * p - f) % s != 0 || g + 2 * p < f) continue;
        std::string arch = "input " + std::to_string(g) + "x" + std::to_string(g) +
                           "x2";
        std::vector<ConvStep> chain;
        Shape grid{g, g, 2};
        std::vector<Shape> grids = {grid};
        int cur = g;
        for (int depth = 0; depth < 2; ++depth) {
          if ((cur + 2 * p - f) % s != 0 || cur + 2 * p < f) break;
          arch += "; conv " + std::to_string(f) + "x" + std::to_string(f) +
                  "x2 s" + std::to_string(s) + " p" + std::to_string(p);
          cur = (cur + 2 * p - f) / s + 1;
          grids.push_back(Shape{cur, cur, 2});
          chain.push_back(step(f, s, p));
        }
        if (chain.empty()) continue;
        const ModelDoc doc = gen::generate(100 + f * 10 + s, arch);
        const int last = static_cast<int>(doc.layers.size()) - 1;

        // Query a few positions in the deepest layer; compare every prefix.
        for (int qw : {0, cur - 1})
          for (int qh : {0, cur / 2}) {
            for (size_t m = 1; m <= chain.size(); ++m) {
              std::vector<ConvStep> pre(chain.rbegin(), chain.rbegin() + m);
              auto [ww, wh] = dep_width(pre);
              auto [ow, oh] = dep_position(qw, qh, pre);
              DepCuboid d;
              d.layer = last - static_cast<int>(m);
              d.origin_w = ow;
              d.origin_h = oh;
              d.width_w = ww;
              d.width_h = wh;
              d.channels = 2;
              const Shape in_grid = grids[grids.size() - 1 - m];
              auto mine = cuboid_cells(d, in_grid);

              auto truth = oracle::reach(doc, last, qw, qh, 0, static_cast<int>(m));
              std::set<std::array<int, 3>> expect;
              for (const auto& [k, w, h, c] : truth) {
                REQUIRE(k == d.layer);
                expect.insert({w, h, c});
              }
              CHECK(mine == expect);
            }
          }
      }
}
