// gen.hpp — seeded model and input generation from a compact architecture
// grammar.
//
// Grammar (statements separated by ';', whitespace free-form):
//
//   input WxHxC                     first statement, the input grid
//   conv FWxFHxCOUT [sS] [pP]       convolution; stride and padding are
//                                   symmetric, defaulting to s1 p0; the
//                                   strides must tile the padded input
//                                   exactly
//   relu
//   dense N
//   block( CHAIN | CHAIN )          residual block: both branch chains run
//                                   from the current layer and re-join by
//                                   elementwise addition; `skip` is the
//                                   identity branch
//
// Example:
//   input 8x8x2; conv 3x3x4 s1 p1; relu;
//   block(conv 3x3x4 s1 p1; relu | skip); relu; dense 10
//
// Weights are dyadic rationals (exact in every numeric mode), scaled by
// fan-in so activations stay O(1).  Draw order is fixed, so one seed and
// architecture always produce byte-identical model files.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "polycert/network.hpp"
#include "polycert/rng.hpp"

namespace polycert::gen {

ModelDoc generate(uint64_t seed, const std::string& arch);

// `count` input vectors of `dim` decimal values on the 1/256 grid in [0,1].
std::vector<std::vector<std::string>> random_inputs(uint64_t seed, int count, int dim);

// Random architecture strings for corpus building.
// size_class 0: tiny nets (order 100 neurons); 1: small nets (order 500).
std::string sample_arch(Rng& rng, int size_class);

}  // namespace polycert::gen
