#pragma once

#include <array>
#include <string>
#include <vector>

#include "vaelab/autodiff.hpp"
#include "vaelab/params.hpp"
#include "vaelab/rng.hpp"

namespace vaelab {

// Residual MLP: linear stem, `blocks` residual blocks with one ELU hidden
// layer of `width` neurons each, linear head. Parameters live in a ParamSet;
// the spec only stores indices, so the same network can be applied to any
// tape binding of that set.
struct ResidualMlpSpec {
  int in_dim = 0;
  int width = 0;
  int out_dim = 0;

  struct LinearIdx {
    int w = -1;
    int b = -1;
  };
  LinearIdx stem;
  std::vector<std::array<LinearIdx, 2>> blocks;
  LinearIdx head;

  // Registers freshly initialized parameters (prefix.stem_w, prefix.b0_w1, ...).
  static ResidualMlpSpec create(ParamSet& params, const std::string& prefix,
                                int in_dim, int width, int num_blocks,
                                int out_dim, Rng& rng, double head_scale = 0.1);

  // x: batch x in_dim, returns batch x out_dim.
  ad::Var apply(ad::Tape& tape, const std::vector<ad::Var>& bound,
                ad::Var x) const;
};

}  // namespace vaelab
