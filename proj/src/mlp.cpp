#include "vaelab/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace vaelab {

namespace {

Eigen::MatrixXd init_weight(int in, int out, double scale, Rng& rng) {
  return rng.normal_matrix(in, out) * (scale / std::sqrt(static_cast<double>(in)));
}

}  // namespace

ResidualMlpSpec ResidualMlpSpec::create(ParamSet& params, const std::string& prefix,
                                        int in_dim, int width, int num_blocks,
                                        int out_dim, Rng& rng, double head_scale) {
  if (in_dim < 1 || width < 1 || num_blocks < 0 || out_dim < 1)
    throw std::invalid_argument("ResidualMlpSpec: dimensions must be positive");

  ResidualMlpSpec spec;
  spec.in_dim = in_dim;
  spec.width = width;
  spec.out_dim = out_dim;

  spec.stem.w = params.add(prefix + ".stem_w", init_weight(in_dim, width, 1.0, rng));
  spec.stem.b = params.add(prefix + ".stem_b", Eigen::MatrixXd::Zero(1, width));

  for (int k = 0; k < num_blocks; ++k) {
    const std::string bp = prefix + ".b" + std::to_string(k);
    std::array<LinearIdx, 2> block;
    block[0].w = params.add(bp + "_w1", init_weight(width, width, 1.0, rng));
    block[0].b = params.add(bp + "_b1", Eigen::MatrixXd::Zero(1, width));
    // residual branch output scaled down so the stack starts near identity
    block[1].w = params.add(bp + "_w2", init_weight(width, width, 0.5, rng));
    block[1].b = params.add(bp + "_b2", Eigen::MatrixXd::Zero(1, width));
    spec.blocks.push_back(block);
  }

  spec.head.w = params.add(prefix + ".head_w", init_weight(width, out_dim, head_scale, rng));
  spec.head.b = params.add(prefix + ".head_b", Eigen::MatrixXd::Zero(1, out_dim));
  return spec;
}

ad::Var ResidualMlpSpec::apply(ad::Tape& tape, const std::vector<ad::Var>& bound,
                               ad::Var x) const {
  if (x.cols() != in_dim)
    throw std::invalid_argument("ResidualMlpSpec::apply: input has " +
                                std::to_string(x.cols()) + " columns, expected " +
                                std::to_string(in_dim));
  ad::Var h = tape.matmul(x, bound[static_cast<size_t>(stem.w)]) +
              bound[static_cast<size_t>(stem.b)];
  for (const auto& block : blocks) {
    ad::Var inner = ad::elu(tape.matmul(h, bound[static_cast<size_t>(block[0].w)]) +
                            bound[static_cast<size_t>(block[0].b)]);
    inner = tape.matmul(inner, bound[static_cast<size_t>(block[1].w)]) +
            bound[static_cast<size_t>(block[1].b)];
    h = h + inner;
  }
  return tape.matmul(h, bound[static_cast<size_t>(head.w)]) +
         bound[static_cast<size_t>(head.b)];
}

}  // namespace vaelab
