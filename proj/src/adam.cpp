#include "vaelab/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace vaelab {

void Adam::step(ParamSet& params, const std::vector<Eigen::MatrixXd>& grads) {
  if (grads.size() != params.size())
    throw std::invalid_argument("Adam::step: gradient count mismatch");

  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& p = params.at(static_cast<int>(i)).value;
      m_[i] = Eigen::MatrixXd::Zero(p.rows(), p.cols());
      v_[i] = Eigen::MatrixXd::Zero(p.rows(), p.cols());
    }
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = params.at(static_cast<int>(i));
    const Eigen::MatrixXd& g = grads[i];
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
      throw std::invalid_argument("Adam::step: shape mismatch for '" + p.name + "'");
    if (!g.allFinite())
      throw std::runtime_error("Adam::step: non-finite gradient for '" + p.name + "'");

    m_[i].array() = cfg_.beta1 * m_[i].array() + (1.0 - cfg_.beta1) * g.array();
    v_[i].array() = cfg_.beta2 * v_[i].array() + (1.0 - cfg_.beta2) * g.array().square();
    p.value.array() -= (cfg_.learning_rate / bc1) * m_[i].array() /
                       ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
  }
}

}  // namespace vaelab
