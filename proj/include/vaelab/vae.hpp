#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vaelab/autodiff.hpp"
#include "vaelab/mlp.hpp"
#include "vaelab/params.hpp"

namespace vaelab {

// log sigma values are clamped to this range everywhere (encoder scale,
// learned observation scales): sigma in [e^-7, e^2].
constexpr double kLogSigmaMin = -7.0;
constexpr double kLogSigmaMax = 2.0;

struct FixedScalar {
  double sigma = 1.0;
};
struct LearnedScalar {
  double init_log_sigma = 0.0;  // sigma = 1 at start of training
};
struct LearnedVector {};  // decoder emits a per-coordinate log sigma(z)

using ObsModelSpec = std::variant<FixedScalar, LearnedScalar, LearnedVector>;

std::string obs_model_name(const ObsModelSpec& obs);

struct VaeConfig {
  int data_dim = 2;
  int latent_dim = 2;
  int blocks = 4;
  int width = 200;
  ObsModelSpec obs_model = LearnedScalar{};
  double lambda_weight = 1.0;
  double learning_rate = 1e-3;
  int batch_size = 100;
  long steps = 20000;
};

void validate(const VaeConfig& cfg);

// KL(N(mu, diag(exp(log_sigma))^2) || N(0, I)) in closed form.
double kl_diag_standard(const Eigen::VectorXd& mu, const Eigen::VectorXd& log_sigma);

// Reconstruction negative log likelihoods of the two Gaussian observation
// models, without the (D/2) log 2pi constant (restored for reported ELBOs).
double recon_nll_scalar(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, double sigma);
double recon_nll_vector(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                        const Eigen::VectorXd& log_sigma);

// The lambda-weighted fixed-sigma loss equals lambda times the unweighted
// loss at this rescaled sigma, up to a parameter-independent constant.
double lambda_sigma_rescale(double sigma, double lambda);

class VaeModel {
 public:
  VaeModel(VaeConfig cfg, uint64_t init_seed);

  struct Bound {
    ad::Tape* tape = nullptr;
    std::vector<ad::Var> p;
  };
  Bound bind(ad::Tape& tape, bool trainable) const;

  struct EncoderVars {
    ad::Var mu, log_sigma;
  };
  struct DecoderVars {
    ad::Var mu;
    std::optional<ad::Var> log_sigma;  // LearnedVector only
  };
  struct LossVars {
    ad::Var recon, kl, total;
    EncoderVars enc;
    ad::Var z;
    DecoderVars dec;
  };

  EncoderVars encode_graph(const Bound& b, ad::Var x) const;
  DecoderVars decode_graph(const Bound& b, ad::Var z) const;

  // Single-sample reparametrized loss on a batch (rows = samples). recon and
  // kl are per-sample batch means; total = recon + lambda * kl.
  // sigma_override replaces the fixed sigma (schedule replay); only valid for
  // the FixedScalar observation model.
  LossVars loss_graph(const Bound& b, ad::Var x, ad::Var eps,
                      std::optional<double> sigma_override = {}) const;

  // Gradient-free forward passes.
  struct EncoderOutput {
    Eigen::MatrixXd mu, log_sigma;
  };
  struct DecoderOutput {
    Eigen::MatrixXd mu;
    std::optional<Eigen::MatrixXd> log_sigma;
  };
  EncoderOutput encode(const Eigen::MatrixXd& X) const;
  DecoderOutput decode(const Eigen::MatrixXd& Z) const;

  // Per-row log p(x|z) with every constant restored, given decoder outputs.
  Eigen::VectorXd log_likelihood_rows(const Eigen::MatrixXd& X,
                                      const DecoderOutput& dec) const;

  // Current scalar sigma (FixedScalar and LearnedScalar only).
  double scalar_sigma() const;

  const VaeConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  int log_sigma_index() const { return log_sigma_idx_; }

 private:
  VaeConfig cfg_;
  ParamSet params_;
  ResidualMlpSpec encoder_, decoder_;
  int log_sigma_idx_ = -1;
};

// Checkpoints are a flat binary list of named 64-bit-float arrays with
// shapes; save/load round trips are bit exact.
void save_checkpoint(const std::string& path, const ParamSet& params);
std::vector<Param> load_checkpoint(const std::string& path);
void load_into(ParamSet& params, const std::vector<Param>& loaded);

}  // namespace vaelab
