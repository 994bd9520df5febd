#include "vaelab/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "vaelab/rng.hpp"

namespace vaelab {

namespace {

constexpr char kCheckpointMagic[] = "VAELABCK1\n";

double clamped_log_sigma(double log_sigma) {
  return std::clamp(log_sigma, kLogSigmaMin, kLogSigmaMax);
}

}  // namespace

std::string obs_model_name(const ObsModelSpec& obs) {
  if (std::holds_alternative<FixedScalar>(obs)) return "fixed-scalar";
  if (std::holds_alternative<LearnedScalar>(obs)) return "learned-scalar";
  return "learned-vector";
}

void validate(const VaeConfig& cfg) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("VaeConfig: ") + what);
  };
  require(cfg.data_dim >= 1, "data_dim must be positive");
  require(cfg.latent_dim >= 1, "latent_dim must be positive");
  require(cfg.blocks >= 0, "blocks must be non-negative");
  require(cfg.width >= 1, "width must be positive");
  require(cfg.lambda_weight >= 0, "lambda_weight must be non-negative");
  require(cfg.learning_rate > 0, "learning_rate must be positive");
  require(cfg.batch_size >= 1, "batch_size must be positive");
  require(cfg.steps >= 1, "steps must be positive");
  if (const auto* f = std::get_if<FixedScalar>(&cfg.obs_model))
    require(f->sigma > 0, "sigma must be positive");
}

double kl_diag_standard(const Eigen::VectorXd& mu, const Eigen::VectorXd& log_sigma) {
  if (mu.size() != log_sigma.size())
    throw std::invalid_argument("kl_diag_standard: dimension mismatch");
  const auto var = (2.0 * log_sigma.array()).exp();
  return 0.5 * (mu.array().square() + var - 1.0 - 2.0 * log_sigma.array()).sum();
}

double recon_nll_scalar(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, double sigma) {
  if (x.size() != mu.size())
    throw std::invalid_argument("recon_nll_scalar: dimension mismatch");
  if (!(sigma > 0)) throw std::invalid_argument("recon_nll_scalar: sigma must be positive");
  const double sq = (x - mu).squaredNorm();
  return sq / (2.0 * sigma * sigma) + static_cast<double>(x.size()) * std::log(sigma);
}

double recon_nll_vector(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                        const Eigen::VectorXd& log_sigma) {
  if (x.size() != mu.size() || x.size() != log_sigma.size())
    throw std::invalid_argument("recon_nll_vector: dimension mismatch");
  const auto r2 = (x - mu).array().square();
  return (0.5 * r2 * (-2.0 * log_sigma.array()).exp() + log_sigma.array()).sum();
}

double lambda_sigma_rescale(double sigma, double lambda) {
  if (!(sigma > 0) || !(lambda > 0))
    throw std::invalid_argument("lambda_sigma_rescale: arguments must be positive");
  return sigma * std::sqrt(lambda);
}

VaeModel::VaeModel(VaeConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
  validate(cfg_);
  Rng rng(init_seed);
  encoder_ = ResidualMlpSpec::create(params_, "enc", cfg_.data_dim, cfg_.width,
                                     cfg_.blocks, 2 * cfg_.latent_dim, rng);
  const int dec_out = std::holds_alternative<LearnedVector>(cfg_.obs_model)
                          ? 2 * cfg_.data_dim
                          : cfg_.data_dim;
  decoder_ = ResidualMlpSpec::create(params_, "dec", cfg_.latent_dim, cfg_.width,
                                     cfg_.blocks, dec_out, rng);
  if (const auto* ls = std::get_if<LearnedScalar>(&cfg_.obs_model))
    log_sigma_idx_ = params_.add(
        "obs.log_sigma", Eigen::MatrixXd::Constant(1, 1, ls->init_log_sigma));
}

VaeModel::Bound VaeModel::bind(ad::Tape& tape, bool trainable) const {
  Bound b;
  b.tape = &tape;
  b.p.reserve(params_.size());
  for (const Param& p : params_) b.p.push_back(tape.leaf(p.value, trainable, p.name));
  return b;
}

VaeModel::EncoderVars VaeModel::encode_graph(const Bound& b, ad::Var x) const {
  ad::Tape& t = *b.tape;
  ad::Var out = encoder_.apply(t, b.p, x);
  EncoderVars enc;
  enc.mu = t.slice_cols(out, 0, cfg_.latent_dim);
  enc.log_sigma = t.clamp(t.slice_cols(out, cfg_.latent_dim, cfg_.latent_dim),
                          kLogSigmaMin, kLogSigmaMax);
  return enc;
}

VaeModel::DecoderVars VaeModel::decode_graph(const Bound& b, ad::Var z) const {
  ad::Tape& t = *b.tape;
  ad::Var out = decoder_.apply(t, b.p, z);
  DecoderVars dec;
  if (std::holds_alternative<LearnedVector>(cfg_.obs_model)) {
    dec.mu = t.slice_cols(out, 0, cfg_.data_dim);
    dec.log_sigma = t.clamp(t.slice_cols(out, cfg_.data_dim, cfg_.data_dim),
                            kLogSigmaMin, kLogSigmaMax);
  } else {
    dec.mu = out;
  }
  return dec;
}

VaeModel::LossVars VaeModel::loss_graph(const Bound& b, ad::Var x, ad::Var eps,
                                        std::optional<double> sigma_override) const {
  if (sigma_override && !std::holds_alternative<FixedScalar>(cfg_.obs_model))
    throw std::invalid_argument("loss_graph: sigma override requires a fixed-scalar model");
  if (x.cols() != cfg_.data_dim)
    throw std::invalid_argument("loss_graph: data dimension mismatch");
  if (eps.rows() != x.rows() || eps.cols() != cfg_.latent_dim)
    throw std::invalid_argument("loss_graph: eps must be batch x latent_dim");

  ad::Tape& t = *b.tape;
  const double inv_m = 1.0 / static_cast<double>(x.rows());
  const double d = static_cast<double>(cfg_.data_dim);

  LossVars out;
  out.enc = encode_graph(b, x);
  ad::Var sigma_z = t.exp(out.enc.log_sigma);
  out.z = out.enc.mu + sigma_z * eps;
  out.dec = decode_graph(b, out.z);

  // KL(q(z|x) || N(0, I)), mean over the batch
  ad::Var kl_per = 0.5 * rowwise_sum(square(out.enc.mu) + square(sigma_z) -
                                     2.0 * out.enc.log_sigma - 1.0);
  out.kl = inv_m * sum(kl_per);

  ad::Var r = x - out.dec.mu;
  if (const auto* f = std::get_if<FixedScalar>(&cfg_.obs_model)) {
    const double sigma = sigma_override.value_or(f->sigma);
    if (!(sigma > 0)) throw std::invalid_argument("loss_graph: sigma must be positive");
    out.recon = sum(square(r)) * (inv_m / (2.0 * sigma * sigma)) + d * std::log(sigma);
  } else if (std::holds_alternative<LearnedScalar>(cfg_.obs_model)) {
    ad::Var ls = t.clamp(b.p[static_cast<size_t>(log_sigma_idx_)], kLogSigmaMin,
                         kLogSigmaMax);
    out.recon = (sum(square(r)) * (0.5 * inv_m)) * vexp(-2.0 * ls) + d * ls;
  } else {
    ad::Var lsx = *out.dec.log_sigma;
    ad::Var per = 0.5 * (square(r) * vexp(-2.0 * lsx)) + lsx;
    out.recon = inv_m * sum(per);
  }

  out.total = out.recon + cfg_.lambda_weight * out.kl;
  return out;
}

VaeModel::EncoderOutput VaeModel::encode(const Eigen::MatrixXd& X) const {
  ad::Tape tape;
  Bound b = bind(tape, false);
  EncoderVars enc = encode_graph(b, tape.leaf(X));
  EncoderOutput out{enc.mu.value(), enc.log_sigma.value()};
  if (!out.mu.allFinite() || !out.log_sigma.allFinite())
    throw std::runtime_error("encode: non-finite activations");
  return out;
}

VaeModel::DecoderOutput VaeModel::decode(const Eigen::MatrixXd& Z) const {
  ad::Tape tape;
  Bound b = bind(tape, false);
  DecoderVars dec = decode_graph(b, tape.leaf(Z));
  DecoderOutput out;
  out.mu = dec.mu.value();
  if (dec.log_sigma) out.log_sigma = dec.log_sigma->value();
  if (!out.mu.allFinite() || (out.log_sigma && !out.log_sigma->allFinite()))
    throw std::runtime_error("decode: non-finite activations");
  return out;
}

Eigen::VectorXd VaeModel::log_likelihood_rows(const Eigen::MatrixXd& X,
                                              const DecoderOutput& dec) const {
  const double d = static_cast<double>(cfg_.data_dim);
  const double log2pi = std::log(2.0 * M_PI);
  Eigen::ArrayXXd r2 = (X - dec.mu).array().square();
  if (std::holds_alternative<LearnedVector>(cfg_.obs_model)) {
    if (!dec.log_sigma)
      throw std::invalid_argument("log_likelihood_rows: missing log_sigma output");
    const auto& ls = dec.log_sigma->array();
    return (-0.5 * r2 * (-2.0 * ls).exp() - ls - 0.5 * log2pi).rowwise().sum();
  }
  const double sigma = scalar_sigma();
  return (-0.5 / (sigma * sigma)) * r2.rowwise().sum() -
         Eigen::ArrayXd::Constant(X.rows(), d * (std::log(sigma) + 0.5 * log2pi));
}

double VaeModel::scalar_sigma() const {
  if (const auto* f = std::get_if<FixedScalar>(&cfg_.obs_model)) return f->sigma;
  if (std::holds_alternative<LearnedScalar>(cfg_.obs_model))
    return std::exp(clamped_log_sigma(params_.at(log_sigma_idx_).value(0, 0)));
  throw std::logic_error("scalar_sigma: learned-vector model has no scalar sigma");
}

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const uint64_t count = params.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const Param& p : params) {
    const uint32_t name_len = static_cast<uint32_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(p.name.data(), name_len);
    const uint64_t rows = static_cast<uint64_t>(p.value.rows());
    const uint64_t cols = static_cast<uint64_t>(p.value.cols());
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

std::vector<Param> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<Param> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
    in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
    if (!in || rows == 0 || cols == 0)
      throw std::runtime_error("load_checkpoint: truncated entry in " + path);
    Eigen::MatrixXd value(rows, cols);
    in.read(reinterpret_cast<char*>(value.data()),
            static_cast<std::streamsize>(sizeof(double) * value.size()));
    if (!in) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    out.push_back({std::move(name), std::move(value)});
  }
  return out;
}

void load_into(ParamSet& params, const std::vector<Param>& loaded) {
  if (loaded.size() != params.size())
    throw std::runtime_error("load_into: parameter count mismatch");
  for (const Param& l : loaded) {
    const int idx = params.find(l.name);
    if (idx < 0) throw std::runtime_error("load_into: unknown parameter '" + l.name + "'");
    Param& p = params.at(idx);
    if (p.value.rows() != l.value.rows() || p.value.cols() != l.value.cols())
      throw std::runtime_error("load_into: shape mismatch for '" + l.name + "'");
    p.value = l.value;
  }
}

}  // namespace vaelab
