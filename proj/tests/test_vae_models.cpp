#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "vaelab/rng.hpp"
#include "vaelab/vae.hpp"

using namespace vaelab;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using Eigen::VectorXd;

namespace {

VaeConfig small_config(ObsModelSpec obs, int data_dim = 2) {
  VaeConfig cfg;
  cfg.data_dim = data_dim;
  cfg.latent_dim = 2;
  cfg.blocks = 2;
  cfg.width = 12;
  cfg.obs_model = std::move(obs);
  cfg.batch_size = 4;
  return cfg;
}

void zero_head(VaeModel& model, const std::string& prefix) {
  ParamSet& p = model.params();
  p.at(p.find(prefix + ".head_w")).value.setZero();
  p.at(p.find(prefix + ".head_b")).value.setZero();
}

// evaluates the training loss on a fixed (X, eps) pair
VaeModel::LossVars eval_loss(Tape& tape, const VaeModel& model, const Matrix& X,
                             const Matrix& eps) {
  VaeModel::Bound b = model.bind(tape, false);
  return model.loss_graph(b, tape.leaf(X), tape.leaf(eps));
}

}  // namespace

TEST_CASE("encode: zeroed final layer gives mu = 0 and sigma = 1") {
  VaeModel model(small_config(FixedScalar{0.5}), 3);
  zero_head(model, "enc");
  Rng rng(1);
  const auto out = model.encode(rng.normal_matrix(5, 2));
  CHECK(out.mu == Matrix::Zero(5, 2));
  CHECK(out.log_sigma == Matrix::Zero(5, 2));
}

TEST_CASE("encode is deterministic and clamps log sigma on wild inputs") {
  VaeModel model(small_config(LearnedScalar{}), 9);
  Rng rng(2);
  const Matrix X = rng.normal_matrix(7, 2) * 50.0;  // large inputs
  const auto a = model.encode(X);
  const auto b = model.encode(X);
  CHECK(a.mu == b.mu);
  CHECK(a.log_sigma == b.log_sigma);

  for (int trial = 0; trial < 1000; ++trial) {
    const auto out = model.encode(rng.normal_matrix(1, 2) * 100.0);
    REQUIRE(out.mu.allFinite());
    REQUIRE(out.log_sigma.minCoeff() >= kLogSigmaMin);
    REQUIRE(out.log_sigma.maxCoeff() <= kLogSigmaMax);
  }
}

TEST_CASE("reparametrization: eps = 0 and unit-vector eps") {
  VaeModel model(small_config(FixedScalar{1.0}), 4);
  zero_head(model, "enc");  // mu = 0, log_sigma = 0 so z = eps
  Rng rng(3);
  const Matrix X = rng.normal_matrix(3, 2);

  Tape t0;
  auto loss0 = eval_loss(t0, model, X, Matrix::Zero(3, 2));
  CHECK(loss0.z.value() == loss0.enc.mu.value());  // z = mu at eps = 0

  Matrix e1 = Matrix::Zero(3, 2);
  e1.col(0).setOnes();
  Tape t1;
  auto loss1 = eval_loss(t1, model, X, e1);
  CHECK(loss1.z.value() == Matrix(loss1.enc.mu.value() + e1));  // sigma_z = 1
}

TEST_CASE("reparametrization: empirical mean of z approaches mu") {
  VaeModel model(small_config(LearnedScalar{}), 5);
  Rng rng(4);
  const Matrix x_single = rng.normal_matrix(1, 2);
  const int n = 100000;
  const Matrix X = x_single.replicate(n, 1);
  const Matrix eps = rng.normal_matrix(n, 2);

  Tape t;
  auto loss = eval_loss(t, model, X, eps);
  const Matrix z = loss.z.value();
  const auto enc = model.encode(x_single);
  for (int j = 0; j < 2; ++j) {
    const double sigma = std::exp(enc.log_sigma(0, j));
    const double se = sigma / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(z.col(j).mean() - enc.mu(0, j)) < 3.0 * se);
  }
}

TEST_CASE("kl_diag_standard closed form") {
  VectorXd zero2 = VectorXd::Zero(2);
  CHECK(kl_diag_standard(zero2, zero2) == 0.0);

  VectorXd mu1(1), ls0(1);
  mu1 << 1.0;
  ls0 << 0.0;
  CHECK(kl_diag_standard(mu1, ls0) == doctest::Approx(0.5));

  // mu = 0, sigma = e: 0.5 (e^2 - 3)
  VectorXd mu0(1), ls1(1);
  mu0 << 0.0;
  ls1 << 1.0;
  const double expected = 0.5 * (std::exp(2.0) - 3.0);
  CHECK(kl_diag_standard(mu0, ls1) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(2.1945).epsilon(1e-4));
}

TEST_CASE("kl_diag_standard matches a Monte-Carlo estimate") {
  // KL = E_q[log q(z) - log p(z)] with z ~ q
  Rng rng(6);
  for (int trial = 0; trial < 3; ++trial) {
    const int dim = 1 + static_cast<int>(rng.next_u64() % 4);
    VectorXd mu = rng.normal_vector(dim);
    VectorXd ls = 0.5 * rng.normal_vector(dim);
    const double closed = kl_diag_standard(mu, ls);

    const long n = 1000000;
    double sum = 0, sum_sq = 0;
    for (long k = 0; k < n; ++k) {
      double term = 0;
      for (int j = 0; j < dim; ++j) {
        const double s = std::exp(ls(j));
        const double z = mu(j) + s * rng.normal();
        const double lq = -0.5 * (z - mu(j)) * (z - mu(j)) / (s * s) -
                          std::log(s) - 0.5 * std::log(2.0 * M_PI);
        const double lp = -0.5 * z * z - 0.5 * std::log(2.0 * M_PI);
        term += lq - lp;
      }
      sum += term;
      sum_sq += term * term;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / (n - 1));
    CHECK(std::abs(closed - mean) < 3.0 * se);
  }
}

TEST_CASE("kl_diag_standard is non-negative, zero only at the prior") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    VectorXd mu = rng.normal_vector(3);
    VectorXd ls = rng.normal_vector(3);
    const double kl = kl_diag_standard(mu, ls);
    CHECK(kl >= 0.0);
    if (mu.cwiseAbs().maxCoeff() > 1e-3 || ls.cwiseAbs().maxCoeff() > 1e-3)
      CHECK(kl > 0.0);
  }
}

TEST_CASE("recon_nll closed-form examples") {
  VectorXd x(2), mu(2);
  x << 0.3, -0.7;
  mu = x;
  CHECK(recon_nll_scalar(x, mu, 1.0) == 0.0);  // zero residual, log 1 = 0

  const double s = 0.37;
  CHECK(recon_nll_scalar(x, mu, s) == doctest::Approx(2.0 * std::log(s)));

  // vector variant decomposes into per-coordinate scalar calls
  Rng rng(8);
  VectorXd xr = rng.normal_vector(4), mur = rng.normal_vector(4);
  VectorXd ls = 0.3 * rng.normal_vector(4);
  double per_coord = 0;
  for (int j = 0; j < 4; ++j) {
    VectorXd xi(1), mi(1);
    xi << xr(j);
    mi << mur(j);
    per_coord += recon_nll_scalar(xi, mi, std::exp(ls(j)));
  }
  CHECK(recon_nll_vector(xr, mur, ls) ==
        doctest::Approx(per_coord).epsilon(1e-12));
}

TEST_CASE("recon_nll for fixed sigma is minimized at mu = x") {
  // gradient wrt mu vanishes at mu = x and the value rises nearby
  VectorXd x(3);
  x << 0.1, 0.4, -0.2;
  const double at_x = recon_nll_scalar(x, x, 0.5);
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    VectorXd mu = x + 0.1 * rng.normal_vector(3);
    CHECK(recon_nll_scalar(x, mu, 0.5) >= at_x);
  }
}

TEST_CASE("vae_loss: lambda weighting is exact") {
  Rng rng(10);
  const Matrix X = rng.normal_matrix(6, 2);
  const Matrix eps = rng.normal_matrix(6, 2);

  auto total_at = [&](double lambda) {
    VaeConfig cfg = small_config(FixedScalar{0.3});
    cfg.lambda_weight = lambda;
    VaeModel model(cfg, 42);
    Tape t;
    auto loss = eval_loss(t, model, X, eps);
    return std::array<double, 3>{loss.recon.scalar(), loss.kl.scalar(),
                                 loss.total.scalar()};
  };

  auto [r1, k1, t1] = total_at(1.0);
  CHECK(t1 == r1 + k1);

  auto [r0, k0, t0] = total_at(0.0);
  CHECK(t0 == r0);
  CHECK(k0 == k1);  // same parameters, same batch

  auto [r2, k2, t2] = total_at(2.0);
  CHECK(k2 == k1);
  CHECK(t2 - t1 == doctest::Approx(k1).epsilon(1e-12));
}

TEST_CASE("lambda_sigma_rescale basics") {
  CHECK(lambda_sigma_rescale(0.1, 4.0) == doctest::Approx(0.2));
  CHECK(lambda_sigma_rescale(0.73, 1.0) == 0.73);
  CHECK_THROWS_AS(lambda_sigma_rescale(-1.0, 2.0), std::invalid_argument);
}

TEST_CASE("lambda weighting equals sigma rescaling up to a constant") {
  // L_{sigma, lambda}(theta) - lambda L_{sigma sqrt(lambda), 1}(theta) must
  // not depend on theta
  Rng rng(11);
  const Matrix X = rng.normal_matrix(8, 2);
  const Matrix eps = rng.normal_matrix(8, 2);

  auto loss_value = [&](double sigma, double lambda, uint64_t theta_seed) {
    VaeConfig cfg = small_config(FixedScalar{sigma});
    cfg.lambda_weight = lambda;
    VaeModel model(cfg, theta_seed);
    Tape t;
    return eval_loss(t, model, X, eps).total.scalar();
  };

  for (int pair = 0; pair < 10; ++pair) {
    const double sigma = 0.05 + rng.uniform() * 2.0;
    const double lambda = 0.25 + rng.uniform() * 4.0;
    const double s2 = lambda_sigma_rescale(sigma, lambda);
    auto diff_at = [&](uint64_t seed) {
      return loss_value(sigma, lambda, seed) - lambda * loss_value(s2, 1.0, seed);
    };
    const double d1 = diff_at(100 + static_cast<uint64_t>(pair));
    const double d2 = diff_at(200 + static_cast<uint64_t>(pair));
    CHECK(std::abs(d1 - d2) <= 1e-9 * std::max({1.0, std::abs(d1), std::abs(d2)}));
  }
}

TEST_CASE("full-loss gradients pass grad_check for all observation models") {
  Rng rng(12);
  std::vector<ObsModelSpec> variants = {FixedScalar{0.4}, LearnedScalar{},
                                        LearnedVector{}};
  for (const auto& obs : variants) {
    VaeConfig cfg = small_config(obs, 3);
    cfg.width = 8;
    cfg.blocks = 1;
    const VaeModel model(cfg, 13);

    const Matrix X = rng.normal_matrix(3, 3);
    const Matrix eps = rng.normal_matrix(3, 2);
    std::vector<Matrix> point;
    for (const Param& p : model.params()) point.push_back(p.value);
    // perturb parameters away from the deterministic init
    for (Matrix& m : point) m += 0.05 * rng.normal_matrix(m.rows(), m.cols());

    auto build = [&](Tape& tape, const std::vector<Var>& leaves) {
      VaeModel::Bound b{&tape, leaves};
      return model.loss_graph(b, tape.leaf(X), tape.leaf(eps)).total;
    };
    double worst = 0;
    for (int trial = 0; trial < 5; ++trial) {
      worst = std::max(worst, ad::grad_check(build, point, 1e-5));
      for (Matrix& m : point) m += 0.05 * rng.normal_matrix(m.rows(), m.cols());
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("learned-vector loss requires the decoder log sigma head") {
  // a learned-vector model emits 2 D columns; slicing is covered above, here
  // the numeric api must refuse a missing log sigma
  VaeModel model(small_config(LearnedVector{}), 21);
  Rng rng(14);
  const auto dec = model.decode(rng.normal_matrix(3, 2));
  REQUIRE(dec.log_sigma.has_value());
  VaeModel::DecoderOutput broken{dec.mu, std::nullopt};
  CHECK_THROWS_AS(model.log_likelihood_rows(rng.normal_matrix(3, 2), broken),
                  std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  VaeModel model(small_config(LearnedScalar{}), 33);
  const std::string path =
      (std::filesystem::temp_directory_path() / "vaelab_ckpt_test.bin").string();
  save_checkpoint(path, model.params());

  VaeModel other(small_config(LearnedScalar{}), 34);  // different init
  load_into(other.params(), load_checkpoint(path));
  for (size_t i = 0; i < model.params().size(); ++i) {
    const Param& a = model.params().at(static_cast<int>(i));
    const Param& b = other.params().at(static_cast<int>(i));
    CHECK(a.name == b.name);
    CHECK(a.value == b.value);
  }
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), std::runtime_error);
}

TEST_CASE("config validation rejects bad settings") {
  VaeConfig cfg = small_config(FixedScalar{-0.1});
  CHECK_THROWS_WITH_AS(validate(cfg), doctest::Contains("sigma"),
                       std::invalid_argument);
  cfg = small_config(FixedScalar{0.1});
  cfg.width = 0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}
