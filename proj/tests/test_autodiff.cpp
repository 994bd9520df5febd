#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "vaelab/adam.hpp"
#include "vaelab/autodiff.hpp"
#include "vaelab/rng.hpp"

using namespace vaelab;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

Matrix row(std::initializer_list<double> vals) {
  Matrix m(1, static_cast<Eigen::Index>(vals.size()));
  Eigen::Index j = 0;
  for (double v : vals) m(0, j++) = v;
  return m;
}

}  // namespace

TEST_CASE("forward: identity, affine and zeroed residual block") {
  Tape t;
  Var x = t.leaf(row({1, 2}));
  CHECK(x.value() == row({1, 2}));  // identity graph

  Var w = t.leaf(Matrix::Identity(2, 2));
  Var b = t.leaf(Matrix::Zero(1, 2));
  Var y = t.matmul(t.leaf(row({3, 4})), w) + b;
  CHECK(y.value() == row({3, 4}));

  // residual block with the inner branch zeroed: h + 0 = h
  Var h = t.leaf(row({5}));
  Var w1 = t.leaf(Matrix::Zero(1, 3)), w2 = t.leaf(Matrix::Zero(3, 1));
  Var inner = t.matmul(ad::elu(t.matmul(h, w1)), w2);
  Var out = h + inner;
  CHECK(out.value() == row({5}));
}

TEST_CASE("forward is deterministic bit for bit") {
  Rng rng(11);
  Matrix x = rng.normal_matrix(4, 3), w = rng.normal_matrix(3, 3);
  auto run = [&] {
    Tape t;
    Var out = ad::sum(ad::elu(t.matmul(t.leaf(x), t.leaf(w))));
    return out.scalar();
  };
  const double a = run(), b = run();
  CHECK(a == b);
}

TEST_CASE("backward: quadratic, linear map and Gaussian stationary point") {
  {
    Tape t;
    Var x = t.leaf(scalar(3.0), true);
    Var loss = ad::sum(ad::square(x));
    t.backward(loss);
    CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
  }
  {
    Tape t;
    Var w = t.leaf(Matrix::Identity(2, 2), true);
    Var loss = ad::sum(t.matmul(t.leaf(row({1, 1})), w));
    t.backward(loss);
    CHECK(w.grad() == Matrix::Ones(2, 2));
  }
  {
    // -log N(x; mu, sigma^2) wrt mu at x = mu has zero gradient
    Tape t;
    Var mu = t.leaf(row({0.7, -0.3}), true);
    Var x = t.leaf(row({0.7, -0.3}));
    Var loss = ad::sum(ad::square(x - mu)) * 0.5 + std::log(2.0);
    t.backward(loss);
    CHECK(mu.grad() == Matrix::Zero(1, 2));
  }
}

TEST_CASE("backward rejects non-scalar losses and double runs") {
  Tape t;
  Var x = t.leaf(row({1, 2}), true);
  CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("scalar"),
                       std::invalid_argument);
  Var loss = ad::sum(x);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), std::logic_error);
}

TEST_CASE("shape errors name the operation") {
  Tape t;
  Var a = t.leaf(Matrix::Zero(2, 3));
  Var b = t.leaf(Matrix::Zero(3, 3));
  CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(t.matmul(a, t.leaf(Matrix::Zero(2, 2))),
                       doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_AS(t.leaf(Matrix(0, 2)), std::invalid_argument);
}

TEST_CASE("grad_check validates eps and flags non-finite losses") {
  auto build = [](Tape&, const std::vector<Var>& leaves) {
    return ad::sum(ad::square(leaves[0]));
  };
  CHECK_THROWS_AS(ad::grad_check(build, {scalar(1.0)}, 1e-2), std::invalid_argument);
  auto log_build = [](Tape&, const std::vector<Var>& leaves) {
    return ad::sum(ad::vlog(leaves[0]));
  };
  CHECK_THROWS_AS(ad::grad_check(log_build, {scalar(-1.0)}, 1e-5),
                  std::runtime_error);
}

TEST_CASE("grad_check on a quadratic is tight") {
  Rng rng(5);
  auto build = [](Tape&, const std::vector<Var>& leaves) {
    return ad::sum(ad::square(leaves[0]));
  };
  for (int i = 0; i < 10; ++i) {
    const double err = ad::grad_check(build, {rng.normal_matrix(2, 3)}, 1e-5);
    CHECK(err < 1e-6);
  }
}

// every primitive op, checked at random points against central differences
TEST_CASE("primitive op gradient suite") {
  Rng rng(123);
  const int points = 100;

  struct Case {
    const char* name;
    int n_inputs;
    std::function<Var(Tape&, const std::vector<Var>&)> body;
    std::function<Matrix(Rng&)> make_input;
  };

  auto randm = [](Rng& r) { return r.normal_matrix(3, 4); };
  auto randpos = [](Rng& r) {
    return Matrix(r.normal_matrix(3, 4).array().abs() + 0.5);
  };

  std::vector<Case> cases = {
      {"add", 2, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(v[0] + v[1])); }, randm},
      {"sub", 2, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(v[0] - v[1])); }, randm},
      {"mul", 2, [](Tape&, const std::vector<Var>& v) { return ad::sum(v[0] * v[1]); }, randm},
      {"neg", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(-v[0])); }, randm},
      {"scale", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(v[0] * 1.7)); }, randm},
      {"add_const", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(v[0] + 0.3)); }, randm},
      {"exp", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::vexp(v[0])); }, randm},
      {"log", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::vlog(v[0])); }, randpos},
      {"elu", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(ad::elu(v[0]))); }, randm},
      {"square", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(v[0])); }, randm},
      {"sum", 1, [](Tape&, const std::vector<Var>& v) { return ad::square(ad::sum(v[0])); }, randm},
      {"rowwise_sum", 1, [](Tape&, const std::vector<Var>& v) { return ad::sum(ad::square(ad::rowwise_sum(v[0]))); }, randm},
      {"slice_cols", 1, [](Tape& t, const std::vector<Var>& v) { return ad::sum(ad::square(t.slice_cols(v[0], 1, 2))); }, randm},
      {"clamp", 1, [](Tape& t, const std::vector<Var>& v) { return ad::sum(ad::square(t.clamp(v[0], -0.9, 0.9))); }, randm},
      {"matmul", 2, [](Tape& t, const std::vector<Var>& v) { return ad::sum(ad::square(t.matmul(t.slice_cols(v[0], 0, 3), t.slice_cols(v[1], 1, 3)))); }, randm},
  };

  const int per_case = points / static_cast<int>(cases.size()) + 1;
  for (const Case& c : cases) {
    CAPTURE(c.name);
    double worst = 0;
    for (int i = 0; i < per_case; ++i) {
      std::vector<Matrix> point;
      for (int k = 0; k < c.n_inputs; ++k) point.push_back(c.make_input(rng));
      worst = std::max(worst, ad::grad_check(c.body, point, 1e-5));
    }
    CHECK(worst <= 1e-4);
  }

  // broadcasting variants of add / mul: row vector and scalar operands
  auto bcast_body = [](Tape&, const std::vector<Var>& v) {
    return ad::sum(ad::square(v[0] + v[1])) + ad::sum(v[0] * v[2]) +
           ad::sum(ad::square(v[0] * v[3]));
  };
  double worst = 0;
  for (int i = 0; i < per_case; ++i) {
    std::vector<Matrix> point{randm(rng), rng.normal_matrix(1, 4),
                              scalar(rng.normal()), rng.normal_matrix(1, 4)};
    worst = std::max(worst, ad::grad_check(bcast_body, point, 1e-5));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("backward of a sum of losses is the sum of backwards") {
  Rng rng(77);
  Matrix w0 = rng.normal_matrix(3, 3), x = rng.normal_matrix(5, 3);

  auto grad_of = [&](int which) {
    Tape t;
    Var w = t.leaf(w0, true);
    Var h = ad::elu(t.matmul(t.leaf(x), w));
    Var l1 = ad::sum(ad::square(h));
    Var l2 = ad::sum(ad::vexp(h * 0.1));
    Var loss = which == 0 ? l1 : (which == 1 ? l2 : l1 + l2);
    t.backward(loss);
    return Matrix(w.grad());
  };

  Matrix g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
  const Matrix sum = g1 + g2;
  for (Eigen::Index i = 0; i < sum.size(); ++i)
    CHECK(ad::relative_gap(g12(i), sum(i)) < 1e-10);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParamSet params;
  params.add("w", Matrix::Constant(2, 2, 1.5));
  const Matrix before = params.at(0).value;
  Adam adam;
  for (int i = 0; i < 5; ++i) adam.step(params, {Matrix::Zero(2, 2)});
  CHECK(params.at(0).value == before);
  CHECK(adam.step_count() == 5);
}

TEST_CASE("adam: constant gradient moves parameters against its sign") {
  ParamSet params;
  params.add("w", Matrix::Zero(1, 2));
  Adam adam;
  Matrix g = row({1.0, -2.0});
  for (int i = 0; i < 50; ++i) adam.step(params, {g});
  CHECK(params.at(0).value(0, 0) < 0);
  CHECK(params.at(0).value(0, 1) > 0);
}

TEST_CASE("adam: first bias-corrected step has magnitude ~ lr") {
  ParamSet params;
  params.add("w", scalar(0.0));
  Adam adam({0.001, 0.9, 0.999, 1e-8});
  adam.step(params, {scalar(1.0)});
  // m_hat = v_hat = 1 after bias correction: update = lr / (1 + eps)
  CHECK(params.at(0).value(0, 0) == doctest::Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam failures carry the parameter name") {
  ParamSet params;
  params.add("enc.w1", Matrix::Zero(1, 1));
  Adam adam;
  Matrix bad = scalar(std::nan(""));
  CHECK_THROWS_WITH_AS(adam.step(params, {bad}), doctest::Contains("enc.w1"),
                       std::runtime_error);
  CHECK_THROWS_AS(adam.step(params, {Matrix::Zero(2, 2)}), std::invalid_argument);
}
