#include "vaelab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <stdexcept>

#include "vaelab/util.hpp"

namespace vaelab::theory {

namespace {

void check_problem(const SphereProblem& p, bool allow_zero_radius = false) {
  if (p.dim < 2) throw std::invalid_argument("SphereProblem: dim must be >= 2");
  if (!(p.radius > 0) && !(allow_zero_radius && p.radius == 0))
    throw std::invalid_argument("SphereProblem: radius must be positive");
  if (!(p.sigma > 0) || !std::isfinite(p.sigma))
    throw std::invalid_argument("SphereProblem: sigma must be positive");
  if (!std::isfinite(p.radius))
    throw std::invalid_argument("SphereProblem: radius must be finite");
}

// Gauss-Legendre rule on [-1, 1], cached per node count.
struct GlRule {
  std::vector<double> x, w;
};

const GlRule& gl_rule(int n) {
  static std::map<int, GlRule> cache;
  static std::mutex mu;
  std::lock_guard lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  GlRule rule;
  rule.x.resize(n);
  rule.w.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double dp = 0;
    for (int iter = 0; iter < 100; ++iter) {
      // P_n(x) and P_n'(x) by the three-term recurrence
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    rule.x[i] = -x;
    rule.x[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.w[i] = w;
    rule.w[n - 1 - i] = w;
  }
  return cache.emplace(n, std::move(rule)).first->second;
}

// log of Int_0^pi sin^p(phi) exp(a cos(phi)) dphi with an n-node rule.
double log_sin_exp_integral(double p, double a, int n) {
  const GlRule& rule = gl_rule(n);
  std::vector<double> terms(static_cast<size_t>(n));
  double peak = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double phi = 0.5 * M_PI * (rule.x[static_cast<size_t>(i)] + 1.0);
    double t = std::log(0.5 * M_PI * rule.w[static_cast<size_t>(i)]) +
               a * std::cos(phi);
    if (p != 0.0) t += p * std::log(std::sin(phi));
    terms[static_cast<size_t>(i)] = t;
    peak = std::max(peak, t);
  }
  double acc = 0;
  for (double t : terms) acc += std::exp(t - peak);
  return peak + std::log(acc);
}

// Doubles nodes until every requested integral is stable to spec.rel_tol.
template <typename Eval>
auto refine(const QuadratureSpec& spec, Eval eval) {
  int n = std::max(16, spec.initial_nodes);
  auto prev = eval(n);
  while (n <= spec.max_nodes) {
    n *= 2;
    auto cur = eval(n);
    bool done = true;
    for (size_t i = 0; i < cur.size(); ++i) {
      if (std::abs(cur[i] - prev[i]) > spec.rel_tol * std::max(1.0, std::abs(cur[i])))
        done = false;
    }
    if (done) return cur;
    prev = cur;
  }
  throw std::runtime_error("quadrature did not converge within the node budget");
}

}  // namespace

double unit_sphere_area(int n) {
  if (n < 0) throw std::invalid_argument("unit_sphere_area: n must be >= 0");
  const double half = 0.5 * (n + 1);
  return std::exp(std::log(2.0) + half * std::log(M_PI) - std::lgamma(half));
}

double collapse_threshold(int dim, double radius) {
  if (dim < 2) throw std::invalid_argument("collapse_threshold: dim must be >= 2");
  if (!(radius > 0)) throw std::invalid_argument("collapse_threshold: radius must be positive");
  return radius / std::sqrt(static_cast<double>(dim - 1));
}

double log_ptheta_unnorm(double r, const SphereProblem& prob, const QuadratureSpec& spec) {
  check_problem(prob, /*allow_zero_radius=*/true);
  if (!std::isfinite(r) || r < 0)
    throw std::invalid_argument("log_ptheta_unnorm: r must be finite and non-negative");
  const double s2 = prob.sigma * prob.sigma;
  const double a = r * prob.radius / s2;
  const double p = static_cast<double>(prob.dim - 2);
  auto log_integral = refine(spec, [&](int n) {
    return std::array<double, 1>{log_sin_exp_integral(p, a, n)};
  });
  return -r * r / (2.0 * s2) + log_integral[0];
}

double log_density_normalizer(const SphereProblem& prob) {
  check_problem(prob);
  const double d = static_cast<double>(prob.dim);
  const double s2 = prob.sigma * prob.sigma;
  return -0.5 * d * std::log(2.0 * M_PI * s2) -
         prob.radius * prob.radius / (2.0 * s2) +
         std::log(unit_sphere_area(prob.dim - 2)) -
         std::log(unit_sphere_area(prob.dim - 1));
}

int dr_sign(double r, const SphereProblem& prob, const QuadratureSpec& spec) {
  check_problem(prob);
  if (!(r > 0)) throw std::invalid_argument("dr_sign: r must be positive");
  const double s2 = prob.sigma * prob.sigma;
  const double a = r * prob.radius / s2;
  const double p = static_cast<double>(prob.dim - 2);
  const double log_coef =
      std::log(prob.radius * prob.radius / ((prob.dim - 1) * s2));
  auto parts = refine(spec, [&](int n) {
    return std::array<double, 2>{log_coef + log_sin_exp_integral(p + 2.0, a, n),
                                 log_sin_exp_integral(p, a, n)};
  });
  const double delta = parts[0] - parts[1];
  // |positive - negative| / (positive + negative) = tanh(|delta| / 2)
  if (std::abs(delta) <= 2e-12) return 0;
  return delta > 0 ? 1 : -1;
}

double optimal_radius(const SphereProblem& prob, int grid_points,
                      const QuadratureSpec& spec) {
  check_problem(prob);
  if (grid_points < 16) throw std::invalid_argument("optimal_radius: grid too coarse");
  const double r_max = prob.radius + 5.0 * prob.sigma;
  auto f = [&](double r) { return log_ptheta_unnorm(r, prob, spec); };

  int best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<size_t>(grid_points));
  for (int i = 0; i < grid_points; ++i) {
    grid[static_cast<size_t>(i)] = r_max * i / (grid_points - 1);
    const double v = f(grid[static_cast<size_t>(i)]);
    if (v > best_val) {
      best_val = v;
      best = i;
    }
  }

  double lo = grid[static_cast<size_t>(std::max(0, best - 1))];
  double hi = grid[static_cast<size_t>(std::min(grid_points - 1, best + 1))];
  const double inv_gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - (hi - lo) * inv_gr;
  double d = lo + (hi - lo) * inv_gr;
  double fc = f(c), fd = f(d);
  while (hi - lo > 1e-11 * r_max) {
    if (fc > fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - (hi - lo) * inv_gr;
      fc = f(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + (hi - lo) * inv_gr;
      fd = f(d);
    }
  }
  const double r_star = 0.5 * (lo + hi);
  const double v_star = f(r_star);
  // the center wins ties: the density is flat-to-decreasing there
  if (f(0.0) >= v_star - 1e-12 * std::max(1.0, std::abs(v_star))) return 0.0;
  return r_star;
}

McEstimate mc_density_oracle(double r, const SphereProblem& prob, long n, Rng& rng) {
  check_problem(prob);
  if (n < 10000) throw std::invalid_argument("mc_density_oracle: n must be >= 10^4");
  if (!(r >= 0)) throw std::invalid_argument("mc_density_oracle: r must be >= 0");
  const double s2 = prob.sigma * prob.sigma;
  const double log_gauss_norm = -0.5 * prob.dim * std::log(2.0 * M_PI * s2);
  const double R = prob.radius;

  double sum = 0, sum_sq = 0;
  for (long k = 0; k < n; ++k) {
    // mu uniform on the radius-r sphere via a normalized Gaussian; only the
    // cosine of the angle to x enters the distance.
    double g1 = rng.normal();
    double norm_sq = g1 * g1;
    for (int i = 1; i < prob.dim; ++i) {
      const double gi = rng.normal();
      norm_sq += gi * gi;
    }
    const double u1 = g1 / std::sqrt(norm_sq);
    const double dist_sq = R * R + r * r - 2.0 * r * R * u1;
    const double p = std::exp(log_gauss_norm - dist_sq / (2.0 * s2));
    sum += p;
    sum_sq += p * p;
  }
  McEstimate est;
  est.mean = sum / static_cast<double>(n);
  const double var =
      std::max(0.0, (sum_sq - sum * sum / static_cast<double>(n)) /
                        static_cast<double>(n - 1));
  est.std_err = std::sqrt(var / static_cast<double>(n));
  return est;
}

Heatmap heatmap_d2(const HeatmapGrid& grid, const QuadratureSpec& spec) {
  if (grid.rows < 2 || grid.cols < 2)
    throw std::invalid_argument("heatmap_d2: resolution must be >= 2");
  if (!(grid.ratio_max > 0) || !(grid.rho_max > 0))
    throw std::invalid_argument("heatmap_d2: axis ranges must be positive");

  Heatmap hm;
  hm.ratio_axis.resize(static_cast<size_t>(grid.cols));
  hm.rho_axis.resize(static_cast<size_t>(grid.rows));
  for (int j = 0; j < grid.cols; ++j)
    hm.ratio_axis[static_cast<size_t>(j)] = grid.ratio_max * j / (grid.cols - 1);
  for (int i = 0; i < grid.rows; ++i)
    hm.rho_axis[static_cast<size_t>(i)] = grid.rho_max * i / (grid.rows - 1);

  // work in sigma = 1 units: the map depends only on (R/sigma, r/sigma)
  hm.values.resize(grid.rows, grid.cols);
  for (int j = 0; j < grid.cols; ++j) {
    SphereProblem prob{2, hm.ratio_axis[static_cast<size_t>(j)], 1.0};
    for (int i = 0; i < grid.rows; ++i)
      hm.values(i, j) =
          log_ptheta_unnorm(hm.rho_axis[static_cast<size_t>(i)], prob, spec);
  }

  if (grid.column_normalize) {
    for (int j = 0; j < grid.cols; ++j) {
      const double m = hm.values.col(j).maxCoeff();
      hm.values.col(j) = (hm.values.col(j).array() - m).exp();
    }
  } else {
    const double m = hm.values.maxCoeff();
    hm.values = (hm.values.array() - m).exp();
  }
  return hm;
}

double heatmap_transition_ratio(const Heatmap& hm) {
  for (int j = 0; j < hm.values.cols(); ++j) {
    Eigen::Index argmax = 0;
    hm.values.col(j).maxCoeff(&argmax);
    if (argmax > 0) return hm.ratio_axis[static_cast<size_t>(j)];
  }
  return std::numeric_limits<double>::infinity();
}

void write_heatmap_csv(std::ostream& out, const Heatmap& hm) {
  out << "r_over_sigma";
  for (double ratio : hm.ratio_axis) out << "," << fmt17(ratio);
  out << "\n";
  for (int i = 0; i < hm.values.rows(); ++i) {
    out << fmt17(hm.rho_axis[static_cast<size_t>(i)]);
    for (int j = 0; j < hm.values.cols(); ++j) out << "," << fmt17(hm.values(i, j));
    out << "\n";
  }
}

void write_heatmap_pgm(std::ostream& out, const Heatmap& hm) {
  const double m = hm.values.maxCoeff();
  out << "P5\n" << hm.values.cols() << " " << hm.values.rows() << "\n255\n";
  for (Eigen::Index i = hm.values.rows() - 1; i >= 0; --i) {
    for (Eigen::Index j = 0; j < hm.values.cols(); ++j) {
      const double v = m > 0 ? hm.values(i, j) / m : 0.0;
      out.put(static_cast<char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
    }
  }
}

}  // namespace vaelab::theory
