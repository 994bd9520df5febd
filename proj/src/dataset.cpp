#include "vaelab/dataset.hpp"

#include <cmath>
#include <stdexcept>

#include "vaelab/util.hpp"

namespace vaelab::data {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

}  // namespace

const std::array<NoiseRegion, 3>& noise_regions() {
  static const std::array<NoiseRegion, 3> regions{{
      {0.0, 1.0 / 3.0, 0.04, 'A'},
      {1.0 / 3.0, 2.0 / 3.0, 0.01, 'B'},
      {2.0 / 3.0, 1.0, 0.10, 'C'},
  }};
  return regions;
}

const NoiseRegion& region_of(double t) {
  const auto& regions = noise_regions();
  if (t < regions[1].t_begin) return regions[0];
  if (t < regions[2].t_begin) return regions[1];
  return regions[2];
}

Eigen::Vector2d manifold_point(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("manifold_point: t must lie in [0, 1]");
  return {3.0 * t - 1.5, 0.6 * std::sin(kTwoPi * t)};
}

Eigen::Vector2d manifold_tangent(double t) {
  return {3.0, 0.6 * kTwoPi * std::cos(kTwoPi * t)};
}

Eigen::Vector2d unit_normal(double t) {
  const Eigen::Vector2d tan = manifold_tangent(t);
  return Eigen::Vector2d(-tan.y(), tan.x()) / tan.norm();
}

std::vector<SamplePoint> sample_batch(int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_batch: n must be >= 1");
  std::vector<SamplePoint> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    SamplePoint s;
    s.t = rng.uniform();
    const NoiseRegion& region = region_of(s.t);
    s.region = region.label;
    s.noise = region.noise_std * rng.normal();
    s.x = manifold_point(s.t) + s.noise * unit_normal(s.t);
    out.push_back(s);
  }
  return out;
}

Eigen::MatrixXd sample_matrix(int n, Rng& rng) {
  Eigen::MatrixXd X(n, 2);
  for (int i = 0; i < n; ++i) {
    const double t = rng.uniform();
    const double noise = region_of(t).noise_std * rng.normal();
    X.row(i) = (manifold_point(t) + noise * unit_normal(t)).transpose();
  }
  return X;
}

double manifold_distance(const Eigen::Vector2d& x, int grid_points) {
  if (grid_points < 2) throw std::invalid_argument("manifold_distance: grid too coarse");
  if (!x.allFinite()) throw std::invalid_argument("manifold_distance: point must be finite");

  auto dist_sq = [&x](double t) { return (x - manifold_point(t)).squaredNorm(); };

  int best = 0;
  double best_val = dist_sq(0.0);
  for (int i = 1; i <= grid_points; ++i) {
    const double t = static_cast<double>(i) / grid_points;
    const double v = dist_sq(t);
    if (v < best_val) {
      best_val = v;
      best = i;
    }
  }

  double lo = static_cast<double>(std::max(0, best - 1)) / grid_points;
  double hi = static_cast<double>(std::min(grid_points, best + 1)) / grid_points;
  const double inv_gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - (hi - lo) * inv_gr;
  double d = lo + (hi - lo) * inv_gr;
  double fc = dist_sq(c), fd = dist_sq(d);
  while (hi - lo > 1e-12) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - (hi - lo) * inv_gr;
      fc = dist_sq(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + (hi - lo) * inv_gr;
      fd = dist_sq(d);
    }
  }
  return std::sqrt(dist_sq(0.5 * (lo + hi)));
}

double mean_manifold_distance(const Eigen::MatrixXd& X) {
  if (X.cols() != 2 || X.rows() < 1)
    throw std::invalid_argument("mean_manifold_distance: expected an n x 2 matrix");
  double acc = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    acc += manifold_distance(X.row(i).transpose());
  return acc / static_cast<double>(X.rows());
}

void write_samples_csv(std::ostream& out, const std::vector<SamplePoint>& samples) {
  out << "x1,x2,t,region,noise\n";
  for (const SamplePoint& s : samples) {
    out << fmt17(s.x.x()) << "," << fmt17(s.x.y()) << "," << fmt17(s.t) << ","
        << s.region << "," << fmt17(s.noise) << "\n";
  }
}

}  // namespace vaelab::data
