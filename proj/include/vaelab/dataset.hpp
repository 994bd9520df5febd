#pragma once

#include <Eigen/Core>
#include <array>
#include <ostream>
#include <vector>

#include "vaelab/rng.hpp"

namespace vaelab::data {

// Canonical 1D manifold in R^2: a single-period sine arc
//   curve(t) = (3t - 1.5, 0.6 sin(2 pi t)),  t in [0, 1]
// with Gaussian noise along the unit normal, in three regions:
//   A: t in [0, 1/3)   std 0.04 (moderate)
//   B: t in [1/3, 2/3) std 0.01 (small)
//   C: t in [2/3, 1]   std 0.10 (large)
struct NoiseRegion {
  double t_begin, t_end;
  double noise_std;
  char label;
};

const std::array<NoiseRegion, 3>& noise_regions();
const NoiseRegion& region_of(double t);

Eigen::Vector2d manifold_point(double t);   // throws outside [0, 1]
Eigen::Vector2d manifold_tangent(double t);
Eigen::Vector2d unit_normal(double t);

struct SamplePoint {
  Eigen::Vector2d x;
  double t;
  char region;
  double noise;  // signed magnitude along the unit normal
};

std::vector<SamplePoint> sample_batch(int n, Rng& rng);

// n x 2 matrix of sampled points (training-batch form).
Eigen::MatrixXd sample_matrix(int n, Rng& rng);

// Distance to the curve: min over a dense t-grid (>= 4096 cells by default),
// refined by golden section around the best cell.
double manifold_distance(const Eigen::Vector2d& x, int grid_points = 4096);

// Batch mean of manifold_distance over the rows of X.
double mean_manifold_distance(const Eigen::MatrixXd& X);

// CSV with header x1,x2,t,region,noise.
void write_samples_csv(std::ostream& out, const std::vector<SamplePoint>& samples);

}  // namespace vaelab::data
