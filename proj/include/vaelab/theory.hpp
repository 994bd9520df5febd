#pragma once

#include <Eigen/Core>
#include <ostream>
#include <vector>

#include "vaelab/rng.hpp"

namespace vaelab::theory {

// Data uniform on the sphere of radius `radius` in dimension `dim`, observed
// through an isotropic Gaussian of scale `sigma`.
struct SphereProblem {
  int dim = 2;       // D >= 2
  double radius = 1;  // R > 0
  double sigma = 1;   // > 0
};

struct QuadratureSpec {
  int initial_nodes = 64;     // >= 16
  int max_nodes = 1 << 20;
  double rel_tol = 1e-10;     // node doubling stops below this relative change
};

// Surface area of the unit n-sphere (n = 1: circle, 2 pi; n = 2: 4 pi; ...).
double unit_sphere_area(int n);

// sigma above which the optimal radial density concentrates at the center.
double collapse_threshold(int dim, double radius);

// log of the unnormalized optimal density
//   exp(-r^2 / 2 sigma^2) * Int_0^pi sin^(D-2)(phi) exp(r R cos(phi) / sigma^2) dphi
// evaluated with Gauss-Legendre nodes in log domain (max-exponent shift), and
// node doubling until the relative change falls below spec.rel_tol.
double log_ptheta_unnorm(double r, const SphereProblem& prob,
                         const QuadratureSpec& spec = {});

// Additive constant turning exp(log_ptheta_unnorm) into the true density of
// the observation at distance R from the center.
double log_density_normalizer(const SphereProblem& prob);

// Sign of d/dr of the optimal density at r > 0: the integral
//   Int (R^2 sin^2(phi) / ((D-1) sigma^2) - 1) sin^(D-2)(phi) e^(r R cos(phi)/sigma^2) dphi
// split into its positive and negative parts, compared in log domain.
// Returns 0 when the parts cancel to relative 1e-12.
int dr_sign(double r, const SphereProblem& prob, const QuadratureSpec& spec = {});

// Global maximizer of log_ptheta_unnorm over r in [0, R + 5 sigma]: dense
// grid scan refined by golden section around the best cell.
double optimal_radius(const SphereProblem& prob, int grid_points = 2048,
                      const QuadratureSpec& spec = {});

struct McEstimate {
  double mean = 0;
  double std_err = 0;
};

// Monte-Carlo estimate of the density at distance R when the decoder-output
// distribution is uniform on the radius-r sphere. Independent oracle for the
// quadrature route.
McEstimate mc_density_oracle(double r, const SphereProblem& prob, long n, Rng& rng);

struct HeatmapGrid {
  double ratio_max = 4;  // R / sigma axis upper end
  double rho_max = 4;    // r / sigma axis upper end
  int cols = 200;        // R / sigma resolution
  int rows = 200;        // r / sigma resolution
  bool column_normalize = true;
};

struct Heatmap {
  std::vector<double> ratio_axis;  // size cols
  std::vector<double> rho_axis;    // size rows
  Eigen::MatrixXd values;          // rows x cols
};

// D = 2 heat map of the optimal density over (R/sigma, r/sigma). With
// column_normalize each column is scaled to max 1.
Heatmap heatmap_d2(const HeatmapGrid& grid, const QuadratureSpec& spec = {});

// Smallest R/sigma whose column argmax sits strictly above r/sigma = 0;
// +infinity when every column peaks at zero.
double heatmap_transition_ratio(const Heatmap& hm);

// Header row of R/sigma values, first column r/sigma values.
void write_heatmap_csv(std::ostream& out, const Heatmap& hm);
// 8-bit grayscale PGM, largest r/sigma at the top row.
void write_heatmap_pgm(std::ostream& out, const Heatmap& hm);

}  // namespace vaelab::theory
