#pragma once

#include <Eigen/Core>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vaelab/config.hpp"
#include "vaelab/rng.hpp"
#include "vaelab/vae.hpp"

namespace vaelab::harness {

struct StepStats {
  long step;
  double recon, kl, total;
  double sigma;  // fixed sigma, learned scalar sigma, or batch mean sigma(z)
};

struct ElboPoint {
  long step;
  double mean, stddev;
};

struct ElboReport {
  double elbo_mean = 0;
  double elbo_std = 0;  // over evaluation batches
  bool correction_applied = true;
};

struct ScheduleEntry {
  long step;
  double sigma;
};
// Step-increasing (step, sigma) pairs, first step 0; values are held
// piecewise-constant and the last value is held past the end.
using SigmaSchedule = std::vector<ScheduleEntry>;

struct RunRecord {
  RunConfig config;
  uint64_t seed = 0;
  std::vector<StepStats> steps;
  std::vector<ElboPoint> evals;
  double terminal_sigma = 0;
  double final_elbo_mean = 0;
  double final_elbo_std = 0;
  std::shared_ptr<VaeModel> model;  // final parameters
  std::string note;                 // e.g. "replay"
};

// Trains on fresh batches from the canonical dataset; fully deterministic
// given (config, seed). Throws with the step index if the loss goes
// non-finite.
RunRecord train_run(const RunConfig& cfg, uint64_t seed);

// Fixed-scalar training with sigma imposed per step from the schedule.
RunRecord replay_schedule(const SigmaSchedule& schedule, RunConfig cfg, uint64_t seed);

// ELBO per sample in nats with the (D/2) log 2pi constant restored. For
// fixed-scalar models the D log sigma term is included when `correction` is
// set (the default), making reports comparable across observation models.
ElboReport eval_elbo(const VaeModel& model, int n_batches, int k_samples,
                     uint64_t eval_seed, bool correction = true);

double schedule_sigma_at(const SigmaSchedule& schedule, long step);

// Extracts the (step, sigma) trajectory of a learned-scalar run, downsampled
// so the held interpolation stays within rel_tol of the recorded values.
SigmaSchedule record_sigma_schedule(const RunRecord& run, double rel_tol = 0.005);

// Fraction of the net sigma decrease covered by the largest per-step drops
// at the given step budget (e.g. 0.1 = best 10% of steps).
double sigma_drop_concentration(const std::vector<StepStats>& steps,
                                double step_fraction);

// Deterministic encode(mean) -> decode(mean) pass.
Eigen::MatrixXd reconstruct(const VaeModel& model, const Eigen::MatrixXd& X);
void reconstruct_dump(const VaeModel& model, const Eigen::MatrixXd& X, std::ostream& out);

struct GenerateResult {
  Eigen::MatrixXd z;      // n x latent_dim, prior draws
  Eigen::MatrixXd mean;   // decoder means
  Eigen::MatrixXd sample;  // draws from p(x|z)
};
GenerateResult generate(const VaeModel& model, int n, Rng& rng);
void generate_dump(const VaeModel& model, int n, Rng& rng, std::ostream& out);

void write_metrics_csv(std::ostream& out, const RunRecord& rec);
void write_elbo_csv(std::ostream& out, const RunRecord& rec);
void write_manifest_json(std::ostream& out, const RunRecord& rec);
void write_schedule_csv(std::ostream& out, const SigmaSchedule& schedule);
SigmaSchedule read_schedule_csv(std::istream& in);

// metrics.csv, elbo.csv, manifest.json, ckpt.bin and (for learned-scalar
// runs) sigma_schedule.csv under `dir`.
void write_run_artifacts(const std::string& dir, const RunRecord& rec);

struct Table1Options {
  std::vector<uint64_t> seeds;  // >= 3
  long steps = 20000;
  std::vector<double> fixed_sigmas{1.0, 0.3, 0.1, 0.03, 0.01};
  int jobs = 0;              // 0 = hardware concurrency
  long eval_interval = 0;    // 0 = final evaluation only
  int eval_batches = 50;
  int eval_samples = 64;
  bool include_replay = true;  // extra runs replaying each seed's ls schedule
  std::string runs_dir;        // when set, per-run artifacts are written here
};

struct Table1Row {
  std::string setting;     // f-vae-1, ..., ls-vae, lv-vae, fstar-vae, replay-vae
  std::string sigma_spec;  // "fixed 0.1", "learned scalar", ...
  double elbo_mean = 0;    // over seeds
  double elbo_std = 0;
};

struct Table1Result {
  std::vector<Table1Row> rows;
  std::map<std::string, std::vector<RunRecord>> runs;  // setting -> per seed
};

Table1Result table1_experiment(const Table1Options& opts);
void write_table1_csv(std::ostream& out, const Table1Result& result);

}  // namespace vaelab::harness
