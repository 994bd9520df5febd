#include "vaelab/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "vaelab/config.hpp"
#include "vaelab/dataset.hpp"
#include "vaelab/harness.hpp"
#include "vaelab/theory.hpp"
#include "vaelab/util.hpp"

namespace vaelab::cli {

namespace {

namespace fs = std::filesystem;

std::ofstream open_out(const std::string& path) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file " + path);
  return out;
}

void run_train(const std::string& config_path, long long cli_seed,
               const std::string& cli_out, const harness::SigmaSchedule* schedule) {
  RunConfig cfg = parse_config_file(config_path);
  const uint64_t seed = cli_seed >= 0 ? static_cast<uint64_t>(cli_seed) : cfg.seed;
  const std::string out_dir = resolve_output_dir(config_path, cfg.out_dir, cli_out);

  harness::RunRecord rec = schedule
                               ? harness::replay_schedule(*schedule, cfg, seed)
                               : harness::train_run(cfg, seed);
  harness::write_run_artifacts(out_dir, rec);
  std::cout << "run complete: " << out_dir << "\n"
            << "terminal sigma = " << fmt17(rec.terminal_sigma) << "\n"
            << "final elbo = " << fmt17(rec.final_elbo_mean) << " +- "
            << fmt17(rec.final_elbo_std) << "\n";
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"vaelab: VAE observation-model laboratory"};
  app.require_subcommand(1);

  // ---- theory ----
  CLI::App* theory = app.add_subcommand("theory", "sphere-density numerics");
  theory->require_subcommand(1);

  int dim = 2;
  double radius = 1.0, sigma = 1.0, r_query = 0.5;
  long long mc_n = 1000000;
  long long seed_opt = 0;

  CLI::App* threshold = theory->add_subcommand(
      "threshold", "collapse threshold R / sqrt(D-1)");
  threshold->add_option("--D", dim, "ambient dimension")->required();
  threshold->add_option("--R", radius, "sphere radius")->required();

  CLI::App* optimal_r = theory->add_subcommand(
      "optimal-r", "maximizer of the optimal density over r");
  optimal_r->add_option("--D", dim)->required();
  optimal_r->add_option("--R", radius)->required();
  optimal_r->add_option("--sigma", sigma)->required();

  std::string out_path, pgm_path;
  int hm_rows = 200, hm_cols = 200;
  double ratio_max = 4.0, rho_max = 4.0;
  bool hm_raw = false;
  CLI::App* heatmap = theory->add_subcommand("heatmap", "D=2 density heat map");
  heatmap->add_option("--rows", hm_rows, "r/sigma resolution");
  heatmap->add_option("--cols", hm_cols, "R/sigma resolution");
  heatmap->add_option("--rho-max", rho_max, "r/sigma upper end");
  heatmap->add_option("--ratio-max", ratio_max, "R/sigma upper end");
  heatmap->add_option("--out", out_path, "output CSV")->required();
  heatmap->add_option("--pgm", pgm_path, "optional grayscale image");
  heatmap->add_flag("--raw", hm_raw, "skip per-column normalization");

  CLI::App* oracle = theory->add_subcommand(
      "oracle", "Monte-Carlo density estimate vs quadrature");
  oracle->add_option("--D", dim)->required();
  oracle->add_option("--R", radius)->required();
  oracle->add_option("--sigma", sigma)->required();
  oracle->add_option("--r", r_query)->required();
  oracle->add_option("--n", mc_n, "sample count");
  oracle->add_option("--seed", seed_opt);

  // ---- data ----
  CLI::App* data_cmd = app.add_subcommand("data", "canonical dataset tools");
  data_cmd->require_subcommand(1);
  int sample_n = 100;
  CLI::App* sample = data_cmd->add_subcommand("sample", "draw dataset samples");
  sample->add_option("--n", sample_n, "number of points")->required();
  sample->add_option("--seed", seed_opt);
  sample->add_option("--out", out_path, "output CSV")->required();

  // ---- train / replay / eval ----
  std::string config_path, schedule_path, checkpoint_path, cli_out;
  long long cli_seed = -1;
  CLI::App* train = app.add_subcommand("train", "train one VAE run");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--seed", cli_seed, "overrides the config seed");
  train->add_option("--out", cli_out, "overrides the output directory");

  CLI::App* replay = app.add_subcommand("replay", "train with an imposed sigma schedule");
  replay->add_option("--config", config_path)->required();
  replay->add_option("--schedule", schedule_path, "sigma_schedule.csv")->required();
  replay->add_option("--seed", cli_seed);
  replay->add_option("--out", cli_out);

  int eval_batches = 50, eval_samples = 64;
  bool no_correction = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint's ELBO");
  eval_cmd->add_option("--config", config_path)->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path)->required();
  eval_cmd->add_option("--batches", eval_batches);
  eval_cmd->add_option("--samples", eval_samples);
  eval_cmd->add_option("--seed", seed_opt);
  eval_cmd->add_flag("--no-correction", no_correction,
                     "report the fixed-scalar ELBO without the D log sigma term");

  // ---- table1 ----
  int t1_seeds = 3;
  long long t1_seed_base = 0;
  long long t1_steps = 20000;
  int t1_jobs = 0;
  std::string t1_runs_dir;
  bool t1_no_replay = false;
  CLI::App* table1 = app.add_subcommand("table1", "full observation-model sweep");
  table1->add_option("--seeds", t1_seeds, "number of seeds (>= 3)");
  table1->add_option("--seed-base", t1_seed_base, "first seed value");
  table1->add_option("--steps", t1_steps);
  table1->add_option("--jobs", t1_jobs, "parallel runs (0 = hardware)");
  table1->add_option("--out", out_path, "summary CSV")->required();
  table1->add_option("--runs-dir", t1_runs_dir, "per-run artifact directory");
  table1->add_flag("--no-replay", t1_no_replay, "skip the schedule-replay runs");

  try {
    // CLI11's vector overload consumes arguments from the back
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\nerror: " << e.what() << "\n";
    return 2;
  }

  try {
    if (threshold->parsed()) {
      std::cout << fmt17(theory::collapse_threshold(dim, radius)) << "\n";
    } else if (optimal_r->parsed()) {
      std::cout << fmt17(theory::optimal_radius({dim, radius, sigma})) << "\n";
    } else if (heatmap->parsed()) {
      theory::HeatmapGrid grid;
      grid.rows = hm_rows;
      grid.cols = hm_cols;
      grid.rho_max = rho_max;
      grid.ratio_max = ratio_max;
      grid.column_normalize = !hm_raw;
      const theory::Heatmap hm = theory::heatmap_d2(grid);
      auto out = open_out(out_path);
      theory::write_heatmap_csv(out, hm);
      if (!pgm_path.empty()) {
        auto pgm = open_out(pgm_path);
        theory::write_heatmap_pgm(pgm, hm);
      }
      std::cout << "transition R/sigma = "
                << fmt17(theory::heatmap_transition_ratio(hm)) << "\n";
    } else if (oracle->parsed()) {
      const theory::SphereProblem prob{dim, radius, sigma};
      Rng rng(static_cast<uint64_t>(seed_opt));
      const theory::McEstimate est =
          theory::mc_density_oracle(r_query, prob, mc_n, rng);
      const double quad = std::exp(theory::log_ptheta_unnorm(r_query, prob) +
                                   theory::log_density_normalizer(prob));
      std::cout << "mc_mean=" << fmt17(est.mean) << " mc_std_err="
                << fmt17(est.std_err) << " quadrature=" << fmt17(quad) << "\n";
    } else if (sample->parsed()) {
      Rng rng(static_cast<uint64_t>(seed_opt));
      const auto samples = data::sample_batch(sample_n, rng);
      auto out = open_out(out_path);
      data::write_samples_csv(out, samples);
    } else if (train->parsed()) {
      run_train(config_path, cli_seed, cli_out, nullptr);
    } else if (replay->parsed()) {
      std::ifstream in(schedule_path);
      if (!in) throw std::runtime_error("cannot open schedule " + schedule_path);
      const harness::SigmaSchedule schedule = harness::read_schedule_csv(in);
      run_train(config_path, cli_seed, cli_out, &schedule);
    } else if (eval_cmd->parsed()) {
      const RunConfig cfg = parse_config_file(config_path);
      VaeModel model(cfg.model, 0);
      load_into(model.params(), load_checkpoint(checkpoint_path));
      const harness::ElboReport report =
          harness::eval_elbo(model, eval_batches, eval_samples,
                             static_cast<uint64_t>(seed_opt), !no_correction);
      std::cout << "elbo_mean=" << fmt17(report.elbo_mean)
                << " elbo_std=" << fmt17(report.elbo_std)
                << " correction=" << (report.correction_applied ? "on" : "off")
                << "\n";
    } else if (table1->parsed()) {
      if (t1_seeds < 3) throw std::runtime_error("table1 needs at least 3 seeds");
      harness::Table1Options opts;
      for (int i = 0; i < t1_seeds; ++i)
        opts.seeds.push_back(static_cast<uint64_t>(t1_seed_base + i));
      opts.steps = t1_steps;
      opts.jobs = t1_jobs;
      opts.runs_dir = t1_runs_dir;
      opts.include_replay = !t1_no_replay;
      const harness::Table1Result result = harness::table1_experiment(opts);
      auto out = open_out(out_path);
      harness::write_table1_csv(out, result);
      harness::write_table1_csv(std::cout, result);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace vaelab::cli
