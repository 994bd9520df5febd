#include "vaelab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "vaelab/adam.hpp"
#include "vaelab/dataset.hpp"
#include "vaelab/util.hpp"

namespace vaelab::harness {

namespace {

// rng stream tags
constexpr uint64_t kInitStream = 1;
constexpr uint64_t kDataStream = 2;
constexpr uint64_t kEpsStream = 3;
constexpr uint64_t kEvalStream = 4;
constexpr uint64_t kEvalBatchStream = 5;

void check_schedule(const SigmaSchedule& schedule) {
  if (schedule.empty()) throw std::invalid_argument("sigma schedule is empty");
  if (schedule.front().step != 0)
    throw std::invalid_argument("sigma schedule must start at step 0");
  for (size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i].sigma > 0))
      throw std::invalid_argument("sigma schedule values must be positive");
    if (i > 0 && schedule[i].step <= schedule[i - 1].step)
      throw std::invalid_argument("sigma schedule steps must be increasing");
  }
}

double step_sigma(const VaeModel& model, const VaeModel::LossVars& loss,
                  std::optional<double> sigma_override) {
  if (sigma_override) return *sigma_override;
  if (std::holds_alternative<LearnedVector>(model.config().obs_model))
    return loss.dec.log_sigma->value().array().exp().mean();
  return model.scalar_sigma();
}

RunRecord train_run_impl(const RunConfig& cfg, uint64_t seed,
                         const SigmaSchedule* schedule) {
  validate(cfg);
  if (schedule) {
    check_schedule(*schedule);
    if (!std::holds_alternative<FixedScalar>(cfg.model.obs_model))
      throw std::invalid_argument("schedule replay requires a fixed-scalar model");
  }

  RunRecord rec;
  rec.config = cfg;
  rec.seed = seed;
  rec.model = std::make_shared<VaeModel>(cfg.model, mix_seed(seed, kInitStream));
  VaeModel& model = *rec.model;

  Adam adam({cfg.model.learning_rate, 0.9, 0.999, 1e-8});
  Rng data_rng(mix_seed(seed, kDataStream));
  Rng eps_rng(mix_seed(seed, kEpsStream));

  const long steps = cfg.model.steps;
  rec.steps.reserve(static_cast<size_t>(steps));

  std::vector<Eigen::MatrixXd> grads(model.params().size());
  for (long step = 0; step < steps; ++step) {
    const Eigen::MatrixXd X = data::sample_matrix(cfg.model.batch_size, data_rng);
    const Eigen::MatrixXd eps =
        eps_rng.normal_matrix(cfg.model.batch_size, cfg.model.latent_dim);

    std::optional<double> sigma_override;
    if (schedule) sigma_override = schedule_sigma_at(*schedule, step);

    ad::Tape tape;
    VaeModel::Bound bound = model.bind(tape, true);
    VaeModel::LossVars loss =
        model.loss_graph(bound, tape.leaf(X), tape.leaf(eps), sigma_override);

    StepStats stats;
    stats.step = step;
    stats.recon = loss.recon.scalar();
    stats.kl = loss.kl.scalar();
    stats.total = loss.total.scalar();
    stats.sigma = step_sigma(model, loss, sigma_override);
    if (!std::isfinite(stats.total))
      throw std::runtime_error("train_run: non-finite loss at step " +
                               std::to_string(step));
    rec.steps.push_back(stats);

    tape.backward(loss.total);
    for (size_t i = 0; i < bound.p.size(); ++i) grads[i] = bound.p[i].grad();
    adam.step(model.params(), grads);

    const long done = step + 1;
    if ((cfg.eval_interval > 0 && done % cfg.eval_interval == 0) || done == steps) {
      ElboReport report = eval_elbo(model, cfg.eval_batches, cfg.eval_samples,
                                    mix_seed(seed, kEvalStream, static_cast<uint64_t>(done)));
      rec.evals.push_back({done, report.elbo_mean, report.elbo_std});
    }
  }

  if (schedule)
    rec.terminal_sigma = schedule_sigma_at(*schedule, steps - 1);
  else if (std::holds_alternative<LearnedVector>(cfg.model.obs_model))
    rec.terminal_sigma = rec.steps.back().sigma;
  else
    rec.terminal_sigma = model.scalar_sigma();
  rec.final_elbo_mean = rec.evals.back().mean;
  rec.final_elbo_std = rec.evals.back().stddev;
  return rec;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%FT%TZ", &tm_utc);
  return buf;
}

// Runs tasks on `jobs` threads; rethrows the first failure.
void run_parallel(std::vector<std::function<void()>>& tasks, int jobs) {
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors(tasks.size());
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace

RunRecord train_run(const RunConfig& cfg, uint64_t seed) {
  return train_run_impl(cfg, seed, nullptr);
}

RunRecord replay_schedule(const SigmaSchedule& schedule, RunConfig cfg, uint64_t seed) {
  check_schedule(schedule);
  if (!std::holds_alternative<FixedScalar>(cfg.model.obs_model))
    throw std::invalid_argument("replay_schedule: config must use a fixed-scalar model");
  std::get<FixedScalar>(cfg.model.obs_model).sigma = schedule.front().sigma;
  RunRecord rec = train_run_impl(cfg, seed, &schedule);
  rec.note = "replay";
  return rec;
}

ElboReport eval_elbo(const VaeModel& model, int n_batches, int k_samples,
                     uint64_t eval_seed, bool correction) {
  if (n_batches < 1 || k_samples < 1)
    throw std::invalid_argument("eval_elbo: batches and samples must be positive");
  const VaeConfig& cfg = model.config();
  const int batch = cfg.batch_size;
  const int chunk = std::max(1, 1600 / batch);  // latent draws decoded per pass

  std::vector<double> means;
  means.reserve(static_cast<size_t>(n_batches));
  for (int b = 0; b < n_batches; ++b) {
    Rng rng(mix_seed(eval_seed, kEvalBatchStream, static_cast<uint64_t>(b)));
    const Eigen::MatrixXd X = data::sample_matrix(batch, rng);
    const VaeModel::EncoderOutput enc = model.encode(X);
    const Eigen::ArrayXXd sigma_z = enc.log_sigma.array().exp();

    Eigen::ArrayXd kl =
        0.5 * (enc.mu.array().square() + sigma_z.square() -
               2.0 * enc.log_sigma.array() - 1.0)
                  .rowwise()
                  .sum();

    Eigen::ArrayXd log_p_sum = Eigen::ArrayXd::Zero(batch);
    for (int k0 = 0; k0 < k_samples; k0 += chunk) {
      const int kk = std::min(chunk, k_samples - k0);
      Eigen::MatrixXd Z(batch * kk, cfg.latent_dim);
      for (int j = 0; j < kk; ++j) {
        const Eigen::MatrixXd eps = rng.normal_matrix(batch, cfg.latent_dim);
        Z.middleRows(j * batch, batch) =
            enc.mu.array() + sigma_z * eps.array();
      }
      const VaeModel::DecoderOutput dec = model.decode(Z);
      const Eigen::VectorXd ll =
          model.log_likelihood_rows(X.replicate(kk, 1), dec);
      for (int j = 0; j < kk; ++j)
        log_p_sum += ll.segment(j * batch, batch).array();
    }

    const Eigen::ArrayXd elbo = log_p_sum / k_samples - kl;
    means.push_back(elbo.mean());
  }

  ElboReport report;
  const double n = static_cast<double>(n_batches);
  report.elbo_mean = std::accumulate(means.begin(), means.end(), 0.0) / n;
  double ssq = 0;
  for (double m : means) ssq += (m - report.elbo_mean) * (m - report.elbo_mean);
  report.elbo_std = n > 1 ? std::sqrt(ssq / (n - 1)) : 0.0;

  if (const auto* f = std::get_if<FixedScalar>(&cfg.obs_model); f && !correction) {
    // strip the D log sigma fairness term
    report.elbo_mean += cfg.data_dim * std::log(f->sigma);
    report.correction_applied = false;
  }
  return report;
}

double schedule_sigma_at(const SigmaSchedule& schedule, long step) {
  check_schedule(schedule);
  auto it = std::upper_bound(
      schedule.begin(), schedule.end(), step,
      [](long s, const ScheduleEntry& e) { return s < e.step; });
  return std::prev(it)->sigma;
}

SigmaSchedule record_sigma_schedule(const RunRecord& run, double rel_tol) {
  // replay runs carry an imposed trajectory, which is equally extractable
  if (!std::holds_alternative<LearnedScalar>(run.config.model.obs_model) &&
      run.note != "replay")
    throw std::invalid_argument(
        "record_sigma_schedule: run must use the learned-scalar model");
  if (run.steps.empty())
    throw std::invalid_argument("record_sigma_schedule: run has no steps");

  SigmaSchedule out;
  for (const StepStats& s : run.steps) {
    if (out.empty() ||
        std::abs(s.sigma - out.back().sigma) > rel_tol * out.back().sigma)
      out.push_back({s.step, s.sigma});
  }
  const StepStats& last = run.steps.back();
  if (last.sigma != out.back().sigma) out.push_back({last.step, last.sigma});
  return out;
}

double sigma_drop_concentration(const std::vector<StepStats>& steps,
                                double step_fraction) {
  if (steps.size() < 2)
    throw std::invalid_argument("sigma_drop_concentration: need at least two steps");
  std::vector<double> drops;
  drops.reserve(steps.size() - 1);
  for (size_t i = 0; i + 1 < steps.size(); ++i)
    drops.push_back(std::max(0.0, steps[i].sigma - steps[i + 1].sigma));
  const double net = steps.front().sigma - steps.back().sigma;
  if (!(net > 0)) return 1.0;
  const size_t budget = static_cast<size_t>(
      std::ceil(step_fraction * static_cast<double>(drops.size())));
  std::partial_sort(drops.begin(), drops.begin() + static_cast<long>(budget),
                    drops.end(), std::greater<>());
  const double covered =
      std::accumulate(drops.begin(), drops.begin() + static_cast<long>(budget), 0.0);
  return covered / net;
}

Eigen::MatrixXd reconstruct(const VaeModel& model, const Eigen::MatrixXd& X) {
  const VaeModel::EncoderOutput enc = model.encode(X);
  return model.decode(enc.mu).mu;
}

void reconstruct_dump(const VaeModel& model, const Eigen::MatrixXd& X,
                      std::ostream& out) {
  const Eigen::MatrixXd Xhat = reconstruct(model, X);
  const int d = static_cast<int>(X.cols());
  for (int j = 0; j < d; ++j) out << "x" << j + 1 << ",";
  for (int j = 0; j < d; ++j) out << "xhat" << j + 1 << (j + 1 < d ? "," : "\n");
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (int j = 0; j < d; ++j) out << fmt17(X(i, j)) << ",";
    for (int j = 0; j < d; ++j)
      out << fmt17(Xhat(i, j)) << (j + 1 < d ? "," : "\n");
  }
}

GenerateResult generate(const VaeModel& model, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  const VaeConfig& cfg = model.config();
  GenerateResult res;
  res.z = rng.normal_matrix(n, cfg.latent_dim);
  const VaeModel::DecoderOutput dec = model.decode(res.z);
  res.mean = dec.mu;
  const Eigen::MatrixXd noise = rng.normal_matrix(n, cfg.data_dim);
  if (dec.log_sigma)
    res.sample = dec.mu.array() + dec.log_sigma->array().exp() * noise.array();
  else
    res.sample = dec.mu + model.scalar_sigma() * noise;
  return res;
}

void generate_dump(const VaeModel& model, int n, Rng& rng, std::ostream& out) {
  const GenerateResult res = generate(model, n, rng);
  const int l = static_cast<int>(res.z.cols());
  const int d = static_cast<int>(res.mean.cols());
  for (int j = 0; j < l; ++j) out << "z" << j + 1 << ",";
  for (int j = 0; j < d; ++j) out << "mu" << j + 1 << ",";
  for (int j = 0; j < d; ++j) out << "x" << j + 1 << (j + 1 < d ? "," : "\n");
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < l; ++j) out << fmt17(res.z(i, j)) << ",";
    for (int j = 0; j < d; ++j) out << fmt17(res.mean(i, j)) << ",";
    for (int j = 0; j < d; ++j)
      out << fmt17(res.sample(i, j)) << (j + 1 < d ? "," : "\n");
  }
}

void write_metrics_csv(std::ostream& out, const RunRecord& rec) {
  out << "step,recon,kl,total,sigma\n";
  for (const StepStats& s : rec.steps)
    out << s.step << "," << fmt17(s.recon) << "," << fmt17(s.kl) << ","
        << fmt17(s.total) << "," << fmt17(s.sigma) << "\n";
}

void write_elbo_csv(std::ostream& out, const RunRecord& rec) {
  out << "step,elbo_mean,elbo_std\n";
  for (const ElboPoint& e : rec.evals)
    out << e.step << "," << fmt17(e.mean) << "," << fmt17(e.stddev) << "\n";
}

void write_manifest_json(std::ostream& out, const RunRecord& rec) {
  nlohmann::json j;
  const VaeConfig& m = rec.config.model;
  j["config"] = {
      {"data_dim", m.data_dim},
      {"latent_dim", m.latent_dim},
      {"blocks", m.blocks},
      {"width", m.width},
      {"obs_model", obs_model_name(m.obs_model)},
      {"lambda", m.lambda_weight},
      {"learning_rate", m.learning_rate},
      {"batch_size", m.batch_size},
      {"steps", m.steps},
      {"eval_interval", rec.config.eval_interval},
      {"eval_batches", rec.config.eval_batches},
      {"eval_samples", rec.config.eval_samples},
  };
  if (const auto* f = std::get_if<FixedScalar>(&m.obs_model))
    j["config"]["sigma"] = f->sigma;
  j["seed"] = rec.seed;
  j["terminal_sigma"] = rec.terminal_sigma;
  j["final_elbo"] = {{"mean", rec.final_elbo_mean}, {"std", rec.final_elbo_std}};
  if (!rec.note.empty()) j["note"] = rec.note;
  j["timestamp"] = iso_timestamp();
  out << j.dump(2) << "\n";
}

void write_schedule_csv(std::ostream& out, const SigmaSchedule& schedule) {
  out << "step,sigma\n";
  for (const ScheduleEntry& e : schedule)
    out << e.step << "," << fmt17(e.sigma) << "\n";
}

SigmaSchedule read_schedule_csv(std::istream& in) {
  SigmaSchedule out;
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,sigma", 0) != 0)
    throw std::runtime_error("schedule csv: expected header 'step,sigma'");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ScheduleEntry e;
    char extra;
    if (std::sscanf(line.c_str(), "%ld,%lf%c", &e.step, &e.sigma, &extra) != 2)
      throw std::runtime_error("schedule csv: malformed line " + std::to_string(line_no));
    out.push_back(e);
  }
  check_schedule(out);
  return out;
}

void write_run_artifacts(const std::string& dir, const RunRecord& rec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base(dir);
  {
    std::ofstream out(base / "metrics.csv");
    write_metrics_csv(out, rec);
  }
  {
    std::ofstream out(base / "elbo.csv");
    write_elbo_csv(out, rec);
  }
  {
    std::ofstream out(base / "manifest.json");
    write_manifest_json(out, rec);
  }
  save_checkpoint((base / "ckpt.bin").string(), rec.model->params());
  if (std::holds_alternative<LearnedScalar>(rec.config.model.obs_model)) {
    std::ofstream out(base / "sigma_schedule.csv");
    write_schedule_csv(out, record_sigma_schedule(rec));
  }
}

Table1Result table1_experiment(const Table1Options& opts) {
  if (opts.seeds.size() < 3)
    throw std::invalid_argument("table1_experiment: need at least 3 seeds");
  if (opts.steps < 1) throw std::invalid_argument("table1_experiment: steps must be positive");

  auto base_config = [&](ObsModelSpec obs) {
    RunConfig cfg;
    cfg.model.obs_model = std::move(obs);
    cfg.model.steps = opts.steps;
    cfg.eval_interval = opts.eval_interval;
    cfg.eval_batches = opts.eval_batches;
    cfg.eval_samples = opts.eval_samples;
    return cfg;
  };

  struct Setting {
    std::string name, sigma_spec;
    RunConfig cfg;
  };
  std::vector<Setting> settings;
  for (double sigma : opts.fixed_sigmas)
    settings.push_back({"f-vae-" + short_num(sigma), "fixed " + short_num(sigma),
                        base_config(FixedScalar{sigma})});
  settings.push_back({"ls-vae", "learned scalar", base_config(LearnedScalar{})});
  settings.push_back({"lv-vae", "learned vector", base_config(LearnedVector{})});

  Table1Result result;
  const size_t n_seeds = opts.seeds.size();
  for (const Setting& s : settings)
    result.runs[s.name].resize(n_seeds);

  auto artifact_dir = [&](const std::string& setting, size_t i) {
    return opts.runs_dir + "/" + setting + "/seed" + std::to_string(opts.seeds[i]);
  };
  auto make_task = [&](const std::string& setting, size_t i, RunConfig cfg) {
    return [&, setting, i, cfg]() {
      RunRecord rec = train_run(cfg, opts.seeds[i]);
      if (!opts.runs_dir.empty()) write_run_artifacts(artifact_dir(setting, i), rec);
      result.runs.at(setting)[i] = std::move(rec);
    };
  };

  std::vector<std::function<void()>> tasks;
  for (const Setting& s : settings)
    for (size_t i = 0; i < n_seeds; ++i) tasks.push_back(make_task(s.name, i, s.cfg));
  run_parallel(tasks, opts.jobs);

  // second phase needs each seed's learned-scalar outcome
  result.runs["fstar-vae"].resize(n_seeds);
  if (opts.include_replay) result.runs["replay-vae"].resize(n_seeds);

  tasks.clear();
  for (size_t i = 0; i < n_seeds; ++i) {
    const RunRecord& ls = result.runs["ls-vae"][i];
    RunConfig fstar = base_config(FixedScalar{ls.terminal_sigma});
    tasks.push_back(make_task("fstar-vae", i, fstar));
    if (opts.include_replay) {
      SigmaSchedule schedule = record_sigma_schedule(ls);
      RunConfig replay_cfg = base_config(FixedScalar{schedule.front().sigma});
      // fresh initialization: the schedule, not the weights, carries over
      const uint64_t replay_seed = opts.seeds[i] + 1000003;
      tasks.push_back([&, i, schedule, replay_cfg, replay_seed]() {
        RunRecord rec = replay_schedule(schedule, replay_cfg, replay_seed);
        if (!opts.runs_dir.empty())
          write_run_artifacts(artifact_dir("replay-vae", i), rec);
        result.runs.at("replay-vae")[i] = std::move(rec);
      });
    }
  }
  run_parallel(tasks, opts.jobs);

  // assemble rows in presentation order: f grid, ls, lv, fstar, replay
  result.rows.clear();
  auto add_row = [&](const std::string& name, const std::string& sigma_spec) {
    const auto& recs = result.runs[name];
    Table1Row row;
    row.setting = name;
    row.sigma_spec = sigma_spec;
    double sum = 0;
    for (const RunRecord& r : recs) sum += r.final_elbo_mean;
    row.elbo_mean = sum / static_cast<double>(recs.size());
    double ssq = 0;
    for (const RunRecord& r : recs)
      ssq += (r.final_elbo_mean - row.elbo_mean) * (r.final_elbo_mean - row.elbo_mean);
    row.elbo_std = recs.size() > 1
                       ? std::sqrt(ssq / static_cast<double>(recs.size() - 1))
                       : 0.0;
    result.rows.push_back(row);
  };
  for (const Setting& s : settings) add_row(s.name, s.sigma_spec);
  add_row("fstar-vae", "fixed at ls-vae terminal sigma");
  if (opts.include_replay) add_row("replay-vae", "ls-vae sigma schedule replay");
  return result;
}

void write_table1_csv(std::ostream& out, const Table1Result& result) {
  out << "setting,sigma_spec,elbo_mean,elbo_std\n";
  for (const Table1Row& row : result.rows)
    out << row.setting << "," << row.sigma_spec << "," << fmt17(row.elbo_mean)
        << "," << fmt17(row.elbo_std) << "\n";
}

}  // namespace vaelab::harness
