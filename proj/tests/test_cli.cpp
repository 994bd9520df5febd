#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vaelab/cli.hpp"
#include "vaelab/config.hpp"

using namespace vaelab;
namespace fs = std::filesystem;

namespace {

struct CaptureStdout {
  std::ostringstream buffer;
  std::streambuf* old;
  CaptureStdout() : old(std::cout.rdbuf(buffer.rdbuf())) {}
  ~CaptureStdout() { std::cout.rdbuf(old); }
};

int run(std::initializer_list<const char*> args, std::string* out = nullptr) {
  std::vector<std::string> v;
  for (const char* a : args) v.emplace_back(a);
  CaptureStdout cap;
  const int code = cli::dispatch(v);
  if (out) *out = cap.buffer.str();
  return code;
}

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "vaelab_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("config: empty text yields the documented defaults") {
  const RunConfig cfg = parse_config_text("", "empty.cfg");
  CHECK(cfg.model.data_dim == 2);
  CHECK(cfg.model.latent_dim == 2);
  CHECK(cfg.model.blocks == 4);
  CHECK(cfg.model.width == 200);
  CHECK(cfg.model.batch_size == 100);
  CHECK(cfg.model.steps == 20000);
  CHECK(cfg.model.lambda_weight == 1.0);
  CHECK(cfg.model.learning_rate == 1e-3);
  CHECK(cfg.eval_interval == 500);
  CHECK(cfg.eval_batches == 50);
  CHECK(cfg.eval_samples == 64);
  CHECK(std::holds_alternative<LearnedScalar>(cfg.model.obs_model));
}

TEST_CASE("config: learned-scalar starts at sigma = 1") {
  const RunConfig cfg =
      parse_config_text("obs_model = learned-scalar\n", "t.cfg");
  const auto& ls = std::get<LearnedScalar>(cfg.model.obs_model);
  CHECK(ls.init_log_sigma == 0.0);
}

TEST_CASE("config: values, comments and whitespace") {
  const std::string text =
      "# a comment\n"
      "obs_model = fixed-scalar\n"
      "sigma = 0.25   # inline comment\n"
      "\n"
      "steps= 1234\n"
      "lambda =2.5\n";
  const RunConfig cfg = parse_config_text(text, "t.cfg");
  CHECK(std::get<FixedScalar>(cfg.model.obs_model).sigma == 0.25);
  CHECK(cfg.model.steps == 1234);
  CHECK(cfg.model.lambda_weight == 2.5);
}

TEST_CASE("config: errors name the key and line") {
  CHECK_THROWS_WITH_AS(
      parse_config_text("obs_model = fixed-scalar\nsigma = -1\n", "bad.cfg"),
      doctest::Contains("bad.cfg:2"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("wibble = 3\n", "bad.cfg"),
                       doctest::Contains("unknown key 'wibble'"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("steps = ten\n", "bad.cfg"),
                       doctest::Contains("steps"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("steps = 5\nsteps = 6\n", "bad.cfg"),
                       doctest::Contains("twice"), std::runtime_error);
  // sigma is a fixed-scalar knob only
  CHECK_THROWS_WITH_AS(
      parse_config_text("obs_model = learned-scalar\nsigma = 0.1\n", "bad.cfg"),
      doctest::Contains("fixed-scalar"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config_text("obs_model = gaussian\n", "bad.cfg"),
                       doctest::Contains("obs_model"), std::runtime_error);
}

TEST_CASE("output directory resolution precedence") {
  unsetenv("VAELAB_OUT");
  CHECK(resolve_output_dir("/a/b/run.cfg", "out") == "/a/b/out");
  CHECK(resolve_output_dir("/a/b/run.cfg", "/abs/out") == "/abs/out");
  CHECK(resolve_output_dir("/a/b/run.cfg", "out", "/cli/dir") == "/cli/dir");
  setenv("VAELAB_OUT", "/env/root", 1);
  CHECK(resolve_output_dir("/a/b/run.cfg", "out") == "/env/root/out");
  unsetenv("VAELAB_OUT");
}

TEST_CASE("cli: threshold prints the closed form") {
  std::string out;
  CHECK(run({"theory", "threshold", "--D", "5", "--R", "2"}, &out) == 0);
  CHECK(out == "1\n");
}

TEST_CASE("cli: unknown subcommand exits 2 with usage") {
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({}) == 2);
  CHECK(run({"theory"}) == 2);  // missing nested subcommand
}

TEST_CASE("cli: execution errors exit 1") {
  CHECK(run({"theory", "threshold", "--D", "1", "--R", "2"}) == 1);
  CHECK(run({"train", "--config", "/nonexistent.cfg"}) == 1);
}

TEST_CASE("cli: heatmap writes the declared csv shape") {
  const fs::path dir = temp_dir();
  const fs::path csv = dir / "hm.csv";
  const fs::path pgm = dir / "hm.pgm";
  CHECK(run({"theory", "heatmap", "--rows", "20", "--cols", "10", "--out",
             csv.c_str(), "--pgm", pgm.c_str()}) == 0);
  CHECK(count_lines(csv) == 21);  // header + rows
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 10);
  CHECK(fs::file_size(pgm) > 200);
  fs::remove_all(dir);
}

TEST_CASE("cli: data sample emits the documented columns") {
  const fs::path dir = temp_dir();
  const fs::path csv = dir / "data.csv";
  CHECK(run({"data", "sample", "--n", "25", "--seed", "3", "--out",
             csv.c_str()}) == 0);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x1,x2,t,region,noise");
  CHECK(count_lines(csv) == 26);
  fs::remove_all(dir);
}

TEST_CASE("cli: train, eval and replay round trip") {
  const fs::path dir = temp_dir();
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "obs_model = learned-scalar\nwidth = 16\nblocks = 1\nsteps = 40\n"
        << "batch_size = 10\neval_interval = 0\neval_batches = 2\n"
        << "eval_samples = 2\nout_dir = out\n";
  }
  std::string out;
  CHECK(run({"train", "--config", (dir / "run.cfg").c_str(), "--seed", "7"},
            &out) == 0);
  for (const char* name : {"metrics.csv", "elbo.csv", "manifest.json",
                           "ckpt.bin", "sigma_schedule.csv"})
    CHECK(fs::exists(dir / "out" / name));

  CHECK(run({"eval", "--config", (dir / "run.cfg").c_str(), "--checkpoint",
             (dir / "out" / "ckpt.bin").c_str(), "--batches", "2", "--samples",
             "2"},
            &out) == 0);
  CHECK(out.find("elbo_mean=") != std::string::npos);

  {
    std::ofstream cfg(dir / "replay.cfg");
    cfg << "obs_model = fixed-scalar\nsigma = 1\nwidth = 16\nblocks = 1\n"
        << "steps = 40\nbatch_size = 10\neval_interval = 0\neval_batches = 2\n"
        << "eval_samples = 2\nout_dir = replay_out\n";
  }
  CHECK(run({"replay", "--config", (dir / "replay.cfg").c_str(), "--schedule",
             (dir / "out" / "sigma_schedule.csv").c_str(), "--seed", "8"},
            &out) == 0);
  CHECK(fs::exists(dir / "replay_out" / "metrics.csv"));
  fs::remove_all(dir);
}

TEST_CASE("cli: identical invocations produce identical outputs") {
  const fs::path dir = temp_dir();
  const fs::path a = dir / "a.csv", b = dir / "b.csv";
  CHECK(run({"data", "sample", "--n", "50", "--seed", "11", "--out", a.c_str()}) == 0);
  CHECK(run({"data", "sample", "--n", "50", "--seed", "11", "--out", b.c_str()}) == 0);
  std::ifstream fa(a), fb(b);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  CHECK(sa.str() == sb.str());
  fs::remove_all(dir);
}
