#include "vaelab/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vaelab {

namespace {

struct RawEntry {
  std::string value;
  int line;
};

[[noreturn]] void fail(const std::string& source, int line, const std::string& msg) {
  throw std::runtime_error(source + ":" + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& source, const RawEntry& e, const std::string& key) {
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(e.value, &pos);
  } catch (const std::exception&) {
    fail(source, e.line, "key '" + key + "': expected a number, got '" + e.value + "'");
  }
  if (pos != e.value.size())
    fail(source, e.line, "key '" + key + "': trailing characters in '" + e.value + "'");
  return v;
}

long parse_long(const std::string& source, const RawEntry& e, const std::string& key) {
  size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(e.value, &pos);
  } catch (const std::exception&) {
    fail(source, e.line, "key '" + key + "': expected an integer, got '" + e.value + "'");
  }
  if (pos != e.value.size())
    fail(source, e.line, "key '" + key + "': trailing characters in '" + e.value + "'");
  return v;
}

}  // namespace

void validate(const RunConfig& cfg) {
  validate(cfg.model);
  if (cfg.eval_interval < 0)
    throw std::invalid_argument("RunConfig: eval_interval must be >= 0");
  if (cfg.eval_batches < 1)
    throw std::invalid_argument("RunConfig: eval_batches must be positive");
  if (cfg.eval_samples < 1)
    throw std::invalid_argument("RunConfig: eval_samples must be positive");
  if (cfg.out_dir.empty())
    throw std::invalid_argument("RunConfig: out_dir must not be empty");
}

RunConfig parse_config_text(const std::string& text, const std::string& source_name) {
  std::map<std::string, RawEntry> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(source_name, line_no, "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(source_name, line_no, "missing key before '='");
    if (value.empty()) fail(source_name, line_no, "key '" + key + "': missing value");
    if (entries.count(key))
      fail(source_name, line_no, "key '" + key + "' appears twice");
    entries[key] = {value, line_no};
  }

  RunConfig cfg;
  auto take = [&](const char* key) -> const RawEntry* {
    auto it = entries.find(key);
    if (it == entries.end()) return nullptr;
    return &it->second;
  };
  auto take_int = [&](const char* key, int lo, auto setter) {
    if (const RawEntry* e = take(key)) {
      const long v = parse_long(source_name, *e, key);
      if (v < lo)
        fail(source_name, e->line, "key '" + std::string(key) + "': must be >= " + std::to_string(lo));
      setter(v);
    }
  };
  auto take_positive_double = [&](const char* key, auto setter) {
    if (const RawEntry* e = take(key)) {
      const double v = parse_double(source_name, *e, key);
      if (!(v > 0))
        fail(source_name, e->line, "key '" + std::string(key) + "': must be positive");
      setter(v);
    }
  };

  take_int("data_dim", 1, [&](long v) { cfg.model.data_dim = static_cast<int>(v); });
  take_int("latent_dim", 1, [&](long v) { cfg.model.latent_dim = static_cast<int>(v); });
  take_int("blocks", 0, [&](long v) { cfg.model.blocks = static_cast<int>(v); });
  take_int("width", 1, [&](long v) { cfg.model.width = static_cast<int>(v); });
  take_int("batch_size", 1, [&](long v) { cfg.model.batch_size = static_cast<int>(v); });
  take_int("steps", 1, [&](long v) { cfg.model.steps = v; });
  take_int("seed", 0, [&](long v) { cfg.seed = static_cast<uint64_t>(v); });
  take_int("eval_interval", 0, [&](long v) { cfg.eval_interval = v; });
  take_int("eval_batches", 1, [&](long v) { cfg.eval_batches = static_cast<int>(v); });
  take_int("eval_samples", 1, [&](long v) { cfg.eval_samples = static_cast<int>(v); });
  if (const RawEntry* e = take("lambda")) {
    const double v = parse_double(source_name, *e, "lambda");
    if (v < 0) fail(source_name, e->line, "key 'lambda': must be non-negative");
    cfg.model.lambda_weight = v;
  }
  take_positive_double("learning_rate", [&](double v) { cfg.model.learning_rate = v; });

  const RawEntry* obs = take("obs_model");
  const RawEntry* sigma = take("sigma");
  std::string obs_name = obs ? obs->value : "learned-scalar";
  if (obs_name == "fixed-scalar") {
    FixedScalar f;
    if (sigma) {
      const double v = parse_double(source_name, *sigma, "sigma");
      if (!(v > 0)) fail(source_name, sigma->line, "key 'sigma': must be positive");
      f.sigma = v;
    }
    cfg.model.obs_model = f;
  } else if (obs_name == "learned-scalar") {
    if (sigma)
      fail(source_name, sigma->line, "key 'sigma': only valid with obs_model = fixed-scalar");
    cfg.model.obs_model = LearnedScalar{};  // sigma initialized to 1
  } else if (obs_name == "learned-vector") {
    if (sigma)
      fail(source_name, sigma->line, "key 'sigma': only valid with obs_model = fixed-scalar");
    cfg.model.obs_model = LearnedVector{};
  } else {
    fail(source_name, obs->line,
         "key 'obs_model': expected fixed-scalar, learned-scalar or learned-vector, got '" +
             obs_name + "'");
  }

  if (const RawEntry* e = take("out_dir")) cfg.out_dir = e->value;

  static const char* known[] = {"data_dim", "latent_dim", "blocks", "width",
                                "batch_size", "steps", "seed", "eval_interval",
                                "eval_batches", "eval_samples", "lambda",
                                "learning_rate", "obs_model", "sigma", "out_dir"};
  for (const auto& [key, entry] : entries) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) fail(source_name, entry.line, "unknown key '" + key + "'");
  }

  validate(cfg);
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string resolve_output_dir(const std::string& config_path,
                               const std::string& out_dir,
                               const std::string& cli_override) {
  namespace fs = std::filesystem;
  if (!cli_override.empty()) return cli_override;
  fs::path out(out_dir);
  if (out.is_absolute()) return out.string();
  if (const char* env = std::getenv("VAELAB_OUT"); env != nullptr && *env != '\0')
    return (fs::path(env) / out).string();
  return (fs::path(config_path).parent_path() / out).string();
}

}  // namespace vaelab
