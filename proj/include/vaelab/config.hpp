#pragma once

#include <cstdint>
#include <string>

#include "vaelab/vae.hpp"

namespace vaelab {

// A training run: model configuration plus harness settings.
struct RunConfig {
  VaeConfig model;
  uint64_t seed = 0;
  long eval_interval = 500;  // 0 = evaluate at the end of the run only
  int eval_batches = 50;
  int eval_samples = 64;
  std::string out_dir = "run";
};

void validate(const RunConfig& cfg);

// Plain-text `key = value` config; '#' starts a comment. Unknown keys,
// malformed values and constraint violations raise errors naming the key and
// line. `source_name` is used in error messages.
RunConfig parse_config_text(const std::string& text, const std::string& source_name);

// Reads the file; out_dir stays as written (resolve_output_dir applies the
// base-directory rules).
RunConfig parse_config_file(const std::string& path);

// Relative out_dir values resolve against the VAELAB_OUT environment variable
// when set, otherwise against the directory containing the config file.
// A non-empty cli_override wins outright.
std::string resolve_output_dir(const std::string& config_path,
                               const std::string& out_dir,
                               const std::string& cli_override = {});

}  // namespace vaelab
