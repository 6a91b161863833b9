#pragma once

// Subcommand bodies for the abx executable. Each returns a process exit code
// and writes human-facing summaries to `out`; artifacts go under the paths in
// the resolved config.

#include "abx/config.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace abx::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // grad-check mismatch, unexpected errors
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;  // "section.key=value"
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  bool force = false;
};

// Defaults, then the config file, then ABX_SEED, then --set, --variant, --seed.
RunConfig resolve_config(const CommonOptions& options);

int cmd_gen_data(const RunConfig& config, bool force, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_eval(const RunConfig& config, std::ostream& out);
int cmd_analyze(const RunConfig& config, std::ostream& out);

struct SweepOptions {
  std::string axis;                 // m | alpha-mode | sample-count | sampling-strategy | ffn
  std::vector<std::string> values;  // empty selects the axis defaults
  unsigned jobs = 1;
};

std::vector<std::string> default_sweep_values(const std::string& axis);
int cmd_sweep(const RunConfig& config, const SweepOptions& options, std::ostream& out);

struct GradCheckCliOptions {
  std::string fault_parameter;  // negative control
};

int cmd_grad_check(const RunConfig& config, const GradCheckCliOptions& options, std::ostream& out);

// Runs `body`, mapping library exceptions to exit codes and printing them to `err`.
int guarded(const std::function<int()>& body, std::ostream& err);

}  // namespace abx::cli
