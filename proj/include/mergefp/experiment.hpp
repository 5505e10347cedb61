#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergefp {

// exit code 2
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// exit code 3
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// exit code 4 (a verify/sweep stage fell below its min_vsr gate)
struct ThresholdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageRecord {
  std::string id;
  std::string kind;
  std::vector<std::string> artifacts;
  std::vector<uint64_t> artifact_hashes;  // FNV-1a of the artifact bytes
  int64_t wall_ms = 0;
};

struct RunManifest {
  std::string experiment_id;
  uint64_t config_hash = 0;
  uint64_t master_seed = 0;
  std::string run_dir;
  std::vector<StageRecord> stages;
  std::string version;

  std::string to_json() const;
};

// Parse + strictly validate (unknown keys are errors) without running.
void validate_experiment_config(const std::string& config_path);

// Execute every stage in order under <run_root>/<experiment_id>; throws
// ConfigError / StageError / ThresholdError with the stage id on failure.
RunManifest run_experiment(const std::string& config_path, const std::string& run_root);

// Aggregate the verify/sweep/scan artifacts of a finished run into
// consolidated CSV tables under <run_dir>/report. Idempotent.
std::vector<std::string> write_report(const std::string& run_dir);

uint64_t fnv1a64_file(const std::string& path);
std::string default_run_root();  // $MERGEFP_RUN_ROOT or "runs"

}  // namespace mergefp
