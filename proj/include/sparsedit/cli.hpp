#pragma once

// Batch front end: analyze, calibrate, train, plan, simulate and replay.
// Every command writes its outputs plus manifest.json into --out; replaying a
// manifest reruns the command with the recorded effective config and inputs
// and checks that every output file hashes the same.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sparsedit::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kInfeasible = 3,
  kNumericalFailure = 4,
  kVerificationFailed = 5,
  kReplayMismatch = 6,
};

/// A simulate run whose ledger or output check failed.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ReplayMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string command;
  std::string config_path;  // may be empty: defaults only
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  int threads = 1;
  std::string profile_path;  // plan
  std::string cluster_path;  // plan
};

/// Env overrides use this prefix: SPARSEDIT_SEED, SPARSEDIT_THREADS,
/// SPARSEDIT_OUT, and SPARSEDIT_CFG__a__b=value for config key a.b (value
/// parsed as JSON, else taken as a string).
inline constexpr const char* kEnvPrefix = "SPARSEDIT_";

/// Runs one command end to end and returns the manifest text it wrote.
/// `env` holds NAME=value entries; layering is file < env < flags.
std::string run_command(Options opt, const std::vector<std::string>& env);

/// Reruns the manifest into `out` and compares output hashes.
void replay(const std::string& manifest_path, const std::string& out);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const std::string& path);

/// Full argv entry point with exit-code mapping.
int main_entry(int argc, char** argv, char** envp);

}  // namespace sparsedit::cli
