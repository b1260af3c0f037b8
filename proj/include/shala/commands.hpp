#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "shala/config.hpp"
#include "shala/workflows.hpp"

namespace shala {

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitAssertion = 3 };

/// Files inside a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path stage1() const { return root / "stage1"; }
  std::filesystem::path stage2() const { return root / "stage2"; }
  std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
  std::filesystem::path generations() const { return root / "generations"; }
  std::filesystem::path evaluation() const { return root / "evaluation"; }
};

/// Trains stage 1 and writes the bundle, curve and records. Returns the
/// checkpoint directory.
std::filesystem::path cmd_train_stage1(const ExperimentConfig& config, std::ostream& out);

/// Trains the latent prior against a stored stage-1 bundle (default: the
/// run's own). Refuses a bundle whose digest differs from config.stage1_digest.
std::filesystem::path cmd_train_stage2(const ExperimentConfig& config, std::ostream& out,
                                       const std::optional<std::filesystem::path>& stage1_dir = std::nullopt);

struct GenerateOptions {
  std::filesystem::path run;
  GenerationMode mode = GenerationMode::joint;
  int64_t n = 16;
  uint64_t seed = 0;
  std::optional<double> guidance;
  /// Forward depth for correct/style; unset means T / 4.
  std::optional<int64_t> k;
  /// Cross mode: modalities hidden from the model (default: all but 0).
  std::optional<std::vector<int64_t>> mask;
  /// Correct mode: modalities to corrupt (default: the last one).
  std::optional<std::vector<int64_t>> corrupt;
  CorruptionMode corruption = CorruptionMode::blank;
  /// Source samples for cross/correct/style; default: the config's dataset.
  std::optional<std::filesystem::path> input;
  /// Style references (required for style).
  std::optional<std::filesystem::path> reference;
  std::optional<std::filesystem::path> out;
};

/// Runs one generation request; prints the NFE accounting and returns the
/// output directory.
std::filesystem::path cmd_generate(const GenerateOptions& options, std::ostream& out);

/// Evaluates ground truth and every generation under the run; writes
/// evaluation/metrics.jsonl plus text and CSV tables.
std::vector<MetricRecord> cmd_evaluate(const std::filesystem::path& run, std::ostream& out);

/// Runs a suite, prints one line per criterion; returns kExitOk or
/// kExitAssertion.
int cmd_reproduce(const std::string& suite, uint64_t seed, const std::optional<std::filesystem::path>& out_dir,
                  std::ostream& out);

/// Full command-line entry point; maps exceptions to exit codes.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace shala
