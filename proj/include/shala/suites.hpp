#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "shala/baseline.hpp"
#include "shala/datagen.hpp"
#include "shala/diffusion.hpp"
#include "shala/eval.hpp"
#include "shala/generator.hpp"
#include "shala/workflows.hpp"

namespace shala {

/// One acceptance check: measured value against a pinned threshold.
struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;

  json to_json() const;
  /// "[PASS] criterion 3 prior-hole closure: value=... threshold=... (detail)"
  std::string line() const;
};

struct SuiteReport {
  std::string suite;
  std::vector<CriterionResult> criteria;
  /// Deterministic records; written to `metrics.jsonl`.
  std::vector<MetricRecord> records;
  double seconds = 0.0;

  bool passed() const;
};

struct SuiteOptions {
  uint64_t seed = 0;
  /// When non-empty, metrics.jsonl and report.json are written here.
  std::filesystem::path output_dir;
  /// Print progress lines to stderr.
  bool verbose = false;
};

std::vector<std::string> suite_names();
/// Throws InvalidArgument listing the known suites for an unknown name.
SuiteReport run_suite(const std::string& name, const SuiteOptions& options);

SuiteReport run_oracle_suite(const SuiteOptions& options);
SuiteReport run_prior2d_suite(const SuiteOptions& options);
SuiteReport run_glyph_suite(const SuiteOptions& options);
SuiteReport run_multiview_suite(const SuiteOptions& options);
SuiteReport run_ablation_suite(const SuiteOptions& options);

// ---------------------------------------------------------------------------
// Building blocks shared by the suites and the tests.

/// Stage-1 model whose decoders are the true affine maps of a linear-Gaussian
/// problem and whose inference network is affine, so the exact posterior is
/// representable.
ShalaVae make_linear_oracle_model(const LinearGaussianData& data);

/// Experts whose product with the prior is the analytic posterior: expert i
/// has precision A_i^T A_i / s_i^2 (diagonal for the orthogonal design).
std::vector<GaussianPosterior> linear_likelihood_experts(const LinearGaussianData& data);

/// Largest relative deviation between autograd and central differences,
/// ||g - g_fd|| / max(||g||, floor) per parameter tensor.
double elbo_gradient_error(uint64_t seed);
double prior_loss_gradient_error(uint64_t seed);

/// Forward-marginal check: max |z-score| of composed-kernel mean and
/// variance against the closed form, over the given steps.
double forward_marginal_max_zscore(const NoiseSchedule& schedule, const std::vector<int64_t>& steps,
                                   int64_t chains, uint64_t seed);

/// Max violation of alpha_t^2 + sigma_t^2 = 1, alpha_bar_t = prod alpha_s and
/// alpha_bar_t^2 + noise_level_t^2 = 1.
double schedule_identity_error(const NoiseSchedule& schedule);

/// Per-pair violations of monotone non-increasing scores along a sweep:
/// counts steps where score[k+1] > score[k] + tolerance. Returns the violated
/// fraction of all adjacent comparisons.
double monotone_violation_rate(const std::vector<std::vector<double>>& sweeps, double tolerance);

}  // namespace shala
