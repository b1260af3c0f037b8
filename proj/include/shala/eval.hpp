#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/networks.hpp"
#include "shala/posterior.hpp"
#include "shala/rng.hpp"

namespace shala {

// ---------------------------------------------------------------------------
// Toy classifiers

struct ClassifierConfig {
  std::vector<int64_t> conv_channels{16, 32};
  int64_t feature_width = 64;
  int64_t iterations = 600;
  int64_t batch_size = 64;
  double lr = 2e-3;
  /// Held-out fraction used for the accuracy gate.
  double holdout_fraction = 0.2;
  double gate = 0.98;
  uint64_t seed = 0;

  json to_json() const;
  static ClassifierConfig from_json(const json& j);
};

/// Small per-modality classifier. Images go through strided convolutions,
/// vectors through an affine layer; both end in a `feature_width` layer whose
/// activations serve as the Fréchet feature space.
class ToyClassifierImpl : public torch::nn::Module {
 public:
  ToyClassifierImpl(ModalityInfo info, int64_t num_classes, const ClassifierConfig& config);

  torch::Tensor forward(const torch::Tensor& x);
  /// Penultimate activations [B, feature_width].
  torch::Tensor features(const torch::Tensor& x);
  /// Argmax of the logits, ties to the lowest class index.
  torch::Tensor predict(const torch::Tensor& x);

  const ModalityInfo& info() const { return info_; }
  int64_t num_classes() const { return num_classes_; }

 private:
  ModalityInfo info_;
  int64_t num_classes_;
  ConvDown conv_{nullptr};
  torch::nn::Linear feature_{nullptr};
  torch::nn::Linear logits_{nullptr};
};
TORCH_MODULE(ToyClassifier);

struct ClassifierReport {
  double holdout_accuracy = 0.0;
  int64_t holdout_size = 0;
};

/// Trains on modality `modality` of `dataset`; throws GateFailure when the
/// held-out accuracy stays below config.gate.
ToyClassifier train_toy_classifier(const Dataset& dataset, int64_t modality, int64_t num_classes,
                                   const ClassifierConfig& config, ClassifierReport* report = nullptr);

/// Row-wise argmax with ties resolved to the lowest index.
torch::Tensor argmax_lowest(const torch::Tensor& logits);

/// Runs classifier i on modality i of `batch` in chunks; returns labels [N].
std::vector<torch::Tensor> classify_batch(std::vector<ToyClassifier>& classifiers, const Batch& batch,
                                          int64_t chunk = 512);
torch::Tensor classifier_features(ToyClassifier& classifier, const torch::Tensor& x, int64_t chunk = 512);

// ---------------------------------------------------------------------------
// Coherence

/// Fraction of rows whose M predicted labels all agree. M = 1 gives 1.
double joint_coherence(const std::vector<torch::Tensor>& predictions);
/// Agreement rate between predictions and reference labels.
double label_agreement(const torch::Tensor& predictions, const torch::Tensor& reference);
/// Macro average of per-pair agreement rates; each pair is
/// (labels of the observed x_i, predictions on the generated x_j).
double conditional_coherence(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& pairs);

// ---------------------------------------------------------------------------
// Distribution distances

inline constexpr double kFrechetEpsilon = 1e-6;

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Sample mean and unbiased covariance of rows [N, D].
GaussianFit fit_gaussian(const torch::Tensor& samples);
/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}), with eps I added to both
/// covariances.
double frechet_distance(const GaussianFit& a, const GaussianFit& b, double eps = kFrechetEpsilon);
/// Requires at least two samples per set.
double frechet_distance(const torch::Tensor& a, const torch::Tensor& b, double eps = kFrechetEpsilon);

/// Unbiased (U-statistic) squared energy distance
/// 2 E|X - Y| - E|X - X'| - E|Y - Y'|.
double energy_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Permutation two-sample test on the energy statistic; returns the p-value
/// with the +1 correction.
double energy_permutation_test(const torch::Tensor& a, const torch::Tensor& b, int64_t permutations, Rng& rng);

/// KL(N(m1, S1) || N(m2, S2)) for full covariances.
double gaussian_kl(const GaussianFit& p, const GaussianFit& q);

/// Moment-matched gap KL(N(mean, cov of samples) || N(0, I)). Needs at least
/// d + 1 rows.
double prior_gap(const torch::Tensor& samples);
/// Moment-matched KL(fit(samples) || fit(reference)).
double fitted_gap(const torch::Tensor& samples, const torch::Tensor& reference);

/// Mean over rows of KL(N(q_mean_n, diag q_var_n) || N(p_mean_n, p_cov)) with
/// a shared full covariance p_cov [d, d].
double oracle_posterior_kl(const GaussianPosterior& learned, const torch::Tensor& analytic_mean,
                           const torch::Tensor& analytic_covariance);

// ---------------------------------------------------------------------------
// Image similarity

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) over the whole tensor, capped at 100 dB.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Mean SSIM over images [N, H, W, C] (or [H, W, C]); 11x11 Gaussian window
/// with sigma 1.5, valid filtering, k1 = 0.01, k2 = 0.03, dynamic range 1.
double ssim(const torch::Tensor& a, const torch::Tensor& b);
/// Per-image SSIM [N].
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b);
/// Per-image PSNR [N].
torch::Tensor psnr_per_image(const torch::Tensor& a, const torch::Tensor& b);

/// L1 distance between normalized per-channel intensity histograms.
double color_histogram_distance(const torch::Tensor& a, const torch::Tensor& b, int64_t bins = 8);

// ---------------------------------------------------------------------------
// Records

struct MetricRecord {
  std::string name;
  double value = 0.0;
  int64_t count = 0;
  std::string config_digest;
  uint64_t seed = 0;
  /// Free-form context (estimator, pipeline, suite).
  json details = json::object();

  /// Throws NumericalError on a non-finite value or an empty sample count.
  void validate() const;
  json to_json() const;
  static MetricRecord from_json(const json& j);
};

/// One record per line, keys in a fixed order, doubles at full precision.
std::string records_to_jsonl(const std::vector<MetricRecord>& records);
std::vector<MetricRecord> records_from_jsonl(const std::string& text);
void append_records(const std::vector<MetricRecord>& records, const std::filesystem::path& file);

/// Plain-text and CSV tables; `columns` name the runs, missing cells render as
/// "absent".
struct MetricTable {
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> cells;

  std::string to_text() const;
  std::string to_csv() const;
};

MetricTable tabulate(const std::vector<std::pair<std::string, std::vector<MetricRecord>>>& runs);

}  // namespace shala
