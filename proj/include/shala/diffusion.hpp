#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/generator.hpp"
#include "shala/networks.hpp"
#include "shala/rng.hpp"

namespace shala {

enum class ScheduleKind { linear, cosine, constant };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind k);

/// Per-step noise levels for the forward kernel
///   q(z_t | z_{t-1}) = N(alpha_t z_{t-1}, sigma_t^2 I),  alpha_t = sqrt(1 - sigma_t^2)
/// and the cumulative signal level alpha_bar_t = prod_{s<=t} alpha_s, so that
///   z_t = alpha_bar_t z_0 + sqrt(1 - alpha_bar_t^2) eps.
/// Index 0 is the clean state (sigma_0 = 0, alpha_bar_0 = 1).
class NoiseSchedule {
 public:
  /// Terminal signal level required of schedules built for sampling.
  static constexpr double kTerminalAlphaBarMax = 1e-2;

  NoiseSchedule() = default;
  /// Validates monotonicity; the terminal check is optional so short
  /// hand-built schedules can be used in tests.
  static NoiseSchedule from_sigmas(std::vector<double> sigmas, ScheduleKind kind = ScheduleKind::constant,
                                   bool check_terminal = false);

  int64_t steps() const { return static_cast<int64_t>(sigma_.size()) - 1; }
  ScheduleKind kind() const { return kind_; }
  double sigma(int64_t t) const { return sigma_.at(static_cast<size_t>(t)); }
  double alpha(int64_t t) const { return alpha_.at(static_cast<size_t>(t)); }
  double alpha_bar(int64_t t) const { return alpha_bar_.at(static_cast<size_t>(t)); }
  /// sqrt(1 - alpha_bar_t^2)
  double noise_level(int64_t t) const;
  /// Std of the reverse kernel at step t (t -> t-1): the DDPM posterior variance
  /// (1 - alpha_bar_{t-1}^2) / (1 - alpha_bar_t^2) * sigma_t^2.
  double reverse_std(int64_t t) const;

  json to_json() const;
  static NoiseSchedule from_json(const json& j);

 private:
  ScheduleKind kind_ = ScheduleKind::constant;
  std::vector<double> sigma_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

/// linear: sigma_t^2 spaced linearly over [1e-4, 0.02] * (1000 / T), clipped
/// below 1; cosine: the squared-cosine alpha_bar curve. Throws when the
/// terminal condition alpha_bar_T <= 1e-2 fails and check_terminal is set.
NoiseSchedule build_schedule(int64_t steps, ScheduleKind kind, bool check_terminal = true);

/// z_t for t in [1, T] (t = 0 returns z0).
torch::Tensor forward_marginal(const torch::Tensor& z0, int64_t t, const NoiseSchedule& schedule, Rng& rng);
/// Same draw with an explicit noise tensor.
torch::Tensor forward_marginal_with_noise(const torch::Tensor& z0, int64_t t, const NoiseSchedule& schedule,
                                          const torch::Tensor& eps);
/// Applies q(z_t | z_{t-1}) once.
torch::Tensor forward_step(const torch::Tensor& z_prev, int64_t t, const NoiseSchedule& schedule, Rng& rng);

enum class ConditionSource { embedding, raw };

ConditionSource parse_condition_source(const std::string& name);
std::string to_string(ConditionSource s);

struct ConditioningPolicy {
  ConditionSource source = ConditionSource::embedding;
  /// Probability of replacing the drawn condition with the null token.
  double drop_probability = 0.1;

  void validate() const;
  json to_json() const;
  static ConditioningPolicy from_json(const json& j);
};

struct DenoiserConfig {
  int64_t latent_dim = 64;
  /// Width of conditioning embeddings; 0 builds an unconditional model.
  int64_t cond_width = 256;
  int64_t hidden = 256;
  int64_t blocks = 3;
  int64_t time_width = 64;
  Activation activation = Activation::silu;

  json to_json() const;
  static DenoiserConfig from_json(const json& j);
};

/// eps-prediction network eps(z_t, t, h). The condition h is mapped by an
/// affine layer and added to the time embedding; null rows use a learned
/// token in that space instead.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserConfig& config);

  /// cond may be undefined (all rows null). null_mask [B] bool marks rows that
  /// use the null token; undefined means "no row is null" when cond is given.
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& steps, const torch::Tensor& cond = {},
                        const torch::Tensor& null_mask = {});

  const DenoiserConfig& config() const { return config_; }
  bool conditional() const { return config_.cond_width > 0; }

 private:
  DenoiserConfig config_;
  torch::nn::Linear input_{nullptr};
  Mlp time_mlp_{nullptr};
  torch::nn::Linear cond_proj_{nullptr};
  torch::Tensor null_token_;
  std::vector<torch::nn::Linear> block_in_;
  std::vector<torch::nn::Linear> block_emb_;
  std::vector<torch::nn::Linear> block_out_;
  torch::nn::Linear output_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Thin per-modality encoders used when the prior conditions on raw inputs:
/// one affine map from the flattened modality to the condition width.
class RawConditionEncoderImpl : public torch::nn::Module {
 public:
  RawConditionEncoderImpl(const std::vector<ModalityInfo>& infos, int64_t cond_width);
  torch::Tensor encode(int64_t i, const torch::Tensor& x);
  std::vector<torch::Tensor> encode(const Batch& batch);

 private:
  std::vector<ModalityInfo> infos_;
  std::vector<torch::nn::Linear> maps_;
};
TORCH_MODULE(RawConditionEncoder);

/// Stage-2 model: schedule, denoiser, conditioning policy, and the raw
/// condition encoders when policy.source == raw.
class LatentPriorImpl : public torch::nn::Module {
 public:
  LatentPriorImpl(const NoiseSchedule& schedule, const DenoiserConfig& config, const ConditioningPolicy& policy,
                  const std::vector<ModalityInfo>& infos = {});

  Denoiser& denoiser() { return denoiser_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ConditioningPolicy& policy() const { return policy_; }
  bool has_raw_encoder() const { return static_cast<bool>(raw_); }
  RawConditionEncoder& raw_encoder() { return raw_; }

 private:
  NoiseSchedule schedule_;
  ConditioningPolicy policy_;
  Denoiser denoiser_{nullptr};
  RawConditionEncoder raw_{nullptr};
};
TORCH_MODULE(LatentPrior);

/// Counters reported by prior_loss.
struct PriorLossStats {
  int64_t rows = 0;
  int64_t null_rows = 0;
  std::vector<int64_t> chosen;  // per-row chosen modality, -1 for null
};

/// Time-averaged eps-matching surrogate: t ~ U{1..T}, h_j ~ U(present h),
/// replaced by the null token with probability drop_probability, and
/// loss = mean_b || eps - eps_hat(z_t, t, h_j) ||^2.
/// `conditions` holds one [B, E] tensor per modality (may be empty for an
/// unconditional model); `presence` is [B, M] bool.
torch::Tensor prior_loss(Denoiser& denoiser, const torch::Tensor& z0, const std::vector<torch::Tensor>& conditions,
                         const torch::Tensor& presence, const ConditioningPolicy& policy,
                         const NoiseSchedule& schedule, Rng& rng, PriorLossStats* stats = nullptr);

struct GuidanceConfig {
  double scale = 1.0;
  void validate() const;
};

/// eps_uncond + w (eps_cond - eps_uncond); w = 0 and w = 1 return the
/// corresponding branch untouched.
torch::Tensor guided_epsilon(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double w);

/// Counts denoiser forward passes. One guided step evaluates both branches in
/// a single batched pass and counts once.
struct NfeCounter {
  int64_t denoiser_calls = 0;
};

/// eps_hat for one reverse step, combining branches per the guidance scale.
torch::Tensor predict_noise(Denoiser& denoiser, const torch::Tensor& z, int64_t step, const torch::Tensor& cond,
                            double guidance, NfeCounter* nfe = nullptr);

/// One reverse transition z_{t+1} -> z_t, t in [0, T-1]. Mean from the
/// eps-prediction; std fixed to the schedule; no noise on the final (t = 0) step.
torch::Tensor denoise_step(Denoiser& denoiser, const torch::Tensor& z_next, int64_t t, const torch::Tensor& cond,
                           double guidance, const NoiseSchedule& schedule, Rng& rng, NfeCounter* nfe = nullptr);

struct PriorSample {
  torch::Tensor z0;
  int64_t nfe = 0;
};

/// Runs the reverse chain from `start_step` (default T, with z ~ N(0, I)) to 0.
/// When `z_start` is given it is the state at start_step.
PriorSample sample_prior(Denoiser& denoiser, const NoiseSchedule& schedule, int64_t n, const torch::Tensor& cond,
                         double guidance, Rng& rng, std::optional<int64_t> start_step = std::nullopt,
                         const torch::Tensor& z_start = {});

struct Stage2Config {
  int64_t iterations = 5000;
  int64_t batch_size = 256;
  double lr_beta = 1e-3;
  int64_t steps = 250;
  ScheduleKind schedule = ScheduleKind::linear;
  ConditioningPolicy policy;
  DenoiserConfig denoiser;
  double guidance = 1.0;
  int64_t log_every = 100;
  double grad_clip = 1.0;
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static Stage2Config from_json(const json& j);
};

/// Inputs for prior training: posterior moments of z0 per example and the
/// per-modality conditions (stage-1 embeddings, or raw inputs for raw source).
struct LatentTrainingSet {
  torch::Tensor mean;      // [N, d]
  torch::Tensor variance;  // [N, d]; zeros when z0 samples are exact
  std::vector<torch::Tensor> embeddings;  // [M] x [N, E], embedding source
  Batch raw;                               // raw source
  torch::Tensor presence;                  // [N, M] bool

  int64_t size() const { return mean.size(0); }
};

/// Encodes a dataset with the frozen stage-1 model (no grad).
LatentTrainingSet build_latent_training_set(ShalaVae& stage1, const Dataset& dataset, ConditionSource source,
                                            int64_t chunk = 512);

/// Trains only the prior's parameters. Throws if stage-1 parameters would be
/// touched (they are never passed to the optimizer).
TrainReport train_prior(LatentPrior& prior, const LatentTrainingSet& data, const Stage2Config& config);

/// Convenience: build the training set from stage-1 and train.
TrainReport train_stage2(LatentPrior& prior, ShalaVae& stage1, const Dataset& dataset, const Stage2Config& config);

}  // namespace shala
