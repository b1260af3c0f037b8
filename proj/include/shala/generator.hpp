#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/networks.hpp"
#include "shala/posterior.hpp"
#include "shala/rng.hpp"

namespace shala {

enum class Likelihood { gaussian, categorical };

struct DecoderConfig {
  std::vector<int64_t> conv_channels{32, 16};
  std::vector<int64_t> hidden{128};
  Activation activation = Activation::silu;
  /// Fixed observation scale for gaussian modalities.
  double obs_scale = 0.1;
  /// Per-modality override of obs_scale; empty means "use obs_scale".
  std::vector<double> obs_scales;

  json to_json() const;
  static DecoderConfig from_json(const json& j);
};

/// z -> parameters of p(x_i | z). Images are squashed to [0, 1], vectors are
/// unconstrained means, categorical modalities produce logits.
class ModalityDecoderImpl : public torch::nn::Module {
 public:
  ModalityDecoderImpl(ModalityInfo info, int64_t latent_dim, const DecoderConfig& config, double obs_scale);

  /// Raw output: gaussian mean in data layout or categorical logits.
  torch::Tensor forward(const torch::Tensor& z);
  /// Output in the modality's value range (probabilities for categorical).
  torch::Tensor decode(const torch::Tensor& z);
  /// log p(x | z) per row; x must be present.
  torch::Tensor log_likelihood(const torch::Tensor& x, const torch::Tensor& z);

  const ModalityInfo& info() const { return info_; }
  Likelihood likelihood() const { return likelihood_; }
  double obs_scale() const { return obs_scale_; }
  Mlp& trunk() { return trunk_; }

 private:
  ModalityInfo info_;
  Likelihood likelihood_;
  double obs_scale_;
  Mlp trunk_{nullptr};
  ConvUp up_{nullptr};
};
TORCH_MODULE(ModalityDecoder);

class DecoderBankImpl : public torch::nn::Module {
 public:
  DecoderBankImpl(const std::vector<ModalityInfo>& infos, int64_t latent_dim, const DecoderConfig& config);

  std::vector<torch::Tensor> decode(const torch::Tensor& z);
  /// Per-modality log-likelihood rows [B]; absent modalities contribute 0.
  std::vector<torch::Tensor> log_likelihood(const Batch& batch, const torch::Tensor& z);

  int64_t num_modalities() const { return static_cast<int64_t>(decoders_.size()); }
  int64_t latent_dim() const { return latent_dim_; }
  ModalityDecoder& decoder(int64_t i) { return decoders_.at(static_cast<size_t>(i)); }

 private:
  int64_t latent_dim_;
  std::vector<ModalityDecoder> decoders_;
};
TORCH_MODULE(DecoderBank);

/// Gaussian log-density constant -D/2 log(2 pi s^2) for one modality.
double gaussian_log_constant(int64_t dim, double scale);

struct ModelConfig {
  int64_t latent_dim = 64;
  EncoderConfig encoder;
  FusionConfig fusion;
  DecoderConfig decoder;

  json to_json() const;
  static ModelConfig from_json(const json& j);
};

struct ElboTerms {
  torch::Tensor elbo;                // scalar, batch mean
  std::vector<torch::Tensor> recon;  // scalar per modality, batch mean
  torch::Tensor kl;                  // scalar, batch mean
};

/// Stage-1 model: architectural inference network q(z|X) and the factorized
/// decoder p(X|z) p0(z) with p0 = N(0, I).
class ShalaVaeImpl : public torch::nn::Module {
 public:
  ShalaVaeImpl(const std::vector<ModalityInfo>& infos, const ModelConfig& config);

  ElboTerms elbo(const Batch& batch, Rng& rng, double kl_weight = 1.0);
  std::vector<torch::Tensor> decode(const torch::Tensor& z) { return decoders_->decode(z); }

  InferenceModel& inference() { return inference_; }
  DecoderBank& decoders() { return decoders_; }
  const ModelConfig& config() const { return config_; }
  const std::vector<ModalityInfo>& infos() const { return infos_; }
  int64_t latent_dim() const { return config_.latent_dim; }

  /// Parameter names owned by the decoder bank (theta); the rest are phi.
  std::vector<torch::Tensor> decoder_parameters();
  std::vector<torch::Tensor> inference_parameters();

 private:
  std::vector<ModalityInfo> infos_;
  ModelConfig config_;
  InferenceModel inference_{nullptr};
  DecoderBank decoders_{nullptr};
};
TORCH_MODULE(ShalaVae);

struct Stage1Config {
  int64_t iterations = 2000;
  int64_t batch_size = 64;
  double lr_theta = 1e-3;
  double lr_phi = 1e-3;
  /// Fraction of iterations over which the KL weight ramps linearly 0 -> 1.
  double kl_warmup_fraction = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int64_t log_every = 50;
  bool freeze_decoders = false;
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static Stage1Config from_json(const json& j);
};

double kl_weight_at(const Stage1Config& config, int64_t iteration);

struct CurvePoint {
  int64_t iteration = 0;
  double loss = 0.0;
  double kl = 0.0;
  std::vector<double> recon;

  json to_json() const;
};

enum class TrainStatus { completed, diverged };

struct TrainReport {
  TrainStatus status = TrainStatus::completed;
  std::vector<CurvePoint> curve;
  int64_t iterations_run = 0;
  std::string diagnostics;
};

/// Maximizes the ELBO with Adam, separate learning rates for decoders and
/// inference network. On a non-finite loss the model is restored to the last
/// finite state and the report is marked diverged.
TrainReport train_stage1(ShalaVae& model, const Dataset& dataset, const Stage1Config& config);

/// Line-delimited JSON, one record per curve point.
std::string curve_to_jsonl(const std::vector<CurvePoint>& curve);

/// Copies all parameter values (deep) for snapshot/restore.
std::vector<torch::Tensor> snapshot_parameters(torch::nn::Module& module);
void restore_parameters(torch::nn::Module& module, const std::vector<torch::Tensor>& snapshot);

/// Evaluation helpers: posterior means / draws over a dataset in chunks, no grad.
GaussianPosterior infer_dataset(ShalaVae& model, const Dataset& dataset, int64_t chunk = 512);

}  // namespace shala
