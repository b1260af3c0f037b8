#pragma once

#include <vector>

#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/networks.hpp"
#include "shala/rng.hpp"

namespace shala {

struct EncoderConfig {
  int64_t embed_width = 256;
  std::vector<int64_t> conv_channels{16, 32};
  std::vector<int64_t> hidden{128};
  Activation activation = Activation::silu;

  json to_json() const;
  static EncoderConfig from_json(const json& j);
};

/// Deterministic per-modality feature extractor x_i -> h_i.
class ModalityEncoderImpl : public torch::nn::Module {
 public:
  ModalityEncoderImpl(ModalityInfo info, const EncoderConfig& config);

  torch::Tensor forward(const torch::Tensor& x);
  const ModalityInfo& info() const { return info_; }
  Mlp& head() { return head_; }

 private:
  ModalityInfo info_;
  ConvDown conv_{nullptr};
  Mlp head_{nullptr};
};
TORCH_MODULE(ModalityEncoder);

/// One encoder per modality plus a learned null embedding used for absent
/// modalities.
class ModalityEncoderBankImpl : public torch::nn::Module {
 public:
  ModalityEncoderBankImpl(const std::vector<ModalityInfo>& infos, const EncoderConfig& config);

  /// h_1..h_M, each [B, E]; rows with presence == false get the null embedding.
  std::vector<torch::Tensor> encode(const Batch& batch);
  torch::Tensor encode_modality(int64_t i, const torch::Tensor& x);
  torch::Tensor null_embedding(int64_t i) const { return null_embeddings_[i]; }

  int64_t num_modalities() const { return static_cast<int64_t>(encoders_.size()); }
  int64_t embed_width() const { return embed_width_; }
  const std::vector<ModalityInfo>& infos() const { return infos_; }
  ModalityEncoder& encoder(int64_t i) { return encoders_.at(static_cast<size_t>(i)); }

 private:
  std::vector<ModalityInfo> infos_;
  std::vector<ModalityEncoder> encoders_;
  torch::Tensor null_embeddings_;  // [M, E]
  int64_t embed_width_;
};
TORCH_MODULE(ModalityEncoderBank);

enum class FusionVariant { concat, sum, gated };

FusionVariant parse_fusion_variant(const std::string& name);
std::string to_string(FusionVariant v);

struct FusionConfig {
  FusionVariant variant = FusionVariant::concat;
  int64_t fused_width = 256;
  int64_t layers = 4;
  Activation activation = Activation::silu;

  json to_json() const;
  static FusionConfig from_json(const json& j);
};

/// The shared fusion function producing hbar:
///   concat: F([h_1..h_M]);  sum: F(sum_i h_i);  gated: F([g_1(h_1)..g_M(h_M)])
/// with g_i(h) = sigmoid(W_i h + b_i) * h and F a stack of affine layers.
class FusionHeadImpl : public torch::nn::Module {
 public:
  FusionHeadImpl(int64_t num_modalities, int64_t embed_width, const FusionConfig& config);

  torch::Tensor forward(const std::vector<torch::Tensor>& h);
  int64_t input_width() const { return input_width_; }
  int64_t output_width() const { return config_.fused_width; }
  FusionVariant variant() const { return config_.variant; }
  Mlp& trunk() { return trunk_; }

 private:
  FusionConfig config_;
  int64_t num_modalities_;
  int64_t embed_width_;
  int64_t input_width_;
  Mlp trunk_{nullptr};
  std::vector<torch::nn::Linear> gates_;
};
TORCH_MODULE(FusionHead);

/// Diagonal Gaussian; tensors are [B, d] (or [d] for a single distribution).
struct GaussianPosterior {
  torch::Tensor mean;
  torch::Tensor variance;

  int64_t dim() const { return mean.size(-1); }
  /// Throws NumericalError on non-finite entries or non-positive variance.
  void validate() const;
  GaussianPosterior select(const torch::Tensor& indices) const {
    return {mean.index_select(0, indices), variance.index_select(0, indices)};
  }
};

inline constexpr double kLogVarianceMin = -8.0;
inline constexpr double kLogVarianceMax = 8.0;

/// hbar -> (mean, exp(clamp(raw log-variance))).
class PosteriorHeadImpl : public torch::nn::Module {
 public:
  PosteriorHeadImpl(int64_t in_width, int64_t latent_dim);

  GaussianPosterior forward(const torch::Tensor& hbar);
  torch::nn::Linear& mean_layer() { return mean_; }
  torch::nn::Linear& log_variance_layer() { return log_variance_; }

 private:
  torch::nn::Linear mean_{nullptr};
  torch::nn::Linear log_variance_{nullptr};
};
TORCH_MODULE(PosteriorHead);

/// Encoders, fusion and posterior head: X -> h_1..h_M -> hbar -> q(z|X).
class InferenceModelImpl : public torch::nn::Module {
 public:
  InferenceModelImpl(const std::vector<ModalityInfo>& infos, int64_t latent_dim, const EncoderConfig& encoder,
                     const FusionConfig& fusion);

  std::vector<torch::Tensor> embed(const Batch& batch) { return bank_->encode(batch); }
  torch::Tensor fuse(const std::vector<torch::Tensor>& h) { return fusion_->forward(h); }
  GaussianPosterior posterior_params(const torch::Tensor& hbar);
  GaussianPosterior infer(const Batch& batch) { return posterior_params(fuse(embed(batch))); }

  ModalityEncoderBank& bank() { return bank_; }
  FusionHead& fusion() { return fusion_; }
  PosteriorHead& head() { return head_; }
  int64_t latent_dim() const { return latent_dim_; }

 private:
  int64_t latent_dim_;
  ModalityEncoderBank bank_{nullptr};
  FusionHead fusion_{nullptr};
  PosteriorHead head_{nullptr};
};
TORCH_MODULE(InferenceModel);

/// Reparameterized draw z = mean + sqrt(variance) * eps.
torch::Tensor sample_posterior(const GaussianPosterior& q, Rng& rng);

/// Precision-weighted product of experts, optionally with the N(0, I) prior as
/// one more expert.
GaussianPosterior poe_posterior(const std::vector<GaussianPosterior>& experts, bool include_prior = true);

/// Uniform choice of an expert per row, then a Gaussian draw from it.
torch::Tensor moe_sample(const std::vector<GaussianPosterior>& experts, Rng& rng);

/// First two moments of the uniform mixture: mean = avg mu_i,
/// var = avg(v_i + mu_i^2) - mean^2.
GaussianPosterior moe_mixture_stats(const std::vector<GaussianPosterior>& experts);

/// KL(N(mean, diag variance) || N(0, I)) summed over the last dimension.
torch::Tensor kl_to_standard_normal(const GaussianPosterior& q);

}  // namespace shala
