#pragma once

#include <vector>

#include <torch/torch.h>

#include "shala/generator.hpp"
#include "shala/posterior.hpp"

namespace shala {

enum class ExpertCombination { moe, poe };

ExpertCombination parse_expert_combination(const std::string& name);
std::string to_string(ExpertCombination c);

/// Multimodal VAE whose joint posterior combines unimodal Gaussian experts
/// q_i(z|x_i), either as a uniform mixture or as a product with the prior.
/// Used as the comparison pipeline against the architectural inference model.
class ExpertsVaeImpl : public torch::nn::Module {
 public:
  ExpertsVaeImpl(const std::vector<ModalityInfo>& infos, const ModelConfig& config, ExpertCombination combination);

  GaussianPosterior expert(int64_t i, const torch::Tensor& x);
  /// Experts of the modalities present in every row of the batch.
  std::vector<GaussianPosterior> present_experts(const Batch& batch);

  /// moe: (1/M) sum_i [ sum_j log p(x_j | z_i) - KL(q_i || p) ], z_i ~ q_i
  /// poe: E_q[log p(X|z)] - KL(q || p) with q = prior x prod_i q_i
  ElboTerms elbo(const Batch& batch, Rng& rng, double kl_weight = 1.0);

  /// z from the combined posterior of the present modalities.
  torch::Tensor sample_latent(const Batch& batch, Rng& rng);
  std::vector<torch::Tensor> decode(const torch::Tensor& z) { return decoders_->decode(z); }

  ExpertCombination combination() const { return combination_; }
  DecoderBank& decoders() { return decoders_; }
  int64_t latent_dim() const { return config_.latent_dim; }
  const std::vector<ModalityInfo>& infos() const { return infos_; }
  std::vector<torch::Tensor> decoder_parameters() { return decoders_->parameters(); }
  std::vector<torch::Tensor> inference_parameters();

 private:
  std::vector<ModalityInfo> infos_;
  ModelConfig config_;
  ExpertCombination combination_;
  std::vector<ModalityEncoder> encoders_;
  std::vector<PosteriorHead> heads_;
  DecoderBank decoders_{nullptr};
};
TORCH_MODULE(ExpertsVae);

/// Same optimizer, batch schedule and KL warm-up as train_stage1.
TrainReport train_experts_vae(ExpertsVae& model, const Dataset& dataset, const Stage1Config& config);

}  // namespace shala
