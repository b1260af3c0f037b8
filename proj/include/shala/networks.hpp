#pragma once

#include <vector>

#include <torch/torch.h>

#include "shala/common.hpp"
#include "shala/dataset.hpp"

namespace shala {

torch::Tensor activate(const torch::Tensor& x, Activation a);

/// Affine stack with an activation between layers (none after the last).
class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t in, const std::vector<int64_t>& hidden, int64_t out, Activation activation);

  torch::Tensor forward(const torch::Tensor& x);
  size_t depth() const { return layers_.size(); }
  torch::nn::Linear& layer(size_t i) { return layers_.at(i); }

 private:
  std::vector<torch::nn::Linear> layers_;
  Activation activation_;
};
TORCH_MODULE(Mlp);

/// Strided 3x3 convolutions; each halves the spatial side. Input [B, H, W, C].
class ConvDownImpl : public torch::nn::Module {
 public:
  ConvDownImpl(const ModalityInfo& info, const std::vector<int64_t>& channels, Activation activation);

  torch::Tensor forward(const torch::Tensor& x);
  int64_t flat_width() const { return flat_width_; }

 private:
  std::vector<torch::nn::Conv2d> convs_;
  Activation activation_;
  int64_t flat_width_ = 0;
};
TORCH_MODULE(ConvDown);

/// Mirror of ConvDown: transposed convolutions doubling the side, ending in
/// the modality's channel count. Output [B, H, W, C], unsquashed.
class ConvUpImpl : public torch::nn::Module {
 public:
  ConvUpImpl(const ModalityInfo& info, const std::vector<int64_t>& channels, Activation activation);

  /// x is [B, flat_width()].
  torch::Tensor forward(const torch::Tensor& x);
  int64_t flat_width() const { return flat_width_; }

 private:
  std::vector<torch::nn::ConvTranspose2d> deconvs_;
  Activation activation_;
  int64_t channels0_ = 0;
  int64_t side0_h_ = 0;
  int64_t side0_w_ = 0;
  int64_t flat_width_ = 0;
};
TORCH_MODULE(ConvUp);

/// Checks that x is [B, shape...] for the given modality.
void check_modality_shape(const ModalityInfo& info, const torch::Tensor& x, const char* where);

/// Sinusoidal embedding of integer steps, [B] -> [B, width].
torch::Tensor timestep_embedding(const torch::Tensor& steps, int64_t width, torch::ScalarType dtype);

}  // namespace shala
