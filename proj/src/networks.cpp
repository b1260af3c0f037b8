#include "shala/networks.hpp"

#include <cmath>

namespace shala {

torch::Tensor activate(const torch::Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu:
      return torch::relu(x);
    case Activation::silu:
      return torch::silu(x);
    case Activation::identity:
      return x;
  }
  return x;
}

MlpImpl::MlpImpl(int64_t in, const std::vector<int64_t>& hidden, int64_t out, Activation activation)
    : activation_(activation) {
  int64_t prev = in;
  auto widths = hidden;
  widths.push_back(out);
  for (size_t i = 0; i < widths.size(); ++i) {
    layers_.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(prev, widths[i])));
    prev = widths[i];
  }
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  auto y = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    y = layers_[i]->forward(y);
    if (i + 1 < layers_.size()) y = activate(y, activation_);
  }
  return y;
}

void check_modality_shape(const ModalityInfo& info, const torch::Tensor& x, const char* where) {
  auto expected = info.shape;
  if (x.dim() != static_cast<int64_t>(expected.size()) + 1 ||
      !std::equal(expected.begin(), expected.end(), x.sizes().begin() + 1)) {
    throw ShapeMismatch(std::string(where) + ": modality '" + info.name + "' expects [B, " +
                        c10::str(c10::IntArrayRef(expected)) + "], got " + c10::str(x.sizes()));
  }
}

ConvDownImpl::ConvDownImpl(const ModalityInfo& info, const std::vector<int64_t>& channels, Activation activation)
    : activation_(activation) {
  if (info.kind != ModalityKind::image) throw InvalidArgument("ConvDown needs an image modality");
  int64_t h = info.shape[0];
  int64_t w = info.shape[1];
  int64_t prev = info.shape[2];
  for (size_t i = 0; i < channels.size(); ++i) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw InvalidArgument("image side must be divisible by 2^" + std::to_string(channels.size()));
    }
    convs_.push_back(register_module(
        "conv" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, channels[i], 3).stride(2).padding(1))));
    prev = channels[i];
    h /= 2;
    w /= 2;
  }
  flat_width_ = prev * h * w;
}

torch::Tensor ConvDownImpl::forward(const torch::Tensor& x) {
  auto y = x.permute({0, 3, 1, 2});
  for (auto& c : convs_) y = activate(c->forward(y), activation_);
  return y.flatten(1);
}

ConvUpImpl::ConvUpImpl(const ModalityInfo& info, const std::vector<int64_t>& channels, Activation activation)
    : activation_(activation) {
  if (info.kind != ModalityKind::image) throw InvalidArgument("ConvUp needs an image modality");
  if (channels.empty()) throw InvalidArgument("ConvUp needs at least one channel entry");
  const auto levels = static_cast<int64_t>(channels.size());
  const int64_t factor = int64_t{1} << levels;
  if (info.shape[0] % factor != 0 || info.shape[1] % factor != 0) {
    throw InvalidArgument("image side must be divisible by 2^" + std::to_string(levels));
  }
  side0_h_ = info.shape[0] / factor;
  side0_w_ = info.shape[1] / factor;
  channels0_ = channels[0];
  flat_width_ = channels0_ * side0_h_ * side0_w_;
  for (size_t i = 0; i < channels.size(); ++i) {
    const int64_t out = (i + 1 < channels.size()) ? channels[i + 1] : info.shape[2];
    deconvs_.push_back(register_module(
        "deconv" + std::to_string(i),
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(channels[i], out, 4).stride(2).padding(1))));
  }
}

torch::Tensor ConvUpImpl::forward(const torch::Tensor& x) {
  auto y = activate(x, activation_).view({x.size(0), channels0_, side0_h_, side0_w_});
  for (size_t i = 0; i < deconvs_.size(); ++i) {
    y = deconvs_[i]->forward(y);
    if (i + 1 < deconvs_.size()) y = activate(y, activation_);
  }
  return y.permute({0, 2, 3, 1});
}

torch::Tensor timestep_embedding(const torch::Tensor& steps, int64_t width, torch::ScalarType dtype) {
  const int64_t half = width / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::TensorOptions().dtype(dtype)) /
                          static_cast<double>(std::max<int64_t>(half, 1)));
  auto args = steps.to(dtype).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (width % 2 == 1) emb = torch::cat({emb, torch::zeros({steps.size(0), 1}, emb.options())}, 1);
  return emb;
}

}  // namespace shala
