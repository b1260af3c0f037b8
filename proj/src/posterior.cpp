#include "shala/posterior.hpp"

namespace shala {

json EncoderConfig::to_json() const {
  return {{"embed_width", embed_width}, {"conv_channels", conv_channels}, {"hidden", hidden},
          {"activation", to_string(activation)}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.embed_width = j.at("embed_width").get<int64_t>();
  c.conv_channels = j.at("conv_channels").get<std::vector<int64_t>>();
  c.hidden = j.at("hidden").get<std::vector<int64_t>>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  return c;
}

ModalityEncoderImpl::ModalityEncoderImpl(ModalityInfo info, const EncoderConfig& config) : info_(std::move(info)) {
  int64_t flat = info_.numel();
  if (info_.kind == ModalityKind::image && !config.conv_channels.empty()) {
    conv_ = register_module("conv", ConvDown(info_, config.conv_channels, config.activation));
    flat = conv_->flat_width();
  }
  head_ = register_module("head", Mlp(flat, config.hidden, config.embed_width, config.activation));
}

torch::Tensor ModalityEncoderImpl::forward(const torch::Tensor& x) {
  check_modality_shape(info_, x, "encode_modalities");
  auto y = conv_ ? conv_->forward(x) : x.flatten(1);
  return head_->forward(y);
}

ModalityEncoderBankImpl::ModalityEncoderBankImpl(const std::vector<ModalityInfo>& infos, const EncoderConfig& config)
    : infos_(infos), embed_width_(config.embed_width) {
  if (infos.empty()) throw InvalidArgument("encoder bank needs at least one modality");
  for (size_t i = 0; i < infos.size(); ++i) {
    encoders_.push_back(register_module("encoder" + std::to_string(i), ModalityEncoder(infos[i], config)));
  }
  null_embeddings_ = register_parameter(
      "null_embeddings", 0.1 * torch::randn({static_cast<int64_t>(infos.size()), config.embed_width}));
}

torch::Tensor ModalityEncoderBankImpl::encode_modality(int64_t i, const torch::Tensor& x) {
  return encoders_.at(static_cast<size_t>(i))->forward(x);
}

std::vector<torch::Tensor> ModalityEncoderBankImpl::encode(const Batch& batch) {
  if (batch.num_modalities() != num_modalities()) {
    throw ShapeMismatch("batch has " + std::to_string(batch.num_modalities()) + " modalities, encoder bank has " +
                        std::to_string(num_modalities()));
  }
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < num_modalities(); ++i) {
    auto h = encode_modality(i, batch.x[static_cast<size_t>(i)]);
    auto present = batch.presence.select(1, i).unsqueeze(1);
    out.push_back(torch::where(present, h, null_embeddings_[i].unsqueeze(0).expand_as(h)));
  }
  return out;
}

FusionVariant parse_fusion_variant(const std::string& name) {
  if (name == "concat") return FusionVariant::concat;
  if (name == "sum") return FusionVariant::sum;
  if (name == "gated") return FusionVariant::gated;
  throw InvalidArgument("unknown fusion variant '" + name + "'");
}

std::string to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::concat:
      return "concat";
    case FusionVariant::sum:
      return "sum";
    case FusionVariant::gated:
      return "gated";
  }
  return "concat";
}

json FusionConfig::to_json() const {
  return {{"variant", to_string(variant)}, {"fused_width", fused_width}, {"layers", layers},
          {"activation", to_string(activation)}};
}

FusionConfig FusionConfig::from_json(const json& j) {
  FusionConfig c;
  c.variant = parse_fusion_variant(j.at("variant").get<std::string>());
  c.fused_width = j.at("fused_width").get<int64_t>();
  c.layers = j.at("layers").get<int64_t>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  return c;
}

FusionHeadImpl::FusionHeadImpl(int64_t num_modalities, int64_t embed_width, const FusionConfig& config)
    : config_(config), num_modalities_(num_modalities), embed_width_(embed_width) {
  if (config.layers < 1) throw InvalidArgument("fusion trunk needs at least one layer");
  input_width_ = config.variant == FusionVariant::sum ? embed_width : num_modalities * embed_width;
  std::vector<int64_t> hidden(static_cast<size_t>(config.layers - 1), config.fused_width);
  trunk_ = register_module("trunk", Mlp(input_width_, hidden, config.fused_width, config.activation));
  if (config.variant == FusionVariant::gated) {
    for (int64_t i = 0; i < num_modalities; ++i) {
      gates_.push_back(register_module("gate" + std::to_string(i), torch::nn::Linear(embed_width, embed_width)));
    }
  }
}

torch::Tensor FusionHeadImpl::forward(const std::vector<torch::Tensor>& h) {
  if (static_cast<int64_t>(h.size()) != num_modalities_) {
    throw InvalidArgument("fusion head configured for " + std::to_string(num_modalities_) + " modalities, got " +
                          std::to_string(h.size()));
  }
  for (const auto& hi : h) {
    if (hi.size(-1) != embed_width_) throw ShapeMismatch("fusion input embedding width mismatch");
  }
  torch::Tensor input;
  switch (config_.variant) {
    case FusionVariant::concat:
      input = torch::cat(h, -1);
      break;
    case FusionVariant::sum:
      input = torch::stack(h, 0).sum(0);
      break;
    case FusionVariant::gated: {
      std::vector<torch::Tensor> gated;
      for (size_t i = 0; i < h.size(); ++i) gated.push_back(torch::sigmoid(gates_[i]->forward(h[i])) * h[i]);
      input = torch::cat(gated, -1);
      break;
    }
  }
  return trunk_->forward(input);
}

void GaussianPosterior::validate() const {
  if (!mean.defined() || !variance.defined()) throw NumericalError("Gaussian posterior is undefined");
  if (mean.sizes() != variance.sizes()) throw ShapeMismatch("posterior mean/variance shapes differ");
  if (!torch::isfinite(mean).all().item<bool>() || !torch::isfinite(variance).all().item<bool>()) {
    throw NumericalError("Gaussian posterior has non-finite parameters");
  }
  if (!(variance > 0).all().item<bool>()) throw NumericalError("Gaussian posterior variance must be positive");
}

PosteriorHeadImpl::PosteriorHeadImpl(int64_t in_width, int64_t latent_dim) {
  mean_ = register_module("mean", torch::nn::Linear(in_width, latent_dim));
  log_variance_ = register_module("log_variance", torch::nn::Linear(in_width, latent_dim));
}

GaussianPosterior PosteriorHeadImpl::forward(const torch::Tensor& hbar) {
  auto log_var = torch::clamp(log_variance_->forward(hbar), kLogVarianceMin, kLogVarianceMax);
  return {mean_->forward(hbar), torch::exp(log_var)};
}

InferenceModelImpl::InferenceModelImpl(const std::vector<ModalityInfo>& infos, int64_t latent_dim,
                                       const EncoderConfig& encoder, const FusionConfig& fusion)
    : latent_dim_(latent_dim) {
  if (latent_dim < 1) throw InvalidArgument("latent_dim must be >= 1");
  bank_ = register_module("bank", ModalityEncoderBank(infos, encoder));
  fusion_ = register_module("fusion", FusionHead(static_cast<int64_t>(infos.size()), encoder.embed_width, fusion));
  head_ = register_module("head", PosteriorHead(fusion.fused_width, latent_dim));
}

GaussianPosterior InferenceModelImpl::posterior_params(const torch::Tensor& hbar) {
  if (hbar.size(-1) != fusion_->output_width()) throw ShapeMismatch("hbar width does not match the posterior head");
  auto q = head_->forward(hbar);
  if (!torch::isfinite(q.mean).all().item<bool>() || !torch::isfinite(q.variance).all().item<bool>()) {
    throw NumericalError("posterior head produced non-finite parameters");
  }
  return q;
}

torch::Tensor sample_posterior(const GaussianPosterior& q, Rng& rng) {
  auto eps = rng.normal(q.mean.sizes(), q.mean.scalar_type());
  return q.mean + torch::sqrt(q.variance) * eps;
}

namespace {

void check_experts(const std::vector<GaussianPosterior>& experts) {
  if (experts.empty()) throw InvalidArgument("need at least one expert");
  for (const auto& e : experts) {
    if (e.mean.sizes() != experts.front().mean.sizes()) throw ShapeMismatch("expert shapes differ");
    if (!(e.variance > 0).all().item<bool>()) throw InvalidArgument("expert variance must be positive");
  }
}

}  // namespace

GaussianPosterior poe_posterior(const std::vector<GaussianPosterior>& experts, bool include_prior) {
  check_experts(experts);
  auto precision = include_prior ? torch::ones_like(experts.front().variance) : torch::zeros_like(experts.front().variance);
  auto weighted = torch::zeros_like(experts.front().mean);
  for (const auto& e : experts) {
    auto p = 1.0 / e.variance;
    precision = precision + p;
    weighted = weighted + e.mean * p;
  }
  return {weighted / precision, 1.0 / precision};
}

torch::Tensor moe_sample(const std::vector<GaussianPosterior>& experts, Rng& rng) {
  check_experts(experts);
  auto means = torch::stack(
      [&] {
        std::vector<torch::Tensor> v;
        for (const auto& e : experts) v.push_back(e.mean);
        return v;
      }(),
      0);
  auto vars = torch::stack(
      [&] {
        std::vector<torch::Tensor> v;
        for (const auto& e : experts) v.push_back(e.variance);
        return v;
      }(),
      0);
  const bool batched = experts.front().mean.dim() == 2;
  const int64_t rows = batched ? experts.front().mean.size(0) : 1;
  auto which = rng.randint(static_cast<int64_t>(experts.size()), {rows});
  torch::Tensor mu, var;
  if (batched) {
    auto idx = which.view({1, rows, 1}).expand({1, rows, means.size(2)});
    mu = means.gather(0, idx).squeeze(0);
    var = vars.gather(0, idx).squeeze(0);
  } else {
    mu = means.index_select(0, which).squeeze(0);
    var = vars.index_select(0, which).squeeze(0);
  }
  return mu + torch::sqrt(var) * rng.normal(mu.sizes(), mu.scalar_type());
}

GaussianPosterior moe_mixture_stats(const std::vector<GaussianPosterior>& experts) {
  check_experts(experts);
  auto mean = torch::zeros_like(experts.front().mean);
  auto second = torch::zeros_like(experts.front().mean);
  for (const auto& e : experts) {
    mean = mean + e.mean;
    second = second + e.variance + e.mean * e.mean;
  }
  const double m = static_cast<double>(experts.size());
  mean = mean / m;
  return {mean, second / m - mean * mean};
}

torch::Tensor kl_to_standard_normal(const GaussianPosterior& q) {
  return 0.5 * (q.variance + q.mean * q.mean - 1.0 - torch::log(q.variance)).sum(-1);
}

}  // namespace shala
