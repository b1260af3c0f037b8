#include "shala/diffusion.hpp"

namespace shala {

ConditionSource parse_condition_source(const std::string& name) {
  if (name == "embedding") return ConditionSource::embedding;
  if (name == "raw") return ConditionSource::raw;
  throw InvalidArgument("unknown condition source '" + name + "'");
}

std::string to_string(ConditionSource s) { return s == ConditionSource::raw ? "raw" : "embedding"; }

void ConditioningPolicy::validate() const {
  if (!(drop_probability >= 0.0 && drop_probability < 1.0)) {
    throw InvalidArgument("drop_probability must lie in [0, 1)");
  }
}

json ConditioningPolicy::to_json() const {
  return {{"source", to_string(source)}, {"drop_probability", drop_probability}};
}

ConditioningPolicy ConditioningPolicy::from_json(const json& j) {
  ConditioningPolicy p;
  p.source = parse_condition_source(j.at("source").get<std::string>());
  p.drop_probability = j.at("drop_probability").get<double>();
  p.validate();
  return p;
}

json DenoiserConfig::to_json() const {
  return {{"latent_dim", latent_dim}, {"cond_width", cond_width}, {"hidden", hidden},
          {"blocks", blocks},         {"time_width", time_width}, {"activation", to_string(activation)}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
  DenoiserConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.cond_width = j.value("cond_width", c.cond_width);
  c.hidden = j.at("hidden").get<int64_t>();
  c.blocks = j.at("blocks").get<int64_t>();
  c.time_width = j.at("time_width").get<int64_t>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  return c;
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& config) : config_(config) {
  if (config.latent_dim < 1 || config.hidden < 1 || config.blocks < 1 || config.time_width < 2) {
    throw InvalidArgument("invalid denoiser config");
  }
  input_ = register_module("input", torch::nn::Linear(config.latent_dim, config.hidden));
  time_mlp_ = register_module("time_mlp", Mlp(config.time_width, std::vector<int64_t>{config.hidden}, config.hidden, config.activation));
  if (config.cond_width > 0) {
    cond_proj_ = register_module("cond_proj", torch::nn::Linear(config.cond_width, config.hidden));
  }
  null_token_ = register_parameter("null_token", torch::zeros({config.hidden}));
  for (int64_t k = 0; k < config.blocks; ++k) {
    const auto s = std::to_string(k);
    block_in_.push_back(register_module("block_in" + s, torch::nn::Linear(config.hidden, config.hidden)));
    block_emb_.push_back(register_module("block_emb" + s, torch::nn::Linear(config.hidden, config.hidden)));
    block_out_.push_back(register_module("block_out" + s, torch::nn::Linear(config.hidden, config.hidden)));
  }
  output_ = register_module("output", torch::nn::Linear(config.hidden, config.latent_dim));
  torch::NoGradGuard guard;
  output_->weight.zero_();
  output_->bias.zero_();
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& steps, const torch::Tensor& cond,
                                    const torch::Tensor& null_mask) {
  if (z.dim() != 2 || z.size(1) != config_.latent_dim) {
    throw ShapeMismatch("denoiser expects z [B, " + std::to_string(config_.latent_dim) + "], got " +
                        c10::str(z.sizes()));
  }
  const int64_t b = z.size(0);
  auto emb = time_mlp_->forward(timestep_embedding(steps, config_.time_width, z.scalar_type()));
  auto null_rows = null_token_.unsqueeze(0).expand({b, config_.hidden});
  torch::Tensor c;
  if (cond.defined() && conditional()) {
    if (cond.dim() != 2 || cond.size(0) != b || cond.size(1) != config_.cond_width) {
      throw ShapeMismatch("denoiser condition must be [B, " + std::to_string(config_.cond_width) + "], got " +
                          c10::str(cond.sizes()));
    }
    c = cond_proj_->forward(cond);
    if (null_mask.defined()) c = torch::where(null_mask.unsqueeze(1), null_rows, c);
  } else {
    c = null_rows;
  }
  emb = emb + c;
  auto x = input_->forward(z);
  for (size_t k = 0; k < block_in_.size(); ++k) {
    auto hdn = block_in_[k]->forward(activate(x, config_.activation)) + block_emb_[k]->forward(emb);
    x = x + block_out_[k]->forward(activate(hdn, config_.activation));
  }
  return output_->forward(activate(x, config_.activation));
}

RawConditionEncoderImpl::RawConditionEncoderImpl(const std::vector<ModalityInfo>& infos, int64_t cond_width)
    : infos_(infos) {
  for (size_t i = 0; i < infos.size(); ++i) {
    maps_.push_back(register_module("map" + std::to_string(i), torch::nn::Linear(infos[i].numel(), cond_width)));
  }
}

torch::Tensor RawConditionEncoderImpl::encode(int64_t i, const torch::Tensor& x) {
  check_modality_shape(infos_.at(static_cast<size_t>(i)), x, "raw condition encoder");
  return maps_.at(static_cast<size_t>(i))->forward(x.flatten(1));
}

std::vector<torch::Tensor> RawConditionEncoderImpl::encode(const Batch& batch) {
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < batch.num_modalities(); ++i) out.push_back(encode(i, batch.x[static_cast<size_t>(i)]));
  return out;
}

LatentPriorImpl::LatentPriorImpl(const NoiseSchedule& schedule, const DenoiserConfig& config,
                                 const ConditioningPolicy& policy, const std::vector<ModalityInfo>& infos)
    : schedule_(schedule), policy_(policy) {
  policy.validate();
  if (schedule.steps() < 1) throw InvalidArgument("latent prior needs a schedule with T >= 1");
  denoiser_ = register_module("denoiser", Denoiser(config));
  if (policy.source == ConditionSource::raw) {
    if (infos.empty()) throw InvalidArgument("raw conditioning needs modality infos");
    if (config.cond_width <= 0) throw InvalidArgument("raw conditioning needs a positive cond_width");
    raw_ = register_module("raw_encoder", RawConditionEncoder(infos, config.cond_width));
  }
}

}  // namespace shala
