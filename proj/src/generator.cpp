#include "shala/generator.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace shala {

json DecoderConfig::to_json() const {
  return {{"conv_channels", conv_channels}, {"hidden", hidden}, {"activation", to_string(activation)},
          {"obs_scale", obs_scale}, {"obs_scales", obs_scales}};
}

DecoderConfig DecoderConfig::from_json(const json& j) {
  DecoderConfig c;
  c.conv_channels = j.at("conv_channels").get<std::vector<int64_t>>();
  c.hidden = j.at("hidden").get<std::vector<int64_t>>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.obs_scale = j.at("obs_scale").get<double>();
  c.obs_scales = j.value("obs_scales", std::vector<double>{});
  return c;
}

double gaussian_log_constant(int64_t dim, double scale) {
  return -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * scale * scale);
}

ModalityDecoderImpl::ModalityDecoderImpl(ModalityInfo info, int64_t latent_dim, const DecoderConfig& config,
                                         double obs_scale)
    : info_(std::move(info)),
      likelihood_(info_.kind == ModalityKind::categorical ? Likelihood::categorical : Likelihood::gaussian),
      obs_scale_(obs_scale) {
  if (likelihood_ == Likelihood::gaussian && !(obs_scale > 0.0)) {
    throw InvalidArgument("gaussian observation scale must be positive");
  }
  if (info_.kind == ModalityKind::image && !config.conv_channels.empty()) {
    up_ = register_module("up", ConvUp(info_, config.conv_channels, config.activation));
    trunk_ = register_module("trunk", Mlp(latent_dim, config.hidden, up_->flat_width(), config.activation));
  } else {
    trunk_ = register_module("trunk", Mlp(latent_dim, config.hidden, info_.numel(), config.activation));
  }
}

torch::Tensor ModalityDecoderImpl::forward(const torch::Tensor& z) {
  auto y = trunk_->forward(z);
  if (up_) {
    return torch::sigmoid(up_->forward(y));
  }
  std::vector<int64_t> shape{z.size(0)};
  shape.insert(shape.end(), info_.shape.begin(), info_.shape.end());
  y = y.view(shape);
  return info_.kind == ModalityKind::image ? torch::sigmoid(y) : y;
}

torch::Tensor ModalityDecoderImpl::decode(const torch::Tensor& z) {
  auto y = forward(z);
  return likelihood_ == Likelihood::categorical ? torch::softmax(y, -1) : y;
}

torch::Tensor ModalityDecoderImpl::log_likelihood(const torch::Tensor& x, const torch::Tensor& z) {
  check_modality_shape(info_, x, "log_likelihood");
  auto out = forward(z);
  if (likelihood_ == Likelihood::categorical) {
    return (torch::log_softmax(out, -1) * x).sum(-1);
  }
  auto sq = (x - out).pow(2).flatten(1).sum(1);
  return -sq / (2.0 * obs_scale_ * obs_scale_) + gaussian_log_constant(info_.numel(), obs_scale_);
}

DecoderBankImpl::DecoderBankImpl(const std::vector<ModalityInfo>& infos, int64_t latent_dim,
                                 const DecoderConfig& config)
    : latent_dim_(latent_dim) {
  if (!config.obs_scales.empty() && config.obs_scales.size() != infos.size()) {
    throw InvalidArgument("obs_scales needs one entry per modality");
  }
  for (size_t i = 0; i < infos.size(); ++i) {
    const double scale = config.obs_scales.empty() ? config.obs_scale : config.obs_scales[i];
    decoders_.push_back(
        register_module("decoder" + std::to_string(i), ModalityDecoder(infos[i], latent_dim, config, scale)));
  }
}

std::vector<torch::Tensor> DecoderBankImpl::decode(const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != latent_dim_) {
    throw ShapeMismatch("decode expects z of shape [B, " + std::to_string(latent_dim_) + "], got " +
                        c10::str(z.sizes()));
  }
  std::vector<torch::Tensor> out;
  for (auto& d : decoders_) out.push_back(d->decode(z));
  return out;
}

std::vector<torch::Tensor> DecoderBankImpl::log_likelihood(const Batch& batch, const torch::Tensor& z) {
  if (batch.num_modalities() != num_modalities()) throw ShapeMismatch("batch/decoder modality count mismatch");
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < num_modalities(); ++i) {
    auto ll = decoders_[static_cast<size_t>(i)]->log_likelihood(batch.x[static_cast<size_t>(i)], z);
    auto present = batch.presence.select(1, i).to(ll.scalar_type());
    out.push_back(ll * present);
  }
  return out;
}

json ModelConfig::to_json() const {
  return {{"latent_dim", latent_dim},
          {"encoder", encoder.to_json()},
          {"fusion", fusion.to_json()},
          {"decoder", decoder.to_json()}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.latent_dim = j.at("latent_dim").get<int64_t>();
  c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.fusion = FusionConfig::from_json(j.at("fusion"));
  c.decoder = DecoderConfig::from_json(j.at("decoder"));
  return c;
}

ShalaVaeImpl::ShalaVaeImpl(const std::vector<ModalityInfo>& infos, const ModelConfig& config)
    : infos_(infos), config_(config) {
  inference_ = register_module("inference", InferenceModel(infos, config.latent_dim, config.encoder, config.fusion));
  decoders_ = register_module("decoders", DecoderBank(infos, config.latent_dim, config.decoder));
}

ElboTerms ShalaVaeImpl::elbo(const Batch& batch, Rng& rng, double kl_weight) {
  auto q = inference_->infer(batch);
  auto z = sample_posterior(q, rng);
  auto ll = decoders_->log_likelihood(batch, z);
  ElboTerms terms;
  auto kl = kl_to_standard_normal(q);
  auto total = -kl_weight * kl;
  for (auto& r : ll) {
    total = total + r;
    terms.recon.push_back(r.mean());
  }
  terms.kl = kl.mean();
  terms.elbo = total.mean();
  return terms;
}

std::vector<torch::Tensor> ShalaVaeImpl::decoder_parameters() { return decoders_->parameters(); }
std::vector<torch::Tensor> ShalaVaeImpl::inference_parameters() { return inference_->parameters(); }

void Stage1Config::validate() const {
  if (iterations < 0) throw InvalidArgument("stage1 iterations must be non-negative");
  if (batch_size <= 0) throw InvalidArgument("stage1 batch_size must be positive");
  if (!(lr_theta > 0.0) || !(lr_phi > 0.0)) throw InvalidArgument("stage1 learning rates must be positive");
  if (kl_warmup_fraction < 0.0 || kl_warmup_fraction > 1.0) {
    throw InvalidArgument("stage1 kl_warmup_fraction must lie in [0, 1]");
  }
  if (log_every <= 0) throw InvalidArgument("stage1 log_every must be positive");
}

json Stage1Config::to_json() const {
  return {{"iterations", iterations},   {"batch_size", batch_size},
          {"lr_theta", lr_theta},       {"lr_phi", lr_phi},
          {"kl_warmup_fraction", kl_warmup_fraction},
          {"adam_beta1", adam_beta1},   {"adam_beta2", adam_beta2},
          {"log_every", log_every},     {"freeze_decoders", freeze_decoders},
          {"seed", seed}};
}

Stage1Config Stage1Config::from_json(const json& j) {
  Stage1Config c;
  c.iterations = j.at("iterations").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr_theta = j.at("lr_theta").get<double>();
  c.lr_phi = j.at("lr_phi").get<double>();
  c.kl_warmup_fraction = j.at("kl_warmup_fraction").get<double>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.log_every = j.at("log_every").get<int64_t>();
  c.freeze_decoders = j.at("freeze_decoders").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

double kl_weight_at(const Stage1Config& config, int64_t iteration) {
  const double ramp = config.kl_warmup_fraction * static_cast<double>(config.iterations);
  if (ramp <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(iteration) / ramp);
}

json CurvePoint::to_json() const { return {{"iteration", iteration}, {"loss", loss}, {"kl", kl}, {"recon", recon}}; }

std::string curve_to_jsonl(const std::vector<CurvePoint>& curve) {
  std::ostringstream out;
  for (const auto& p : curve) out << p.to_json().dump() << '\n';
  return out.str();
}

std::vector<torch::Tensor> snapshot_parameters(torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) out.push_back(p.detach().clone());
  return out;
}

void restore_parameters(torch::nn::Module& module, const std::vector<torch::Tensor>& snapshot) {
  torch::NoGradGuard guard;
  auto params = module.parameters();
  if (params.size() != snapshot.size()) throw InvalidArgument("snapshot does not match module parameters");
  for (size_t i = 0; i < params.size(); ++i) params[i].copy_(snapshot[i]);
}

TrainReport train_stage1(ShalaVae& model, const Dataset& dataset, const Stage1Config& config) {
  config.validate();
  if (dataset.size() == 0) throw InvalidArgument("stage1 training needs a non-empty dataset");
  TrainReport report;
  if (config.iterations == 0) return report;

  Rng rng(config.seed);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  if (!config.freeze_decoders) {
    groups.emplace_back(model->decoder_parameters(),
                        std::make_unique<torch::optim::AdamOptions>(
                            torch::optim::AdamOptions(config.lr_theta).betas({config.adam_beta1, config.adam_beta2})));
  }
  groups.emplace_back(model->inference_parameters(),
                      std::make_unique<torch::optim::AdamOptions>(
                          torch::optim::AdamOptions(config.lr_phi).betas({config.adam_beta1, config.adam_beta2})));
  torch::optim::Adam optimizer(std::move(groups));

  model->train();
  auto last_good = snapshot_parameters(*model);
  const auto dtype = model->parameters().front().scalar_type();
  double window_loss = 0.0, window_kl = 0.0;
  std::vector<double> window_recon(static_cast<size_t>(dataset.num_modalities()), 0.0);
  int64_t window_count = 0;

  for (int64_t it = 0; it < config.iterations; ++it) {
    auto idx = rng.randint(dataset.size(), {config.batch_size});
    auto batch = dataset.batch(idx).to(dtype);
    ElboTerms terms;
    std::string failure;
    try {
      terms = model->elbo(batch, rng, kl_weight_at(config, it));
    } catch (const NumericalError& e) {
      failure = e.what();
    }
    const double loss_value = failure.empty() ? -terms.elbo.item<double>() : NAN;
    if (!std::isfinite(loss_value)) {
      restore_parameters(*model, last_good);
      report.status = TrainStatus::diverged;
      report.diagnostics = "non-finite stage-1 loss at iteration " + std::to_string(it) + " (" +
                           (failure.empty() ? "kl=" + std::to_string(terms.kl.item<double>()) : failure) + ")";
      report.iterations_run = it;
      return report;
    }
    auto loss = -terms.elbo;
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();

    window_loss += loss_value;
    window_kl += terms.kl.item<double>();
    for (size_t i = 0; i < window_recon.size(); ++i) window_recon[i] += terms.recon[i].item<double>();
    ++window_count;
    if ((it + 1) % config.log_every == 0 || it + 1 == config.iterations) {
      CurvePoint p;
      p.iteration = it + 1;
      p.loss = window_loss / static_cast<double>(window_count);
      p.kl = window_kl / static_cast<double>(window_count);
      for (double r : window_recon) p.recon.push_back(r / static_cast<double>(window_count));
      report.curve.push_back(std::move(p));
      window_loss = window_kl = 0.0;
      std::fill(window_recon.begin(), window_recon.end(), 0.0);
      window_count = 0;
      last_good = snapshot_parameters(*model);
    }
  }
  report.iterations_run = config.iterations;
  model->eval();
  return report;
}

GaussianPosterior infer_dataset(ShalaVae& model, const Dataset& dataset, int64_t chunk) {
  torch::NoGradGuard guard;
  const auto dtype = model->parameters().front().scalar_type();
  std::vector<torch::Tensor> means, vars;
  for (int64_t start = 0; start < dataset.size(); start += chunk) {
    auto idx = torch::arange(start, std::min(start + chunk, dataset.size()), torch::kLong);
    auto q = model->inference()->infer(dataset.batch(idx).to(dtype));
    means.push_back(q.mean);
    vars.push_back(q.variance);
  }
  return {torch::cat(means), torch::cat(vars)};
}

}  // namespace shala
