#include "shala/baseline.hpp"

#include <cmath>

namespace shala {

ExpertCombination parse_expert_combination(const std::string& name) {
  if (name == "moe") return ExpertCombination::moe;
  if (name == "poe") return ExpertCombination::poe;
  throw InvalidArgument("unknown expert combination '" + name + "'");
}

std::string to_string(ExpertCombination c) { return c == ExpertCombination::moe ? "moe" : "poe"; }

ExpertsVaeImpl::ExpertsVaeImpl(const std::vector<ModalityInfo>& infos, const ModelConfig& config,
                               ExpertCombination combination)
    : infos_(infos), config_(config), combination_(combination) {
  for (size_t i = 0; i < infos.size(); ++i) {
    encoders_.push_back(register_module("encoder" + std::to_string(i), ModalityEncoder(infos[i], config.encoder)));
    heads_.push_back(register_module("head" + std::to_string(i),
                                     PosteriorHead(config.encoder.embed_width, config.latent_dim)));
  }
  decoders_ = register_module("decoders", DecoderBank(infos, config.latent_dim, config.decoder));
}

std::vector<torch::Tensor> ExpertsVaeImpl::inference_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& e : encoders_) {
    for (auto& p : e->parameters()) out.push_back(p);
  }
  for (auto& h : heads_) {
    for (auto& p : h->parameters()) out.push_back(p);
  }
  return out;
}

GaussianPosterior ExpertsVaeImpl::expert(int64_t i, const torch::Tensor& x) {
  return heads_.at(static_cast<size_t>(i))->forward(encoders_.at(static_cast<size_t>(i))->forward(x));
}

std::vector<GaussianPosterior> ExpertsVaeImpl::present_experts(const Batch& batch) {
  std::vector<GaussianPosterior> experts;
  for (int64_t i = 0; i < batch.num_modalities(); ++i) {
    if (batch.presence.select(1, i).all().item<bool>()) {
      experts.push_back(expert(i, batch.x[static_cast<size_t>(i)]));
    }
  }
  if (experts.empty()) throw InvalidArgument("no modality is present in every row of the batch");
  return experts;
}

ElboTerms ExpertsVaeImpl::elbo(const Batch& batch, Rng& rng, double kl_weight) {
  auto experts = present_experts(batch);
  ElboTerms terms;
  const auto m = static_cast<size_t>(batch.num_modalities());
  std::vector<torch::Tensor> recon(m);
  torch::Tensor total, kl_total;
  if (combination_ == ExpertCombination::poe) {
    auto q = poe_posterior(experts, true);
    auto z = sample_posterior(q, rng);
    auto ll = decoders_->log_likelihood(batch, z);
    auto kl = kl_to_standard_normal(q);
    total = -kl_weight * kl;
    for (size_t j = 0; j < m; ++j) {
      total = total + ll[j];
      recon[j] = ll[j];
    }
    kl_total = kl;
  } else {
    const double inv = 1.0 / static_cast<double>(experts.size());
    for (const auto& q : experts) {
      auto z = sample_posterior(q, rng);
      auto ll = decoders_->log_likelihood(batch, z);
      auto kl = kl_to_standard_normal(q);
      auto term = -kl_weight * kl;
      for (size_t j = 0; j < m; ++j) {
        term = term + ll[j];
        recon[j] = recon[j].defined() ? recon[j] + inv * ll[j] : inv * ll[j];
      }
      total = total.defined() ? total + inv * term : inv * term;
      kl_total = kl_total.defined() ? kl_total + inv * kl : inv * kl;
    }
  }
  for (auto& r : recon) terms.recon.push_back(r.mean());
  terms.kl = kl_total.mean();
  terms.elbo = total.mean();
  return terms;
}

torch::Tensor ExpertsVaeImpl::sample_latent(const Batch& batch, Rng& rng) {
  auto experts = present_experts(batch);
  if (combination_ == ExpertCombination::poe) return sample_posterior(poe_posterior(experts, true), rng);
  return moe_sample(experts, rng);
}

TrainReport train_experts_vae(ExpertsVae& model, const Dataset& dataset, const Stage1Config& config) {
  config.validate();
  if (dataset.size() == 0) throw InvalidArgument("baseline training needs a non-empty dataset");
  TrainReport report;
  if (config.iterations == 0) return report;
  Rng rng(config.seed);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(model->decoder_parameters(),
                      std::make_unique<torch::optim::AdamOptions>(
                          torch::optim::AdamOptions(config.lr_theta).betas({config.adam_beta1, config.adam_beta2})));
  groups.emplace_back(model->inference_parameters(),
                      std::make_unique<torch::optim::AdamOptions>(
                          torch::optim::AdamOptions(config.lr_phi).betas({config.adam_beta1, config.adam_beta2})));
  torch::optim::Adam optimizer(std::move(groups));
  model->train();
  auto last_good = snapshot_parameters(*model);
  const auto dtype = model->parameters().front().scalar_type();
  double window_loss = 0.0, window_kl = 0.0;
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
      report.diagnostics = "non-finite baseline loss at iteration " + std::to_string(it) +
                           (failure.empty() ? "" : " (" + failure + ")");
      report.iterations_run = it;
      return report;
    }
    auto loss = -terms.elbo;
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    window_loss += loss_value;
    window_kl += terms.kl.item<double>();
    ++window_count;
    if ((it + 1) % config.log_every == 0 || it + 1 == config.iterations) {
      CurvePoint p;
      p.iteration = it + 1;
      p.loss = window_loss / static_cast<double>(window_count);
      p.kl = window_kl / static_cast<double>(window_count);
      report.curve.push_back(p);
      window_loss = window_kl = 0.0;
      window_count = 0;
      last_good = snapshot_parameters(*model);
    }
  }
  report.iterations_run = config.iterations;
  model->eval();
  return report;
}

}  // namespace shala
