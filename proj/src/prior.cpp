#include <cmath>

#include "shala/diffusion.hpp"

namespace shala {

torch::Tensor prior_loss(Denoiser& denoiser, const torch::Tensor& z0, const std::vector<torch::Tensor>& conditions,
                         const torch::Tensor& presence, const ConditioningPolicy& policy,
                         const NoiseSchedule& schedule, Rng& rng, PriorLossStats* stats) {
  policy.validate();
  const int64_t b = z0.size(0);
  const int64_t steps = schedule.steps();
  auto t = rng.randint(steps, {b}) + 1;
  auto eps = rng.normal(z0.sizes(), z0.scalar_type());

  std::vector<double> ab(static_cast<size_t>(steps + 1)), nl(static_cast<size_t>(steps + 1));
  for (int64_t s = 0; s <= steps; ++s) {
    ab[static_cast<size_t>(s)] = schedule.alpha_bar(s);
    nl[static_cast<size_t>(s)] = schedule.noise_level(s);
  }
  auto opts = torch::TensorOptions().dtype(z0.scalar_type());
  auto ab_t = torch::tensor(ab, torch::kDouble).to(z0.scalar_type()).index_select(0, t).unsqueeze(1);
  auto nl_t = torch::tensor(nl, torch::kDouble).to(z0.scalar_type()).index_select(0, t).unsqueeze(1);
  auto z_t = ab_t * z0 + nl_t * eps;

  torch::Tensor cond, null_mask;
  std::vector<int64_t> chosen(static_cast<size_t>(b), -1);
  if (!conditions.empty() && denoiser->conditional()) {
    const auto m = static_cast<int64_t>(conditions.size());
    auto pres = presence.to(torch::kBool).contiguous();
    auto pacc = pres.accessor<bool, 2>();
    std::vector<int64_t> present;
    for (int64_t r = 0; r < b; ++r) {
      const bool drop = rng.uniform() < policy.drop_probability;
      present.clear();
      for (int64_t j = 0; j < m; ++j) {
        if (pacc[r][j]) present.push_back(j);
      }
      // the modality draw happens even for dropped rows so the stream does not
      // depend on the drop outcome
      const int64_t pick = present.empty() ? -1 : present[static_cast<size_t>(rng.uniform_int(
                                                      static_cast<int64_t>(present.size())))];
      chosen[static_cast<size_t>(r)] = drop ? -1 : pick;
    }
    auto stacked = torch::stack(conditions, 0);  // [M, B, E]
    auto which = torch::tensor(chosen, torch::kLong);
    null_mask = which.lt(0);
    auto idx = which.clamp_min(0).view({1, b, 1}).expand({1, b, stacked.size(2)});
    cond = stacked.gather(0, idx).squeeze(0);
  }
  if (stats != nullptr) {
    stats->rows = b;
    stats->null_rows = static_cast<int64_t>(std::count(chosen.begin(), chosen.end(), -1));
    stats->chosen = chosen;
  }
  auto eps_hat = denoiser->forward(z_t, t, cond, null_mask);
  (void)opts;
  return (eps - eps_hat).pow(2).sum(1).mean();
}

void GuidanceConfig::validate() const {
  if (!std::isfinite(scale) || scale < 0.0) throw InvalidArgument("guidance scale must be finite and >= 0");
}

torch::Tensor guided_epsilon(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double w) {
  if (w == 0.0) return eps_uncond;
  if (w == 1.0) return eps_cond;
  return eps_uncond + w * (eps_cond - eps_uncond);
}

torch::Tensor predict_noise(Denoiser& denoiser, const torch::Tensor& z, int64_t step, const torch::Tensor& cond,
                            double guidance, NfeCounter* nfe) {
  GuidanceConfig{guidance}.validate();
  const int64_t b = z.size(0);
  auto steps = torch::full({b}, step, torch::kLong);
  if (nfe != nullptr) ++nfe->denoiser_calls;
  if (!cond.defined() || !denoiser->conditional() || guidance == 0.0) {
    return denoiser->forward(z, steps);
  }
  if (guidance == 1.0) {
    return denoiser->forward(z, steps, cond);
  }
  auto null_mask = torch::cat({torch::zeros({b}, torch::kBool), torch::ones({b}, torch::kBool)});
  auto out = denoiser->forward(torch::cat({z, z}), torch::cat({steps, steps}), torch::cat({cond, cond}), null_mask);
  return guided_epsilon(out.slice(0, b, 2 * b), out.slice(0, 0, b), guidance);
}

torch::Tensor denoise_step(Denoiser& denoiser, const torch::Tensor& z_next, int64_t t, const torch::Tensor& cond,
                           double guidance, const NoiseSchedule& schedule, Rng& rng, NfeCounter* nfe) {
  if (t < 0 || t >= schedule.steps()) {
    throw InvalidArgument("denoise_step target index " + std::to_string(t) + " outside [0, " +
                          std::to_string(schedule.steps() - 1) + "]");
  }
  const int64_t s = t + 1;
  auto eps = predict_noise(denoiser, z_next, s, cond, guidance, nfe);
  const double sigma2 = schedule.sigma(s) * schedule.sigma(s);
  auto mean = (z_next - (sigma2 / schedule.noise_level(s)) * eps) / schedule.alpha(s);
  torch::Tensor out = mean;
  if (t > 0) {
    out = mean + schedule.reverse_std(s) * rng.normal(mean.sizes(), mean.scalar_type());
  }
  if (!torch::isfinite(out).all().item<bool>()) {
    throw NumericalError("non-finite latent state at reverse step " + std::to_string(t));
  }
  return out;
}

PriorSample sample_prior(Denoiser& denoiser, const NoiseSchedule& schedule, int64_t n, const torch::Tensor& cond,
                         double guidance, Rng& rng, std::optional<int64_t> start_step, const torch::Tensor& z_start) {
  torch::NoGradGuard guard;
  const int64_t start = start_step.value_or(schedule.steps());
  if (start < 0 || start > schedule.steps()) throw InvalidArgument("sample_prior start step out of range");
  const auto dtype = denoiser->parameters().front().scalar_type();
  torch::Tensor z = z_start.defined() ? z_start.to(dtype)
                                      : rng.normal({n, denoiser->config().latent_dim}, dtype);
  if (cond.defined() && cond.size(0) != z.size(0)) throw ShapeMismatch("condition rows must match sample count");
  NfeCounter nfe;
  for (int64_t t = start - 1; t >= 0; --t) {
    z = denoise_step(denoiser, z, t, cond.defined() ? cond.to(dtype) : cond, guidance, schedule, rng, &nfe);
  }
  return {z, nfe.denoiser_calls};
}

void Stage2Config::validate() const {
  if (iterations < 0) throw InvalidArgument("stage2 iterations must be non-negative");
  if (batch_size <= 0) throw InvalidArgument("stage2 batch_size must be positive");
  if (!(lr_beta > 0.0)) throw InvalidArgument("stage2 lr_beta must be positive");
  if (steps < 1) throw InvalidArgument("stage2 steps must be >= 1");
  if (log_every <= 0) throw InvalidArgument("stage2 log_every must be positive");
  policy.validate();
  GuidanceConfig{guidance}.validate();
}

json Stage2Config::to_json() const {
  return {{"iterations", iterations}, {"batch_size", batch_size}, {"lr_beta", lr_beta},
          {"steps", steps},           {"schedule", to_string(schedule)}, {"policy", policy.to_json()},
          {"denoiser", denoiser.to_json()}, {"guidance", guidance},       {"log_every", log_every},
          {"grad_clip", grad_clip},   {"seed", seed}};
}

Stage2Config Stage2Config::from_json(const json& j) {
  Stage2Config c;
  c.iterations = j.at("iterations").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr_beta = j.at("lr_beta").get<double>();
  c.steps = j.at("steps").get<int64_t>();
  c.schedule = parse_schedule_kind(j.at("schedule").get<std::string>());
  c.policy = ConditioningPolicy::from_json(j.at("policy"));
  c.denoiser = DenoiserConfig::from_json(j.at("denoiser"));
  c.guidance = j.at("guidance").get<double>();
  c.log_every = j.at("log_every").get<int64_t>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

LatentTrainingSet build_latent_training_set(ShalaVae& stage1, const Dataset& dataset, ConditionSource source,
                                            int64_t chunk) {
  torch::NoGradGuard guard;
  const auto dtype = stage1->parameters().front().scalar_type();
  LatentTrainingSet out;
  std::vector<torch::Tensor> means, vars;
  std::vector<std::vector<torch::Tensor>> emb(static_cast<size_t>(dataset.num_modalities()));
  for (int64_t start = 0; start < dataset.size(); start += chunk) {
    auto idx = torch::arange(start, std::min(start + chunk, dataset.size()), torch::kLong);
    auto batch = dataset.batch(idx).to(dtype);
    auto h = stage1->inference()->embed(batch);
    auto q = stage1->inference()->posterior_params(stage1->inference()->fuse(h));
    means.push_back(q.mean);
    vars.push_back(q.variance);
    if (source == ConditionSource::embedding) {
      for (size_t i = 0; i < h.size(); ++i) emb[i].push_back(h[i]);
    }
  }
  out.mean = torch::cat(means);
  out.variance = torch::cat(vars);
  if (source == ConditionSource::embedding) {
    for (auto& e : emb) out.embeddings.push_back(torch::cat(e));
  } else {
    out.raw = dataset.data();
  }
  out.presence = dataset.presence();
  return out;
}

TrainReport train_prior(LatentPrior& prior, const LatentTrainingSet& data, const Stage2Config& config) {
  config.validate();
  TrainReport report;
  if (config.iterations == 0) return report;
  if (data.size() == 0) throw InvalidArgument("prior training needs a non-empty latent set");
  if (prior->policy().source == ConditionSource::raw && !prior->has_raw_encoder()) {
    throw InvalidArgument("raw conditioning requested but the prior has no raw encoder");
  }
  Rng rng(config.seed);
  torch::optim::Adam optimizer(prior->parameters(), torch::optim::AdamOptions(config.lr_beta));
  prior->train();
  auto last_good = snapshot_parameters(*prior);
  const auto dtype = prior->parameters().front().scalar_type();
  double window = 0.0;
  int64_t count = 0;
  for (int64_t it = 0; it < config.iterations; ++it) {
    auto idx = rng.randint(data.size(), {config.batch_size});
    auto mean = data.mean.index_select(0, idx).to(dtype);
    auto var = data.variance.index_select(0, idx).to(dtype);
    auto z0 = mean + torch::sqrt(var) * rng.normal(mean.sizes(), dtype);
    std::vector<torch::Tensor> conds;
    if (prior->policy().source == ConditionSource::raw && prior->has_raw_encoder()) {
      conds = prior->raw_encoder()->encode(data.raw.select(idx).to(dtype));
    } else {
      for (const auto& e : data.embeddings) conds.push_back(e.index_select(0, idx).to(dtype));
    }
    torch::Tensor presence = data.presence.defined() ? data.presence.index_select(0, idx)
                                                     : torch::ones({config.batch_size, 0}, torch::kBool);
    auto loss = prior_loss(prior->denoiser(), z0, conds, presence, prior->policy(), prior->schedule(), rng);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      restore_parameters(*prior, last_good);
      report.status = TrainStatus::diverged;
      report.diagnostics = "non-finite prior loss at iteration " + std::to_string(it);
      report.iterations_run = it;
      return report;
    }
    optimizer.zero_grad();
    loss.backward();
    if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(prior->parameters(), config.grad_clip);
    optimizer.step();
    window += value;
    ++count;
    if ((it + 1) % config.log_every == 0 || it + 1 == config.iterations) {
      CurvePoint p;
      p.iteration = it + 1;
      p.loss = window / static_cast<double>(count);
      report.curve.push_back(p);
      window = 0.0;
      count = 0;
      last_good = snapshot_parameters(*prior);
    }
  }
  report.iterations_run = config.iterations;
  prior->eval();
  return report;
}

TrainReport train_stage2(LatentPrior& prior, ShalaVae& stage1, const Dataset& dataset, const Stage2Config& config) {
  auto data = build_latent_training_set(stage1, dataset, prior->policy().source);
  return train_prior(prior, data, config);
}

}  // namespace shala
