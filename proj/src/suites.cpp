#include "shala/suites.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "shala/archive.hpp"
#include "shala/checkpoint.hpp"
#include "suite_support.hpp"

namespace shala {

json CriterionResult::to_json() const {
  return {{"id", id},           {"name", name},           {"pass", pass},
          {"value", value},     {"threshold", threshold}, {"detail", detail}};
}

std::string CriterionResult::line() const {
  std::ostringstream s;
  s << (pass ? "[PASS]" : "[FAIL]") << " criterion " << id << " " << name << ": value=" << value
    << " threshold=" << threshold;
  if (!detail.empty()) s << " (" << detail << ")";
  return s.str();
}

bool SuiteReport::passed() const {
  return std::all_of(criteria.begin(), criteria.end(), [](const auto& c) { return c.pass; });
}

namespace detail {

SuiteContext::SuiteContext(std::string suite, const SuiteOptions& options)
    : options_(options), start_(std::chrono::steady_clock::now()) {
  report_.suite = std::move(suite);
  digest_ = sha256_hex(report_.suite + ":" + std::to_string(options.seed)).substr(0, 16);
}

void SuiteContext::log(const std::string& message) const {
  if (options_.verbose) {
    std::cerr << "[" << report_.suite << " " << std::fixed << std::setprecision(1) << elapsed() << "s] " << message
              << std::endl;
  }
}

double SuiteContext::elapsed() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

void SuiteContext::record(const std::string& name, double value, int64_t count, json details) {
  MetricRecord r;
  r.name = name;
  r.value = value;
  r.count = count;
  r.config_digest = digest_;
  r.seed = options_.seed;
  r.details = std::move(details);
  r.details["suite"] = report_.suite;
  r.validate();
  report_.records.push_back(r);
  log(name + " = " + std::to_string(value));
}

void SuiteContext::criterion(int id, const std::string& name, bool pass, double value, double threshold,
                             const std::string& detail) {
  report_.criteria.push_back({id, name, pass, value, threshold, detail});
  log(report_.criteria.back().line());
}

SuiteReport SuiteContext::finish() {
  report_.seconds = elapsed();
  if (!options_.output_dir.empty()) {
    std::filesystem::create_directories(options_.output_dir);
    {
      std::ofstream out(options_.output_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
      out << records_to_jsonl(report_.records);
    }
    json crit = json::array();
    for (const auto& c : report_.criteria) crit.push_back(c.to_json());
    write_json_file({{"suite", report_.suite}, {"seed", options_.seed}, {"criteria", crit},
                     {"seconds", report_.seconds}},
                    options_.output_dir / "report.json");
  }
  return report_;
}

}  // namespace detail

std::vector<std::string> suite_names() { return {"oracle", "prior2d", "glyphs", "multiview", "ablations"}; }

SuiteReport run_suite(const std::string& name, const SuiteOptions& options) {
  if (name == "oracle") return run_oracle_suite(options);
  if (name == "prior2d") return run_prior2d_suite(options);
  if (name == "glyphs") return run_glyph_suite(options);
  if (name == "multiview") return run_multiview_suite(options);
  if (name == "ablations") return run_ablation_suite(options);
  std::string known;
  for (const auto& s : suite_names()) known += (known.empty() ? "" : ", ") + s;
  throw InvalidArgument("unknown suite '" + name + "' (known suites: " + known + ")");
}

// ---------------------------------------------------------------------------
// Oracle building blocks

ShalaVae make_linear_oracle_model(const LinearGaussianData& data) {
  ModelConfig cfg;
  cfg.latent_dim = data.matrices.front().size(1);
  cfg.encoder.embed_width = 8;
  cfg.encoder.conv_channels = {};
  cfg.encoder.hidden = {};
  cfg.encoder.activation = Activation::identity;
  cfg.fusion.variant = FusionVariant::concat;
  cfg.fusion.fused_width = 8;
  cfg.fusion.layers = 1;
  cfg.fusion.activation = Activation::identity;
  cfg.decoder.conv_channels = {};
  cfg.decoder.hidden = {};
  cfg.decoder.activation = Activation::identity;
  cfg.decoder.obs_scales = data.noise_scales;
  ShalaVae model(data.dataset.infos(), cfg);
  model->to(torch::kDouble);
  torch::NoGradGuard guard;
  for (size_t i = 0; i < data.matrices.size(); ++i) {
    auto& layer = model->decoders()->decoder(static_cast<int64_t>(i))->trunk()->layer(0);
    layer->weight.copy_(data.matrices[i]);
    layer->bias.zero_();
  }
  return model;
}

std::vector<GaussianPosterior> linear_likelihood_experts(const LinearGaussianData& data) {
  std::vector<GaussianPosterior> experts;
  for (size_t i = 0; i < data.matrices.size(); ++i) {
    const auto& a = data.matrices[i];
    const double inv_var = 1.0 / (data.noise_scales[i] * data.noise_scales[i]);
    auto gram = a.t().mm(a) * inv_var;  // precision of the likelihood factor in z
    auto off = gram - torch::diag(gram.diagonal());
    if (off.abs().max().item<double>() > 1e-10) {
      throw InvalidArgument("likelihood experts are diagonal only for the orthogonal design");
    }
    auto prec = gram.diagonal();
    auto x = data.dataset.modality(static_cast<int64_t>(i)).to(torch::kDouble);
    auto mean = x.mm(a) * inv_var / prec.unsqueeze(0);
    experts.push_back({mean, (1.0 / prec).unsqueeze(0).expand_as(mean).clone()});
  }
  return experts;
}

namespace {

double relative_gradient_error(const std::function<torch::Tensor()>& loss_fn,
                               const std::vector<torch::Tensor>& params) {
  for (auto& p : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  auto loss = loss_fn();
  loss.backward();
  constexpr double kStep = 1e-6;
  double worst = 0.0;
  torch::NoGradGuard guard;
  for (const auto& p : params) {
    auto g = p.grad().clone();
    auto fd = torch::zeros_like(p);
    auto flat = p.view({-1});
    auto fd_flat = fd.view({-1});
    for (int64_t k = 0; k < flat.numel(); ++k) {
      const double orig = flat[k].item<double>();
      flat[k] = orig + kStep;
      const double up = loss_fn().item<double>();
      flat[k] = orig - kStep;
      const double down = loss_fn().item<double>();
      flat[k] = orig;
      fd_flat[k] = (up - down) / (2.0 * kStep);
    }
    const double denom = std::max(g.norm().item<double>(), 1e-6);
    worst = std::max(worst, (g - fd).norm().item<double>() / denom);
  }
  return worst;
}

}  // namespace

double elbo_gradient_error(uint64_t seed) {
  torch::manual_seed(seed);
  std::vector<ModalityInfo> infos{{"a", ModalityKind::vector, {3}}, {"b", ModalityKind::vector, {2}}};
  ModelConfig cfg;
  cfg.latent_dim = 2;
  cfg.encoder = {6, {}, {5}, Activation::silu};
  cfg.fusion = {FusionVariant::gated, 5, 2, Activation::silu};
  cfg.decoder.conv_channels = {};
  cfg.decoder.hidden = {4};
  cfg.decoder.obs_scale = 0.7;
  ShalaVae model(infos, cfg);
  model->to(torch::kDouble);
  Rng data_rng(seed + 1);
  Batch batch;
  batch.x = {data_rng.normal({5, 3}, torch::kDouble), data_rng.normal({5, 2}, torch::kDouble)};
  batch.labels = torch::zeros({5}, torch::kLong);
  batch.presence = torch::ones({5, 2}, torch::kBool);
  batch.presence[4][1] = false;
  auto loss = [&]() {
    Rng rng(seed + 2);
    return -model->elbo(batch, rng, 0.7).elbo;
  };
  return relative_gradient_error(loss, model->parameters());
}

double prior_loss_gradient_error(uint64_t seed) {
  torch::manual_seed(seed);
  DenoiserConfig cfg;
  cfg.latent_dim = 3;
  cfg.cond_width = 4;
  cfg.hidden = 6;
  cfg.blocks = 2;
  cfg.time_width = 4;
  Denoiser denoiser(cfg);
  denoiser->to(torch::kDouble);
  {
    // The output layer starts at zero; perturb it so every path carries gradient.
    torch::NoGradGuard guard;
    for (auto& p : denoiser->parameters()) p.add_(0.1 * torch::randn_like(p));
  }
  auto schedule = build_schedule(20, ScheduleKind::linear, false);
  ConditioningPolicy policy;
  policy.drop_probability = 0.3;
  Rng data_rng(seed + 1);
  auto z0 = data_rng.normal({6, 3}, torch::kDouble);
  std::vector<torch::Tensor> conds{data_rng.normal({6, 4}, torch::kDouble), data_rng.normal({6, 4}, torch::kDouble)};
  auto presence = torch::ones({6, 2}, torch::kBool);
  presence[2][0] = false;
  auto loss = [&]() {
    Rng rng(seed + 2);
    return prior_loss(denoiser, z0, conds, presence, policy, schedule, rng);
  };
  return relative_gradient_error(loss, denoiser->parameters());
}

double forward_marginal_max_zscore(const NoiseSchedule& schedule, const std::vector<int64_t>& steps, int64_t chains,
                                   uint64_t seed) {
  Rng rng(seed);
  auto z0_row = torch::tensor({1.5, -0.7}, torch::kDouble);
  double worst = 0.0;
  for (auto t : steps) {
    auto z = z0_row.unsqueeze(0).expand({chains, 2}).clone();
    for (int64_t s = 1; s <= t; ++s) z = forward_step(z, s, schedule, rng);
    const double ab = schedule.alpha_bar(t);
    const double var = 1.0 - ab * ab;
    auto mean = z.mean(0);
    auto sample_var = z.var(0);
    const double n = static_cast<double>(chains);
    auto z_mean = ((mean - ab * z0_row) / std::sqrt(var / n)).abs().max().item<double>();
    auto z_var = ((sample_var - var) / (var * std::sqrt(2.0 / (n - 1.0)))).abs().max().item<double>();
    worst = std::max({worst, z_mean, z_var});
  }
  return worst;
}

double schedule_identity_error(const NoiseSchedule& schedule) {
  double worst = 0.0;
  double running = 1.0;
  for (int64_t t = 0; t <= schedule.steps(); ++t) {
    const double a = schedule.alpha(t), s = schedule.sigma(t), ab = schedule.alpha_bar(t);
    if (t > 0) running *= a;
    const double nl = schedule.noise_level(t);
    worst = std::max({worst, std::abs(a * a + s * s - 1.0), std::abs(ab - running),
                      std::abs(ab * ab + nl * nl - 1.0)});
  }
  return worst;
}

double monotone_violation_rate(const std::vector<std::vector<double>>& sweeps, double tolerance) {
  int64_t total = 0, violated = 0;
  for (const auto& s : sweeps) {
    for (size_t k = 0; k + 1 < s.size(); ++k) {
      ++total;
      if (s[k + 1] > s[k] + tolerance) ++violated;
    }
  }
  if (total == 0) throw InvalidArgument("monotonicity check needs sweeps of length >= 2");
  return static_cast<double>(violated) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Suites

SuiteReport run_oracle_suite(const SuiteOptions& options) {
  detail::SuiteContext ctx("oracle", options);
  const uint64_t seed = options.seed;

  // Criterion 1: learned posterior against the conjugate posterior.
  LinearGaussianSpec spec;
  spec.latent_dim = 2;
  spec.observation_dims = {4, 4};
  spec.noise_scales = {0.5, 0.5};
  spec.n_samples = 5000;
  spec.design = LinearDesign::orthogonal;
  spec.seed = mix_seed(seed, 1);
  auto data = make_linear_gaussian_dataset(spec);
  const int64_t n_hold = 1000;
  auto [train_idx, hold_idx] = holdout_split(data.dataset.size(), n_hold);
  auto train = data.dataset.subset(train_idx);
  auto hold = data.dataset.subset(hold_idx);

  auto experts = linear_likelihood_experts(data);
  auto poe = poe_posterior(experts, true);
  const double poe_mean_err = (poe.mean - data.posterior.mean).abs().max().item<double>();
  const double poe_var_err = (poe.variance - data.posterior.covariance.diagonal().unsqueeze(0)).abs().max().item<double>();
  const double poe_err = std::max(poe_mean_err, poe_var_err);
  ctx.record("oracle.poe_max_abs_error", poe_err, data.dataset.size());

  torch::manual_seed(mix_seed(seed, 2));
  auto model = make_linear_oracle_model(data);
  Stage1Config s1;
  s1.iterations = 3000;
  s1.batch_size = 256;
  s1.lr_phi = 3e-3;
  s1.log_every = 100;
  s1.freeze_decoders = true;
  s1.seed = mix_seed(seed, 3);
  auto train_report = train_stage1(model, train, s1);
  ctx.record("oracle.final_elbo", -train_report.curve.back().loss, s1.iterations);

  auto q = infer_dataset(model, hold);
  auto analytic = linear_gaussian_posterior(data.matrices, data.noise_scales, hold.data().x);
  const double kl = oracle_posterior_kl(q, analytic.mean, analytic.covariance);
  ctx.record("oracle.posterior_kl", kl, n_hold, {{"estimator", "closed-form Gaussian KL, held-out mean"}});
  const double oracle_seconds = ctx.elapsed();

  std::ostringstream d1;
  d1 << "KL " << kl << " < 0.05 nats; PoE error " << poe_err << " <= 1e-6; runtime " << std::setprecision(3)
     << oracle_seconds << "s < 300s";
  ctx.criterion(1, "oracle posterior", kl < 0.05 && poe_err <= 1e-6 && oracle_seconds < 300.0, kl, 0.05, d1.str());

  // Criterion 2: schedule algebra and the forward marginal.
  auto schedule = build_schedule(250, ScheduleKind::linear);
  auto cosine = build_schedule(250, ScheduleKind::cosine);
  const double ident = std::max(schedule_identity_error(schedule), schedule_identity_error(cosine));
  ctx.record("diffusion.identity_max_error", ident, schedule.steps());
  const double zscore = forward_marginal_max_zscore(schedule, {1, 10, 100, 250}, 100000, mix_seed(seed, 4));
  ctx.record("diffusion.forward_marginal_max_z", zscore, 100000);
  const double terminal = schedule.alpha_bar(schedule.steps());
  ctx.record("diffusion.terminal_alpha_bar", terminal, 1);
  std::ostringstream d2;
  d2 << "identity error " << ident << " <= 1e-12; max z " << zscore << " <= 3; alpha_bar_T " << terminal
     << " <= 1e-2";
  ctx.criterion(2, "diffusion algebra", ident <= 1e-12 && zscore <= 3.0 && terminal <= 1e-2, zscore, 3.0, d2.str());

  // Criterion 4: gradients against central differences in double precision.
  const double g_elbo = elbo_gradient_error(mix_seed(seed, 5));
  const double g_prior = prior_loss_gradient_error(mix_seed(seed, 6));
  ctx.record("gradient.elbo_relative_error", g_elbo, 1);
  ctx.record("gradient.prior_loss_relative_error", g_prior, 1);
  const double g = std::max(g_elbo, g_prior);
  std::ostringstream d4;
  d4 << "ELBO " << g_elbo << ", prior loss " << g_prior << " <= 1e-4";
  ctx.criterion(4, "gradient correctness", g <= 1e-4, g, 1e-4, d4.str());
  return ctx.finish();
}

SuiteReport run_prior2d_suite(const SuiteOptions& options) {
  detail::SuiteContext ctx("prior2d", options);
  const uint64_t seed = options.seed;
  RingMixtureSpec ring;
  Rng data_rng(mix_seed(seed, 1));
  auto train = sample_ring_mixture(ring, 20000, data_rng);

  LatentTrainingSet set;
  set.mean = train;
  set.variance = torch::zeros_like(train);
  set.presence = torch::ones({train.size(0), 0}, torch::kBool);

  Stage2Config cfg;
  cfg.iterations = 6000;
  cfg.batch_size = 256;
  cfg.lr_beta = 2e-3;
  cfg.steps = 250;
  cfg.denoiser.latent_dim = 2;
  cfg.denoiser.cond_width = 0;
  cfg.denoiser.hidden = 128;
  cfg.denoiser.blocks = 3;
  cfg.denoiser.time_width = 32;
  cfg.policy.drop_probability = 0.0;
  cfg.seed = mix_seed(seed, 2);
  torch::manual_seed(mix_seed(seed, 3));
  LatentPrior prior(build_schedule(cfg.steps, cfg.schedule), cfg.denoiser, cfg.policy);
  prior->to(torch::kDouble);
  auto report = train_prior(prior, set, cfg);
  ctx.record("prior2d.final_loss", report.curve.back().loss, cfg.iterations);

  const int64_t n_eval = 2000;
  Rng sample_rng(mix_seed(seed, 4));
  auto generated = sample_prior(prior->denoiser(), prior->schedule(), n_eval, {}, 1.0, sample_rng);
  Rng ref_rng(mix_seed(seed, 5));
  auto target = sample_ring_mixture(ring, n_eval, ref_rng);
  auto gaussian = ref_rng.normal({n_eval, 2}, torch::kDouble);

  const double ed = energy_distance(generated.z0, target);
  const double ed_base = energy_distance(gaussian, target);
  ctx.record("prior2d.energy_distance", ed, n_eval, {{"estimator", "U-statistic"}});
  ctx.record("prior2d.energy_distance_gaussian", ed_base, n_eval, {{"estimator", "U-statistic"}});
  const double fd = frechet_distance(generated.z0, target);
  const double fd_base = frechet_distance(gaussian, target);
  ctx.record("prior2d.frechet", fd, n_eval);
  ctx.record("prior2d.frechet_gaussian", fd_base, n_eval);
  auto dist = ring_mixture_nearest_distance(ring, generated.z0.slice(0, 0, 1000));
  const double inside = dist.le(3.0).to(torch::kDouble).mean().item<double>();
  ctx.record("prior2d.fraction_within_3sigma", inside, 1000);
  ctx.record("prior2d.nfe", static_cast<double>(generated.nfe), 1);

  std::ostringstream d;
  d << "energy " << ed << " < 0.05 and < 0.25 x N(0,I) baseline " << ed_base << "; runtime " << std::setprecision(3)
    << ctx.elapsed() << "s";
  ctx.criterion(3, "prior-hole closure", ed < 0.05 && ed < 0.25 * ed_base && ctx.elapsed() < 600.0, ed, 0.05,
                d.str());
  return ctx.finish();
}

}  // namespace shala
