#include <doctest.h>

#include <cmath>

#include "shala/checkpoint.hpp"
#include "shala/datagen.hpp"
#include "shala/diffusion.hpp"
#include "shala/suites.hpp"
#include "test_support.hpp"

using namespace shala;
using shala::testing::glyph_spec;
using shala::testing::max_abs_diff;
using shala::testing::tiny_model;

namespace {

DenoiserConfig small_denoiser(int64_t d = 4, int64_t cond = 6) {
  DenoiserConfig c;
  c.latent_dim = d;
  c.cond_width = cond;
  c.hidden = 32;
  c.blocks = 2;
  c.time_width = 16;
  return c;
}

/// The output layer starts at zero; give it weights so predictions depend on inputs.
Denoiser randomized_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
  torch::manual_seed(seed);
  Denoiser net(cfg);
  torch::NoGradGuard guard;
  for (auto& p : net->named_parameters()) {
    if (p.key().rfind("output.", 0) == 0 || p.key() == "null_token") p.value().normal_(0.0, 0.3);
  }
  net->to(torch::kDouble);
  return net;
}

}  // namespace

TEST_CASE("two constant half-variance steps") {
  const double s = std::sqrt(0.5);
  auto sched = NoiseSchedule::from_sigmas({s, s});
  CHECK(sched.steps() == 2);
  CHECK(sched.alpha_bar(2) * sched.alpha_bar(2) == doctest::Approx(0.25).epsilon(1e-14));
  const double marginal_var = 1.0 - sched.alpha_bar(2) * sched.alpha_bar(2);
  CHECK(marginal_var == doctest::Approx(0.75).epsilon(1e-14));
  // Composition of the two kernels: 0.5 * 0.5 + 0.5.
  CHECK(marginal_var == doctest::Approx(0.5 * 0.5 + 0.5).epsilon(1e-14));
}

TEST_CASE("single-step schedule") {
  auto sched = build_schedule(1, ScheduleKind::linear, false);
  CHECK(sched.steps() == 1);
  CHECK(sched.alpha_bar(1) == sched.alpha(1));
  CHECK(sched.alpha_bar(0) == 1.0);
}

TEST_CASE("default linear schedule reaches the terminal level") {
  auto sched = build_schedule(250, ScheduleKind::linear);
  // Oracle: squared noise levels spaced evenly on [4e-4, 8e-2], product of sqrt(1 - beta).
  double prod = 1.0;
  for (int t = 0; t < 250; ++t) prod *= std::sqrt(1.0 - (4e-4 + (8e-2 - 4e-4) * t / 249.0));
  CHECK(std::abs(sched.alpha_bar(250) - prod) < 1e-12);
  CHECK(prod == doctest::Approx(0.0057).epsilon(0.01));
  CHECK(sched.alpha_bar(250) <= NoiseSchedule::kTerminalAlphaBarMax);
}

TEST_CASE("schedules too short to reach the terminal level are refused") {
  CHECK_THROWS_AS(NoiseSchedule::from_sigmas({0.1, 0.1}, ScheduleKind::constant, true), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(0, ScheduleKind::linear), InvalidArgument);
  CHECK_THROWS_AS(NoiseSchedule::from_sigmas({0.5, 0.2}), InvalidArgument);
}

TEST_CASE("schedule identities hold to 1e-12 at every step") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int64_t T : {50, 250, 1000}) {
      auto sched = build_schedule(T, kind);
      CHECK(schedule_identity_error(sched) < 1e-12);
      for (int64_t t = 1; t <= T; ++t) {
        CHECK(sched.sigma(t) >= sched.sigma(t - 1));
        const double a = sched.alpha_bar(t);
        CHECK(std::abs(a * a + sched.noise_level(t) * sched.noise_level(t) - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("schedules round-trip through JSON") {
  auto sched = build_schedule(100, ScheduleKind::cosine);
  auto back = NoiseSchedule::from_json(sched.to_json());
  CHECK(back.steps() == 100);
  for (int64_t t = 0; t <= 100; ++t) CHECK(back.sigma(t) == sched.sigma(t));
}

TEST_CASE("terminal forward marginal is standard normal") {
  auto sched = build_schedule(250, ScheduleKind::linear);
  Rng rng(1);
  RingMixtureSpec ring;
  auto z0 = sample_ring_mixture(ring, 100000, rng).to(torch::kDouble);
  auto zt = forward_marginal(z0, 250, sched, rng);
  auto mean = zt.mean(0);
  auto var = zt.var(0);
  for (int64_t j = 0; j < 2; ++j) {
    CHECK(std::abs(mean[j].item<double>()) < 0.01);
    CHECK(std::abs(var[j].item<double>() - 1.0) < 0.01);
  }
}

TEST_CASE("closed-form marginal agrees with composed kernels") {
  auto sched = build_schedule(250, ScheduleKind::linear);
  CHECK(forward_marginal_max_zscore(sched, {1, 10, 60, 125, 250}, 100000, 2) < 3.0);
}

TEST_CASE("noise-free step returns the clean state") {
  auto sched = build_schedule(10, ScheduleKind::linear, false);
  Rng rng(3);
  auto z0 = torch::randn({4, 3}, torch::kDouble);
  CHECK(torch::equal(forward_marginal(z0, 0, sched, rng), z0));
  CHECK_THROWS_AS(forward_marginal(z0, 11, sched, rng), InvalidArgument);
}

TEST_CASE("closed-form marginal uses the stated coefficients") {
  auto sched = build_schedule(100, ScheduleKind::linear);
  auto z0 = torch::randn({3, 2}, torch::kDouble);
  auto eps = torch::randn({3, 2}, torch::kDouble);
  auto zt = forward_marginal_with_noise(z0, 40, sched, eps);
  auto expect = sched.alpha_bar(40) * z0 + std::sqrt(1 - std::pow(sched.alpha_bar(40), 2)) * eps;
  CHECK(max_abs_diff(zt, expect) < 1e-14);
}

TEST_CASE("an untrained denoiser has loss equal to the latent dimension") {
  const int64_t d = 4, b = 20000;
  torch::manual_seed(4);
  Denoiser net(small_denoiser(d));
  net->to(torch::kDouble);
  auto sched = build_schedule(250, ScheduleKind::linear);
  Rng rng(5);
  auto z0 = rng.normal({b, d}, torch::kDouble);
  std::vector<torch::Tensor> conds{rng.normal({b, 6}, torch::kDouble), rng.normal({b, 6}, torch::kDouble)};
  auto presence = torch::ones({b, 2}, torch::kBool);
  auto loss = prior_loss(net, z0, conds, presence, ConditioningPolicy{}, sched, rng).item<double>();
  // Zero-initialized output: loss is the mean squared norm of standard normal noise.
  const double se = std::sqrt(2.0 * d / b);
  CHECK(std::abs(loss - d) < 3.0 * se);
}

TEST_CASE("null-token frequency follows the drop probability") {
  torch::manual_seed(6);
  Denoiser net(small_denoiser());
  auto sched = build_schedule(50, ScheduleKind::linear);
  const int64_t b = 10000;
  for (double p : {0.1, 0.5, 0.95}) {
    Rng rng(7);
    std::vector<torch::Tensor> conds{torch::randn({b, 6}), torch::randn({b, 6}), torch::randn({b, 6})};
    auto presence = torch::rand({b, 3}).gt(0.3);
    presence.index_put_({torch::indexing::Slice(), 1}, true);
    ConditioningPolicy policy;
    policy.drop_probability = p;
    PriorLossStats stats;
    prior_loss(net, torch::randn({b, 4}), conds, presence, policy, sched, rng, &stats);
    CHECK(stats.rows == b);
    const double freq = static_cast<double>(stats.null_rows) / b;
    CHECK(std::abs(freq - p) < 3.0 * std::sqrt(p * (1 - p) / b));
    auto pres = presence.accessor<bool, 2>();
    for (int64_t r = 0; r < b; ++r) {
      const auto c = stats.chosen[static_cast<size_t>(r)];
      if (c >= 0) CHECK(pres[r][c]);
    }
  }
}

TEST_CASE("condition draws are uniform over present modalities") {
  torch::manual_seed(8);
  Denoiser net(small_denoiser());
  auto sched = build_schedule(50, ScheduleKind::linear);
  const int64_t b = 12000;
  Rng rng(9);
  std::vector<torch::Tensor> conds{torch::randn({b, 6}), torch::randn({b, 6}), torch::randn({b, 6})};
  ConditioningPolicy policy;
  policy.drop_probability = 0.0;
  PriorLossStats stats;
  prior_loss(net, torch::randn({b, 4}), conds, torch::ones({b, 3}, torch::kBool), policy, sched, rng, &stats);
  std::vector<int64_t> counts(3, 0);
  for (auto c : stats.chosen) ++counts.at(static_cast<size_t>(c));
  for (auto c : counts) CHECK(std::abs(c / double(b) - 1.0 / 3) < 3.0 * std::sqrt((1.0 / 3) * (2.0 / 3) / b));
}

TEST_CASE("drop probability must stay below one") {
  ConditioningPolicy policy;
  policy.drop_probability = 1.0;
  CHECK_THROWS_AS(policy.validate(), InvalidArgument);
  policy.drop_probability = -0.1;
  CHECK_THROWS_AS(policy.validate(), InvalidArgument);
}

TEST_CASE("prior loss gradients match central differences") {
  for (uint64_t seed : {0u, 1u, 2u}) CHECK(prior_loss_gradient_error(seed) < 1e-4);
}

TEST_CASE("guidance endpoints return the branches untouched") {
  auto u = torch::randn({5, 3}, torch::kDouble);
  auto c = torch::randn({5, 3}, torch::kDouble);
  CHECK(torch::equal(guided_epsilon(u, c, 0.0), u));
  CHECK(torch::equal(guided_epsilon(u, c, 1.0), c));

  auto net = randomized_denoiser(small_denoiser(), 10);
  torch::NoGradGuard guard;
  auto z = torch::randn({5, 4}, torch::kDouble);
  auto cond = torch::randn({5, 6}, torch::kDouble);
  auto steps = torch::full({5}, 7, torch::kLong);
  CHECK(torch::equal(predict_noise(net, z, 7, cond, 0.0), net->forward(z, steps)));
  CHECK(torch::equal(predict_noise(net, z, 7, cond, 1.0), net->forward(z, steps, cond)));
}

TEST_CASE("guided prediction is affine in the guidance scale") {
  auto net = randomized_denoiser(small_denoiser(), 11);
  torch::NoGradGuard guard;
  auto z = torch::randn({6, 4}, torch::kDouble);
  auto cond = torch::randn({6, 6}, torch::kDouble);
  auto e1 = predict_noise(net, z, 30, cond, 0.5);
  auto e2 = predict_noise(net, z, 30, cond, 2.0);
  auto e3 = predict_noise(net, z, 30, cond, 3.5);
  CHECK(max_abs_diff(e2 - e1, (e3 - e1) * 0.5) < 1e-10);
  CHECK(max_abs_diff(e2 - e1, torch::zeros_like(e1)) > 1e-6);
}

TEST_CASE("null rows ignore the condition") {
  auto net = randomized_denoiser(small_denoiser(), 12);
  torch::NoGradGuard guard;
  auto z = torch::randn({4, 4}, torch::kDouble);
  auto steps = torch::full({4}, 3, torch::kLong);
  auto all_null = torch::ones({4}, torch::kBool);
  auto a = net->forward(z, steps, torch::randn({4, 6}, torch::kDouble), all_null);
  auto b = net->forward(z, steps, torch::randn({4, 6}, torch::kDouble), all_null);
  CHECK(torch::equal(a, b));
  CHECK(torch::equal(a, net->forward(z, steps)));
  auto c = net->forward(z, steps, torch::randn({4, 6}, torch::kDouble));
  CHECK(max_abs_diff(a, c) > 1e-6);
}

TEST_CASE("denoiser rejects malformed inputs") {
  auto net = randomized_denoiser(small_denoiser(), 13);
  auto steps = torch::full({2}, 1, torch::kLong);
  CHECK_THROWS_AS(net->forward(torch::randn({2, 3}, torch::kDouble), steps), ShapeMismatch);
  CHECK_THROWS_AS(net->forward(torch::randn({2, 4}, torch::kDouble), steps, torch::randn({2, 5}, torch::kDouble)),
                  ShapeMismatch);
  CHECK_THROWS_AS(GuidanceConfig{std::nan("")}.validate(), InvalidArgument);
}

TEST_CASE("the last reverse step adds no noise") {
  auto net = randomized_denoiser(small_denoiser(), 14);
  auto sched = build_schedule(250, ScheduleKind::linear);
  auto z = torch::randn({3, 4}, torch::kDouble);
  Rng a(1), b(2);
  CHECK(torch::equal(denoise_step(net, z, 0, {}, 0.0, sched, a), denoise_step(net, z, 0, {}, 0.0, sched, b)));
  Rng c(1), e(2);
  CHECK_FALSE(torch::equal(denoise_step(net, z, 5, {}, 0.0, sched, c), denoise_step(net, z, 5, {}, 0.0, sched, e)));
  CHECK_THROWS_AS(denoise_step(net, z, 250, {}, 0.0, sched, c), InvalidArgument);
}

TEST_CASE("non-finite states abort sampling") {
  auto net = randomized_denoiser(small_denoiser(), 15);
  auto sched = build_schedule(20, ScheduleKind::linear, false);
  auto z = torch::full({2, 4}, std::numeric_limits<double>::infinity(), torch::kDouble);
  Rng rng(3);
  CHECK_THROWS_AS(denoise_step(net, z, 3, {}, 0.0, sched, rng), NumericalError);
}

TEST_CASE("a full reverse pass costs one evaluation per step") {
  auto net = randomized_denoiser(small_denoiser(), 16);
  auto sched = build_schedule(250, ScheduleKind::linear);
  Rng rng(4);
  auto out = sample_prior(net, sched, 8, torch::randn({8, 6}, torch::kDouble), 2.0, rng);
  CHECK(out.nfe == 250);
  Rng r2(4);
  auto partial = sample_prior(net, sched, 8, {}, 0.0, r2, 60, torch::randn({8, 4}, torch::kDouble));
  CHECK(partial.nfe == 60);
}

TEST_CASE("sampling is reproducible under a seed") {
  auto net = randomized_denoiser(small_denoiser(), 17);
  auto sched = build_schedule(100, ScheduleKind::linear);
  Rng a(5), b(5);
  CHECK(torch::equal(sample_prior(net, sched, 6, {}, 0.0, a).z0, sample_prior(net, sched, 6, {}, 0.0, b).z0));
}

TEST_CASE("stage-2 training leaves stage-1 parameters bit-identical") {
  auto d = make_glyph_dataset(glyph_spec(2, 64, 1));
  torch::manual_seed(18);
  ShalaVae stage1(d.infos(), tiny_model());
  const auto before = module_digest(*stage1);
  Stage2Config cfg;
  cfg.iterations = 30;
  cfg.batch_size = 32;
  cfg.steps = 50;
  cfg.denoiser = small_denoiser(4, 8);
  cfg.log_every = 10;
  torch::manual_seed(19);
  LatentPrior prior(build_schedule(cfg.steps, cfg.schedule), cfg.denoiser, cfg.policy, d.infos());
  const auto prior_before = module_digest(*prior);
  auto report = train_stage2(prior, stage1, d, cfg);
  CHECK(report.status == TrainStatus::completed);
  CHECK(module_digest(*stage1) == before);
  CHECK(module_digest(*prior) != prior_before);
  CHECK_FALSE(report.curve.empty());
}

TEST_CASE("zero stage-2 iterations leave the denoiser unchanged") {
  auto d = make_glyph_dataset(glyph_spec(2, 16, 1));
  torch::manual_seed(20);
  ShalaVae stage1(d.infos(), tiny_model());
  Stage2Config cfg;
  cfg.iterations = 0;
  cfg.steps = 50;
  cfg.denoiser = small_denoiser(4, 8);
  torch::manual_seed(21);
  LatentPrior prior(build_schedule(cfg.steps, cfg.schedule), cfg.denoiser, cfg.policy, d.infos());
  const auto before = module_digest(*prior);
  train_stage2(prior, stage1, d, cfg);
  CHECK(module_digest(*prior) == before);
}

TEST_CASE("raw conditioning registers its own encoders") {
  auto d = make_glyph_dataset(glyph_spec(2, 8, 1));
  ConditioningPolicy raw;
  raw.source = ConditionSource::raw;
  LatentPrior with_raw(build_schedule(50, ScheduleKind::linear), small_denoiser(4, 8), raw, d.infos());
  LatentPrior with_emb(build_schedule(50, ScheduleKind::linear), small_denoiser(4, 8), ConditioningPolicy{},
                       d.infos());
  CHECK(with_raw->has_raw_encoder());
  CHECK_FALSE(with_emb->has_raw_encoder());
  auto h = with_raw->raw_encoder()->encode(d.data());
  CHECK(h.size() == 2);
  CHECK(h[0].sizes().vec() == std::vector<int64_t>{8, 8});
}

TEST_CASE("stage-2 configs validate and round-trip") {
  Stage2Config cfg;
  cfg.iterations = 12;
  cfg.policy.source = ConditionSource::raw;
  CHECK(Stage2Config::from_json(cfg.to_json()).to_json() == cfg.to_json());
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}
