#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

#include "shala/checkpoint.hpp"
#include "shala/datagen.hpp"
#include "shala/eval.hpp"
#include "shala/generator.hpp"
#include "shala/suites.hpp"
#include "test_support.hpp"

using namespace shala;
using shala::testing::glyph_spec;
using shala::testing::max_abs_diff;
using shala::testing::tiny_model;

namespace {

LinearGaussianData small_linear(uint64_t seed, int64_t n = 64) {
  LinearGaussianSpec spec;
  spec.latent_dim = 2;
  spec.observation_dims = {4, 3};
  spec.noise_scales = {0.5, 0.8};
  spec.n_samples = n;
  spec.design = LinearDesign::orthogonal;
  spec.seed = seed;
  return make_linear_gaussian_dataset(spec);
}

/// E_q[f(z)] for quadratic f and diagonal q, exactly, from 2d symmetric points.
std::pair<torch::Tensor, double> sigma_points(const torch::Tensor& mean, const torch::Tensor& var) {
  const int64_t d = mean.size(0);
  auto pts = mean.unsqueeze(0).repeat({2 * d, 1});
  for (int64_t j = 0; j < d; ++j) {
    const double step = std::sqrt(static_cast<double>(d) * var[j].item<double>());
    pts[2 * j][j] += step;
    pts[2 * j + 1][j] -= step;
  }
  return {pts, 1.0 / static_cast<double>(2 * d)};
}

Eigen::MatrixXd eig(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  Eigen::MatrixXd m(c.size(0), c.size(1));
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = c[i][j].item<double>();
  }
  return m;
}

}  // namespace

TEST_CASE("decoding is deterministic and matches modality shapes") {
  auto d = make_glyph_dataset(glyph_spec(3, 4, 0));
  torch::manual_seed(0);
  ShalaVae model(d.infos(), tiny_model());
  torch::NoGradGuard guard;
  auto z = torch::randn({5, 4});
  auto a = model->decode(z);
  auto b = model->decode(z);
  REQUIRE(a.size() == 3);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(torch::equal(a[i], b[i]));
    CHECK(a[i].sizes().vec() == std::vector<int64_t>{5, 16, 16, 3});
    CHECK(a[i].min().item<double>() >= 0.0);
    CHECK(a[i].max().item<double>() <= 1.0);
  }
  CHECK_THROWS_AS(model->decode(torch::randn({5, 3})), ShapeMismatch);
}

TEST_CASE("perfect reconstruction attains the gaussian constant") {
  auto d = make_glyph_dataset(glyph_spec(1, 2, 0));
  torch::manual_seed(1);
  ShalaVae model(d.infos(), tiny_model());
  model->to(torch::kDouble);
  torch::NoGradGuard guard;
  auto z = torch::randn({3, 4}, torch::kDouble);
  auto& dec = model->decoders()->decoder(0);
  auto x = dec->forward(z);
  auto ll = dec->log_likelihood(x, z);
  const double c = gaussian_log_constant(16 * 16 * 3, dec->obs_scale());
  CHECK(max_abs_diff(ll, torch::full({3}, c, torch::kDouble)) < 1e-9);
  auto worse = dec->log_likelihood(x + 0.01, z);
  CHECK(worse.lt(ll).all().item<bool>());
}

TEST_CASE("uniform categorical decoder scores log one over C") {
  std::vector<ModalityInfo> infos{{"label", ModalityKind::categorical, {5}}};
  ModelConfig cfg = tiny_model();
  torch::manual_seed(2);
  ShalaVae model(infos, cfg);
  auto& dec = model->decoders()->decoder(0);
  CHECK(dec->likelihood() == Likelihood::categorical);
  torch::NoGradGuard guard;
  auto& last = dec->trunk()->layer(dec->trunk()->depth() - 1);
  last->weight.zero_();
  last->bias.zero_();
  auto x = torch::nn::functional::one_hot(torch::tensor({0, 3, 4}), 5).to(torch::kFloat);
  auto ll = dec->log_likelihood(x, torch::randn({3, 4}));
  CHECK(max_abs_diff(ll, torch::full({3}, std::log(1.0 / 5.0))) < 1e-6);
}

TEST_CASE("per-modality log-likelihoods sum to the joint log-likelihood") {
  auto d = make_glyph_dataset(glyph_spec(3, 6, 4));
  auto cfg = tiny_model();
  cfg.decoder.obs_scales = {0.1, 0.2, 0.35};
  torch::manual_seed(3);
  ShalaVae model(d.infos(), cfg);
  model->to(torch::kDouble);
  torch::NoGradGuard guard;
  auto batch = d.data().to(torch::kDouble);
  auto z = torch::randn({6, 4}, torch::kDouble);
  auto parts = model->decoders()->log_likelihood(batch, z);
  auto summed = parts[0] + parts[1] + parts[2];

  // One flat Gaussian over all pixels of all modalities with a per-pixel scale.
  std::vector<torch::Tensor> xs, means, scales;
  for (int64_t i = 0; i < 3; ++i) {
    xs.push_back(batch.x[i].flatten(1));
    means.push_back(model->decoders()->decoder(i)->forward(z).flatten(1));
    scales.push_back(torch::full({xs.back().size(1)}, cfg.decoder.obs_scales[i], torch::kDouble));
  }
  auto x = torch::cat(xs, 1);
  auto mu = torch::cat(means, 1);
  auto s = torch::cat(scales, 0);
  auto joint = (-(x - mu).pow(2) / (2 * s * s) - 0.5 * torch::log(2 * std::numbers::pi * s * s)).sum(1);
  CHECK(max_abs_diff(summed, joint) < 1e-10 * joint.abs().max().item<double>());
}

TEST_CASE("absent modalities contribute nothing to the likelihood") {
  auto d = make_glyph_dataset(glyph_spec(2, 3, 5));
  torch::manual_seed(4);
  ShalaVae model(d.infos(), tiny_model());
  torch::NoGradGuard guard;
  auto batch = d.data();
  batch.presence = batch.presence.clone();
  batch.presence.index_put_({torch::indexing::Slice(), 1}, false);
  auto parts = model->decoders()->log_likelihood(batch, torch::randn({3, 4}));
  CHECK(parts[1].abs().max().item<double>() == 0.0);
  CHECK(parts[0].abs().max().item<double>() > 0.0);
}

TEST_CASE("ELBO gradients match central differences") {
  for (uint64_t seed : {0u, 1u, 2u}) CHECK(elbo_gradient_error(seed) < 1e-4);
}

TEST_CASE("ELBO bounds the exact log evidence and the gap is the posterior KL") {
  auto data = small_linear(5, 8);
  auto model = make_linear_oracle_model(data);
  torch::NoGradGuard guard;
  const int64_t d = 2;

  Eigen::MatrixXd a(7, d);
  a.topRows(4) = eig(data.matrices[0]);
  a.bottomRows(3) = eig(data.matrices[1]);
  Eigen::VectorXd noise(7);
  noise << Eigen::VectorXd::Constant(4, 0.25), Eigen::VectorXd::Constant(3, 0.64);
  Eigen::MatrixXd marginal = a * a.transpose();
  marginal.diagonal() += noise;
  Eigen::LLT<Eigen::MatrixXd> llt(marginal);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  Eigen::MatrixXd post_prec = Eigen::MatrixXd::Identity(d, d) + a.transpose() * noise.cwiseInverse().asDiagonal() * a;
  Eigen::MatrixXd post_cov = post_prec.inverse();

  Rng rng(6);
  for (int64_t n = 0; n < 8; ++n) {
    Eigen::VectorXd x(7);
    x << eig(data.dataset.modality(0)[n].unsqueeze(0)).row(0).transpose(),
        eig(data.dataset.modality(1)[n].unsqueeze(0)).row(0).transpose();
    const double log_evidence =
        -0.5 * (x.dot(llt.solve(x)) + logdet + 7.0 * std::log(2.0 * std::numbers::pi));

    // An arbitrary diagonal q.
    auto qm = rng.normal({d}, torch::kDouble);
    auto qv = rng.uniform({d}, torch::kDouble) + 0.05;
    auto [pts, w] = sigma_points(qm, qv);
    auto rows = torch::full({2 * d}, n, torch::kLong);
    auto batch = data.dataset.batch(rows);
    auto ll = model->decoders()->log_likelihood(batch, pts);
    const double expected_ll = ((ll[0] + ll[1]).sum() * w).item<double>();
    const double elbo = expected_ll - kl_to_standard_normal({qm, qv}).item<double>();
    CHECK(elbo <= log_evidence + 1e-6);

    Eigen::VectorXd pm = post_cov * a.transpose() * noise.cwiseInverse().asDiagonal() * x;
    Eigen::VectorXd m = eig(qm.unsqueeze(0)).row(0).transpose();
    Eigen::VectorXd v = eig(qv.unsqueeze(0)).row(0).transpose();
    const double kl = 0.5 * ((post_prec * v.asDiagonal()).trace() + (pm - m).dot(post_prec * (pm - m)) -
                             static_cast<double>(d) + std::log(post_cov.determinant()) - v.array().log().sum());
    CHECK(std::abs((log_evidence - elbo) - kl) < 1e-6);
  }
}

TEST_CASE("decoders factorize over modalities") {
  auto d = make_glyph_dataset(glyph_spec(3, 2, 0));
  torch::manual_seed(5);
  ShalaVae model(d.infos(), tiny_model());
  torch::NoGradGuard guard;
  auto z = torch::randn({4, 4});
  auto base = model->decode(z);
  auto moved = model->decode(z + 0.5);
  for (int64_t i = 0; i < 3; ++i) CHECK(max_abs_diff(base[i], moved[i]) > 1e-4);

  for (auto& p : model->decoders()->decoder(1)->parameters()) p.add_(0.05);
  auto perturbed = model->decode(z);
  CHECK(torch::equal(perturbed[0], base[0]));
  CHECK(max_abs_diff(perturbed[1], base[1]) > 1e-4);
  CHECK(torch::equal(perturbed[2], base[2]));
}

TEST_CASE("zero iterations leave the model unchanged") {
  auto d = make_glyph_dataset(glyph_spec(2, 16, 0));
  torch::manual_seed(6);
  ShalaVae model(d.infos(), tiny_model());
  const auto before = module_digest(*model);
  Stage1Config cfg;
  cfg.iterations = 0;
  auto report = train_stage1(model, d, cfg);
  CHECK(report.status == TrainStatus::completed);
  CHECK(report.iterations_run == 0);
  CHECK(module_digest(*model) == before);
}

TEST_CASE("a non-finite loss aborts and restores the last finite state") {
  auto data = small_linear(7, 32);
  auto x0 = data.dataset.modality(0).clone();
  x0[3][0] = std::numeric_limits<double>::quiet_NaN();
  auto batch = data.dataset.data();
  batch.x[0] = x0;
  Dataset poisoned(data.dataset.infos(), batch);
  auto model = make_linear_oracle_model(data);
  const auto before = module_digest(*model);
  Stage1Config cfg;
  cfg.iterations = 50;
  cfg.batch_size = 32;
  auto report = train_stage1(model, poisoned, cfg);
  CHECK(report.status == TrainStatus::diverged);
  CHECK_FALSE(report.diagnostics.empty());
  CHECK(module_digest(*model) == before);
}

TEST_CASE("stage-1 training on linear-Gaussian data recovers the conjugate posterior") {
  LinearGaussianSpec spec;
  spec.latent_dim = 2;
  spec.observation_dims = {4, 4};
  spec.noise_scales = {0.5, 0.5};
  spec.n_samples = 3000;
  spec.design = LinearDesign::orthogonal;
  spec.seed = 17;
  auto data = make_linear_gaussian_dataset(spec);
  auto [train_idx, hold_idx] = holdout_split(data.dataset.size(), 500);
  auto train = data.dataset.subset(train_idx);
  auto hold = data.dataset.subset(hold_idx);
  torch::manual_seed(18);
  auto model = make_linear_oracle_model(data);
  Stage1Config cfg;
  cfg.iterations = 2000;
  cfg.batch_size = 256;
  cfg.lr_phi = 3e-3;
  cfg.log_every = 50;
  cfg.freeze_decoders = true;
  cfg.seed = 19;
  auto report = train_stage1(model, train, cfg);
  REQUIRE(report.status == TrainStatus::completed);

  auto q = infer_dataset(model, hold);
  auto analytic = linear_gaussian_posterior(data.matrices, data.noise_scales, hold.data().x);
  CHECK(oracle_posterior_kl(q, analytic.mean, analytic.covariance) < 0.05);
  for (int64_t j = 0; j < 2; ++j) {
    auto stacked = torch::stack({q.mean.select(1, j), analytic.mean.select(1, j)});
    CHECK(torch::corrcoef(stacked)[0][1].item<double>() > 0.99);
  }

  // Trailing window: the last fifth of the curve does not sit above the fifth before it.
  const auto& curve = report.curve;
  const size_t w = curve.size() / 5;
  double late = 0.0, early = 0.0;
  for (size_t i = 0; i < w; ++i) {
    late += curve[curve.size() - 1 - i].loss;
    early += curve[curve.size() - 1 - w - i].loss;
  }
  CHECK(late <= early + 0.02 * std::abs(early));
}

TEST_CASE("stage-1 training shrinks reconstruction error tenfold") {
  auto d = make_glyph_dataset(glyph_spec(2, 1500, 8));
  auto [train_idx, hold_idx] = holdout_split(d.size(), 200);
  auto train = d.subset(train_idx);
  auto hold = d.subset(hold_idx);
  auto cfg = tiny_model(16);
  cfg.encoder.conv_channels = {16, 32};
  cfg.encoder.hidden = {128};
  cfg.encoder.embed_width = 64;
  cfg.fusion.fused_width = 128;
  cfg.decoder.conv_channels = {32, 16};
  cfg.decoder.hidden = {128};
  torch::manual_seed(9);
  ShalaVae model(d.infos(), cfg);
  auto mse = [&] {
    torch::NoGradGuard guard;
    auto q = infer_dataset(model, hold);
    auto out = model->decode(q.mean);
    double total = 0.0;
    for (int64_t i = 0; i < 2; ++i) total += (out[i] - hold.modality(i)).pow(2).mean().item<double>();
    return total / 2.0;
  };
  const double before = mse();
  Stage1Config s1;
  s1.iterations = 3000;
  s1.batch_size = 64;
  s1.lr_theta = 1e-3;
  s1.lr_phi = 1e-3;
  s1.seed = 10;
  auto report = train_stage1(model, train, s1);
  REQUIRE(report.status == TrainStatus::completed);
  const double after = mse();
  MESSAGE("reconstruction MSE " << before << " -> " << after);
  CHECK(after * 10.0 < before);
}

TEST_CASE("KL warm-up ramps linearly to one") {
  Stage1Config cfg;
  cfg.iterations = 1000;
  cfg.kl_warmup_fraction = 0.1;
  CHECK(kl_weight_at(cfg, 0) == doctest::Approx(0.0).epsilon(1e-2));
  CHECK(kl_weight_at(cfg, 50) == doctest::Approx(0.5).epsilon(2e-2));
  CHECK(kl_weight_at(cfg, 100) == doctest::Approx(1.0));
  CHECK(kl_weight_at(cfg, 999) == doctest::Approx(1.0));
  cfg.kl_warmup_fraction = 0.0;
  CHECK(kl_weight_at(cfg, 0) == 1.0);
}

TEST_CASE("stage-1 configs validate and round-trip") {
  Stage1Config cfg;
  cfg.iterations = 7;
  cfg.lr_phi = 5e-4;
  auto back = Stage1Config::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  auto model = tiny_model();
  CHECK(ModelConfig::from_json(model.to_json()).to_json() == model.to_json());
}
