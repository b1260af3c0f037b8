#include <doctest.h>

#include <Eigen/Dense>

#include <fstream>

#include "shala/archive.hpp"
#include "shala/datagen.hpp"
#include "shala/eval.hpp"
#include "test_support.hpp"

using namespace shala;
using shala::testing::glyph_spec;
using shala::testing::TempDir;

TEST_CASE("glyph datasets are bit-identical under the same seed") {
  auto a = make_glyph_dataset(glyph_spec(3, 10, 7));
  auto b = make_glyph_dataset(glyph_spec(3, 10, 7));
  CHECK(bitwise_equal(a, b));
  auto c = make_glyph_dataset(glyph_spec(3, 10, 8));
  CHECK_FALSE(bitwise_equal(a, c));
}

TEST_CASE("single-modality glyph dataset is valid") {
  auto d = make_glyph_dataset(glyph_spec(1, 12, 0));
  CHECK(d.num_modalities() == 1);
  CHECK(d.size() == 12);
  for (int64_t i = 0; i < d.size(); ++i) CHECK_NOTHROW(d.sample(i).validate(d.infos()));
}

TEST_CASE("glyph samples keep pixels in range and all modalities present") {
  auto d = make_glyph_dataset(glyph_spec(3, 64, 1));
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(d.modality(i).min().item<double>() >= 0.0);
    CHECK(d.modality(i).max().item<double>() <= 1.0);
    CHECK(d.info(i).shape == std::vector<int64_t>{16, 16, 3});
  }
  CHECK(d.presence().all().item<bool>());
}

TEST_CASE("glyph class histogram is uniform within five percent") {
  auto d = make_glyph_dataset(glyph_spec(3, 5000, 3));
  auto counts = torch::bincount(d.labels(), {}, 10);
  for (int64_t c = 0; c < 10; ++c) {
    const double share = counts[c].item<double>() / 5000.0;
    CHECK(std::abs(share - 0.1) <= 0.1 * 0.05);
  }
}

TEST_CASE("invalid glyph specs are rejected") {
  auto spec = glyph_spec(3, 10, 0);
  spec.modalities.clear();
  CHECK_THROWS_AS(make_glyph_dataset(spec), InvalidArgument);
  spec = glyph_spec(3, 0, 0);
  CHECK_THROWS_AS(make_glyph_dataset(spec), InvalidArgument);
  spec = glyph_spec(3, 10, 0);
  spec.image_side = 0;
  CHECK_THROWS_AS(make_glyph_dataset(spec), InvalidArgument);
}

TEST_CASE("conjugate posterior of one unit observation at zero") {
  auto a = torch::ones({1, 1}, torch::kDouble);
  auto post = linear_gaussian_posterior({a}, {1.0}, {torch::zeros({1, 1}, torch::kDouble)});
  CHECK(post.mean.item<double>() == doctest::Approx(0.0));
  CHECK(post.covariance.item<double>() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("conjugate posterior of two unit observations at two") {
  auto a = torch::ones({1, 1}, torch::kDouble);
  auto x = torch::full({1, 1}, 2.0, torch::kDouble);
  auto post = linear_gaussian_posterior({a, a}, {1.0, 1.0}, {x, x});
  CHECK(post.mean.item<double>() == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(post.covariance.item<double>() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  Eigen::MatrixXd m(c.size(0), c.size(1));
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = acc[i][j];
  }
  return m;
}

}  // namespace

TEST_CASE("analytic posterior mean matches a weighted least-squares solve") {
  LinearGaussianSpec spec;
  spec.latent_dim = 2;
  spec.observation_dims = {3, 5};
  spec.noise_scales = {0.4, 0.9};
  spec.n_samples = 50;
  spec.seed = 11;
  auto data = make_linear_gaussian_dataset(spec);

  // Independent oracle: stack [I; A_i / s_i] against [0; x_i / s_i] and solve
  // the least-squares problem by QR.
  const int64_t d = 2;
  int64_t rows = d;
  for (auto r : spec.observation_dims) rows += r;
  Eigen::MatrixXd design = Eigen::MatrixXd::Zero(rows, d);
  design.topRows(d) = Eigen::MatrixXd::Identity(d, d);
  int64_t off = d;
  for (size_t i = 0; i < data.matrices.size(); ++i) {
    auto a = to_eigen(data.matrices[i]);
    design.block(off, 0, a.rows(), d) = a / data.noise_scales[i];
    off += a.rows();
  }
  auto x0 = to_eigen(data.dataset.modality(0));
  auto x1 = to_eigen(data.dataset.modality(1));
  auto mean = to_eigen(data.posterior.mean);
  double worst = 0.0;
  for (int64_t n = 0; n < spec.n_samples; ++n) {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(rows);
    rhs.segment(d, 3) = x0.row(n).transpose() / data.noise_scales[0];
    rhs.segment(d + 3, 5) = x1.row(n).transpose() / data.noise_scales[1];
    Eigen::VectorXd z = design.colPivHouseholderQr().solve(rhs);
    worst = std::max(worst, (z - mean.row(n).transpose()).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("posterior precision equals identity plus scaled Gram matrices") {
  LinearGaussianSpec spec;
  spec.latent_dim = 3;
  spec.observation_dims = {4, 6, 3};
  spec.noise_scales = {0.3, 1.2, 0.7};
  spec.n_samples = 5;
  spec.seed = 4;
  auto data = make_linear_gaussian_dataset(spec);
  Eigen::MatrixXd expect = Eigen::MatrixXd::Identity(3, 3);
  for (size_t i = 0; i < data.matrices.size(); ++i) {
    auto a = to_eigen(data.matrices[i]);
    expect += a.transpose() * a / (data.noise_scales[i] * data.noise_scales[i]);
  }
  CHECK((to_eigen(data.posterior.precision) - expect).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((to_eigen(data.posterior.covariance) * expect - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() <
        1e-10);
}

TEST_CASE("rank-deficient observation matrices are rejected") {
  LinearGaussianSpec spec;
  spec.latent_dim = 2;
  spec.observation_dims = {3};
  spec.noise_scales = {1.0};
  auto a = torch::zeros({3, 2}, torch::kDouble);
  a.index_put_({torch::indexing::Slice(), 0}, 1.0);
  a.index_put_({torch::indexing::Slice(), 1}, 2.0);
  spec.matrices = {a};
  CHECK_THROWS_AS(make_linear_gaussian_dataset(spec), InvalidArgument);
}

TEST_CASE("polygon views are quarter turns of the first view") {
  PolygonViewsSpec spec;
  spec.n_samples = 24;
  spec.n_views = 4;
  spec.image_side = 16;
  spec.seed = 5;
  auto d = make_polygon_views_dataset(spec);
  int64_t checked_square = 0;
  for (int64_t s = 0; s < d.size(); ++s) {
    auto v0 = d.modality(0)[s].squeeze(-1);
    for (int64_t k = 1; k < 4; ++k) {
      auto rotated = torch::rot90(v0, k, {1, 0});
      auto vk = d.modality(k)[s].squeeze(-1);
      // Boundary pixels may flip under floating rounding of the rotation.
      const auto mismatched = rotated.ne(vk).sum().item<int64_t>();
      CHECK(mismatched <= 2);
      if (d.labels()[s].item<int64_t>() == 1) {
        CHECK(mismatched == 0);
        ++checked_square;
      }
    }
  }
  CHECK(checked_square > 0);
}

TEST_CASE("sixteen views give sixteen present modalities") {
  PolygonViewsSpec spec;
  spec.n_samples = 6;
  spec.n_views = 16;
  auto d = make_polygon_views_dataset(spec);
  CHECK(d.num_modalities() == 16);
  CHECK(d.sample(0).presence.size() == 16);
  CHECK(d.presence().all().item<bool>());
}

TEST_CASE("polygon datasets need at least two views") {
  PolygonViewsSpec spec;
  spec.n_views = 1;
  CHECK_THROWS_AS(make_polygon_views_dataset(spec), InvalidArgument);
}

TEST_CASE("three and eight view datasets share one archive schema") {
  TempDir tmp("views");
  for (int64_t v : {3, 8}) {
    PolygonViewsSpec spec;
    spec.n_samples = 8;
    spec.n_views = v;
    auto d = make_polygon_views_dataset(spec);
    persist_dataset(d, tmp.path() / std::to_string(v));
    auto back = load_dataset(tmp.path() / std::to_string(v));
    CHECK(back.num_modalities() == v);
    CHECK(bitwise_equal(d, back));
  }
}

TEST_CASE("empty corruption mask is the identity") {
  auto d = make_glyph_dataset(glyph_spec(3, 4, 0));
  Rng rng(1);
  auto s = d.sample(0);
  auto out = corrupt_modalities(s, {false, false, false}, CorruptionMode::noise, rng);
  for (int64_t i = 0; i < 3; ++i) CHECK(torch::equal(out.modalities[i], s.modalities[i]));
}

TEST_CASE("blank corruption zeroes masked images and keeps presence") {
  auto d = make_glyph_dataset(glyph_spec(3, 4, 0));
  Rng rng(1);
  auto s = d.sample(1);
  auto out = corrupt_modalities(s, {false, true, false}, CorruptionMode::blank, rng);
  CHECK(out.modalities[1].abs().max().item<double>() == 0.0);
  CHECK(torch::equal(out.modalities[0], s.modalities[0]));
  CHECK(out.presence == s.presence);
}

TEST_CASE("noise corruption draws uniform pixels") {
  auto d = make_glyph_dataset(glyph_spec(2, 4, 0));
  Rng rng(2);
  auto out = corrupt_modalities(d.sample(0), {true, false}, CorruptionMode::noise, rng);
  CHECK(out.modalities[0].min().item<double>() >= 0.0);
  CHECK(out.modalities[0].max().item<double>() < 1.0);
  CHECK(out.modalities[0].mean().item<double>() == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("corrupting every modality is rejected") {
  auto d = make_glyph_dataset(glyph_spec(2, 4, 0));
  Rng rng(3);
  CHECK_THROWS_AS(corrupt_modalities(d.sample(0), {true, true}, CorruptionMode::blank, rng), InvalidArgument);
  CHECK_THROWS_AS(corrupt_modalities(d.sample(0), {true}, CorruptionMode::blank, rng), InvalidArgument);
}

TEST_CASE("swap corruption inserts a glyph of another class") {
  auto train = make_glyph_dataset(glyph_spec(2, 3000, 21));
  ClassifierConfig cfg;
  auto clf = train_toy_classifier(train, 1, 10, cfg);
  auto donors = make_glyph_dataset(glyph_spec(2, 200, 22));
  auto data = make_glyph_dataset(glyph_spec(2, 200, 23));
  Rng rng(4);
  auto swapped = corrupt_batch(data.data(), {false, true}, CorruptionMode::swap, rng, &donors);
  CHECK(torch::equal(swapped.labels, data.labels()));
  torch::NoGradGuard guard;
  clf->eval();
  auto pred = clf->predict(swapped.x[1]);
  const double mismatch = pred.ne(data.labels()).to(torch::kDouble).mean().item<double>();
  CHECK(mismatch >= 0.97);
  CHECK(torch::equal(swapped.x[0], data.modality(0)));
}

TEST_CASE("archives round-trip bit for bit") {
  TempDir tmp("roundtrip");
  auto d = make_glyph_dataset(glyph_spec(3, 16, 9));
  persist_dataset(d, tmp.path() / "a");
  auto back = load_dataset(tmp.path() / "a");
  CHECK(bitwise_equal(d, back));
  CHECK((back.infos() == d.infos()));
  CHECK(back.manifest() == d.manifest());
}

TEST_CASE("truncated array file is a shape mismatch") {
  TempDir tmp("truncated");
  auto d = make_glyph_dataset(glyph_spec(2, 8, 9));
  persist_dataset(d, tmp.path());
  const auto file = tmp.path() / "modality_1.bin";
  std::filesystem::resize_file(file, std::filesystem::file_size(file) / 2);
  CHECK_THROWS_AS(load_dataset(tmp.path()), ShapeMismatch);
}

TEST_CASE("missing manifest is rejected") {
  TempDir tmp("nomanifest");
  auto d = make_glyph_dataset(glyph_spec(2, 8, 9));
  persist_dataset(d, tmp.path());
  std::filesystem::remove(tmp.path() / "manifest.json");
  CHECK_THROWS_AS(load_dataset(tmp.path()), InvalidArgument);
}

TEST_CASE("regeneration from a stored manifest reproduces the archive") {
  TempDir tmp("regen");
  auto glyphs = make_glyph_dataset(glyph_spec(3, 20, 31));
  PolygonViewsSpec pspec;
  pspec.n_samples = 10;
  pspec.n_views = 3;
  pspec.seed = 32;
  auto views = make_polygon_views_dataset(pspec);
  LinearGaussianSpec lspec;
  lspec.n_samples = 30;
  lspec.seed = 33;
  auto linear = make_linear_gaussian_dataset(lspec).dataset;
  int idx = 0;
  for (const auto* d : {&glyphs, &views, &linear}) {
    const auto dir = tmp.path() / std::to_string(idx++);
    persist_dataset(*d, dir);
    auto stored = load_dataset(dir);
    CHECK(stored.manifest().at("generator").contains("spec"));
    CHECK(bitwise_equal(regenerate_from_manifest(stored.manifest()), stored));
  }
}

TEST_CASE("every generator is deterministic in its seed") {
  PolygonViewsSpec pspec;
  pspec.n_samples = 10;
  pspec.n_views = 5;
  pspec.seed = 8;
  CHECK(bitwise_equal(make_polygon_views_dataset(pspec), make_polygon_views_dataset(pspec)));
  LinearGaussianSpec lspec;
  lspec.seed = 8;
  CHECK(bitwise_equal(make_linear_gaussian_dataset(lspec).dataset, make_linear_gaussian_dataset(lspec).dataset));
  RingMixtureSpec ring;
  Rng a(5), b(5);
  CHECK(torch::equal(sample_ring_mixture(ring, 100, a), sample_ring_mixture(ring, 100, b)));
}
