#include <cmath>

#include "shala/datagen.hpp"

namespace shala {

namespace {

std::string design_name(LinearDesign d) { return d == LinearDesign::orthogonal ? "orthogonal" : "random"; }

void check_column_rank(const torch::Tensor& a, size_t index) {
  auto sv = torch::linalg_svdvals(a);
  const double smallest = sv.min().item<double>();
  const double largest = sv.max().item<double>();
  if (!(smallest > 1e-8 * std::max(1.0, largest))) {
    throw InvalidArgument("observation matrix A_" + std::to_string(index) + " is rank deficient");
  }
}

}  // namespace

void LinearGaussianSpec::validate() const {
  if (latent_dim < 1) throw InvalidArgument("linear-Gaussian latent_dim must be >= 1");
  if (observation_dims.empty()) throw InvalidArgument("linear-Gaussian spec needs at least one modality");
  if (observation_dims.size() != noise_scales.size()) {
    throw InvalidArgument("linear-Gaussian spec: one noise scale per modality");
  }
  if (n_samples <= 0) throw InvalidArgument("linear-Gaussian n_samples must be positive");
  for (size_t i = 0; i < observation_dims.size(); ++i) {
    if (observation_dims[i] < latent_dim) {
      throw InvalidArgument("A_" + std::to_string(i) + " cannot have full column rank with fewer rows than latent_dim");
    }
    if (!(noise_scales[i] > 0.0)) throw InvalidArgument("noise scales must be positive");
  }
  if (!matrices.empty()) {
    if (matrices.size() != observation_dims.size()) throw InvalidArgument("one matrix per modality");
    for (size_t i = 0; i < matrices.size(); ++i) {
      if (matrices[i].sizes().vec() != std::vector<int64_t>{observation_dims[i], latent_dim}) {
        throw ShapeMismatch("A_" + std::to_string(i) + " has shape " + c10::str(matrices[i].sizes()));
      }
      check_column_rank(matrices[i].to(torch::kDouble), i);
    }
  }
}

json LinearGaussianSpec::to_json() const {
  json j = {{"latent_dim", latent_dim}, {"observation_dims", observation_dims}, {"noise_scales", noise_scales},
            {"n_samples", n_samples},   {"design", design_name(design)},          {"seed", seed}};
  if (!matrices.empty()) {
    json mats = json::array();
    for (const auto& a : matrices) {
      auto c = a.to(torch::kDouble).contiguous();
      mats.push_back(std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel()));
    }
    j["matrices"] = mats;
  }
  return j;
}

LinearGaussianSpec LinearGaussianSpec::from_json(const json& j) {
  LinearGaussianSpec spec;
  spec.latent_dim = j.at("latent_dim").get<int64_t>();
  spec.observation_dims = j.at("observation_dims").get<std::vector<int64_t>>();
  spec.noise_scales = j.at("noise_scales").get<std::vector<double>>();
  spec.n_samples = j.at("n_samples").get<int64_t>();
  const auto design = j.at("design").get<std::string>();
  if (design == "orthogonal") {
    spec.design = LinearDesign::orthogonal;
  } else if (design == "random") {
    spec.design = LinearDesign::random;
  } else {
    throw InvalidArgument("unknown linear design '" + design + "'");
  }
  spec.seed = j.at("seed").get<uint64_t>();
  if (j.contains("matrices")) {
    size_t i = 0;
    for (const auto& m : j.at("matrices")) {
      auto v = m.get<std::vector<double>>();
      spec.matrices.push_back(
          torch::tensor(v, torch::kDouble).view({spec.observation_dims.at(i), spec.latent_dim}).clone());
      ++i;
    }
  }
  return spec;
}

AnalyticPosterior linear_gaussian_posterior(const std::vector<torch::Tensor>& matrices,
                                            const std::vector<double>& noise_scales,
                                            const std::vector<torch::Tensor>& observations) {
  if (matrices.empty() || matrices.size() != noise_scales.size() || matrices.size() != observations.size()) {
    throw InvalidArgument("linear_gaussian_posterior: mismatched modality counts");
  }
  const int64_t d = matrices.front().size(1);
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto precision = torch::eye(d, opts);
  torch::Tensor rhs;
  for (size_t i = 0; i < matrices.size(); ++i) {
    auto a = matrices[i].to(torch::kDouble);
    const double inv_var = 1.0 / (noise_scales[i] * noise_scales[i]);
    precision = precision + inv_var * a.t().mm(a);
    auto term = observations[i].to(torch::kDouble).mm(a) * inv_var;  // [N, d] = x A / s^2
    rhs = rhs.defined() ? rhs + term : term;
  }
  auto chol = torch::linalg_cholesky(precision);
  auto covariance = torch::cholesky_inverse(chol);
  AnalyticPosterior post;
  post.precision = precision;
  post.covariance = covariance;
  post.mean = rhs.mm(covariance);  // covariance is symmetric
  return post;
}

LinearGaussianData make_linear_gaussian_dataset(const LinearGaussianSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int64_t d = spec.latent_dim;
  const int64_t n = spec.n_samples;
  const size_t m = spec.observation_dims.size();

  std::vector<torch::Tensor> matrices;
  if (!spec.matrices.empty()) {
    for (const auto& a : spec.matrices) matrices.push_back(a.to(torch::kDouble).clone());
  } else {
    for (size_t i = 0; i < m; ++i) {
      auto g = rng.normal({spec.observation_dims[i], d}, torch::kDouble);
      if (spec.design == LinearDesign::orthogonal) {
        // orthonormal columns times distinct column scales keeps sum A^T A / s^2 diagonal
        auto q = std::get<0>(torch::linalg_qr(g, "reduced"));
        auto scales = 0.6 + 1.4 * rng.uniform({d}, torch::kDouble);
        matrices.push_back(q * scales.unsqueeze(0));
      } else {
        matrices.push_back(g);
      }
      check_column_rank(matrices.back(), i);
    }
  }

  auto z = rng.normal({n, d}, torch::kDouble);
  std::vector<torch::Tensor> obs;
  for (size_t i = 0; i < m; ++i) {
    auto eps = rng.normal({n, spec.observation_dims[i]}, torch::kDouble);
    obs.push_back(z.mm(matrices[i].t()) + spec.noise_scales[i] * eps);
  }

  std::vector<ModalityInfo> infos;
  for (size_t i = 0; i < m; ++i) {
    infos.push_back({"linear_" + std::to_string(i), ModalityKind::vector, {spec.observation_dims[i]}});
  }
  Batch data;
  data.x = obs;
  data.labels = torch::zeros({n}, torch::kLong);
  data.presence = torch::ones({n, static_cast<int64_t>(m)}, torch::kBool);

  LinearGaussianSpec recorded = spec;
  recorded.matrices = matrices;
  json manifest = {{"generator", {{"kind", "linear_gaussian"}, {"spec", spec.to_json()}}},
                   {"observation_matrices", recorded.to_json().at("matrices")}};

  LinearGaussianData out;
  out.posterior = linear_gaussian_posterior(matrices, spec.noise_scales, obs);
  out.dataset = Dataset(std::move(infos), std::move(data), std::move(manifest));
  out.matrices = std::move(matrices);
  out.noise_scales = spec.noise_scales;
  out.latents = z;
  return out;
}

}  // namespace shala
