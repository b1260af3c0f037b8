#include <cmath>
#include <numbers>

#include "shala/datagen.hpp"

namespace shala {

json RingMixtureSpec::to_json() const {
  return {{"components", components}, {"radius", radius}, {"component_std", component_std}};
}

RingMixtureSpec RingMixtureSpec::from_json(const json& j) {
  RingMixtureSpec spec;
  spec.components = j.at("components").get<int64_t>();
  spec.radius = j.at("radius").get<double>();
  spec.component_std = j.at("component_std").get<double>();
  return spec;
}

namespace {

torch::Tensor ring_centers(const RingMixtureSpec& spec) {
  auto angles = torch::arange(spec.components, torch::kDouble) * (2.0 * std::numbers::pi / spec.components);
  return spec.radius * torch::stack({torch::cos(angles), torch::sin(angles)}, 1);
}

}  // namespace

torch::Tensor sample_ring_mixture(const RingMixtureSpec& spec, int64_t n, Rng& rng) {
  if (spec.components < 1 || !(spec.component_std > 0.0)) {
    throw InvalidArgument("ring mixture needs >= 1 component and positive std");
  }
  auto centers = ring_centers(spec);
  auto which = rng.randint(spec.components, {n});
  auto noise = rng.normal({n, 2}, torch::kDouble);
  return (centers.index_select(0, which) + spec.component_std * noise).to(torch::kFloat);
}

torch::Tensor ring_mixture_nearest_distance(const RingMixtureSpec& spec, const torch::Tensor& points) {
  auto centers = ring_centers(spec);
  auto dist = torch::cdist(points.to(torch::kDouble), centers);
  return std::get<0>(dist.min(1)) / spec.component_std;
}

CorruptionMode parse_corruption_mode(const std::string& name) {
  if (name == "noise") return CorruptionMode::noise;
  if (name == "blank") return CorruptionMode::blank;
  if (name == "swap") return CorruptionMode::swap;
  throw InvalidArgument("unknown corruption mode '" + name + "'");
}

namespace {

void check_mask(const std::vector<bool>& mask, int64_t m) {
  if (static_cast<int64_t>(mask.size()) != m) {
    throw InvalidArgument("corruption mask has length " + std::to_string(mask.size()) + ", expected " +
                          std::to_string(m));
  }
  if (std::all_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw InvalidArgument("corruption mask must leave at least one modality intact");
  }
}

torch::Tensor noise_like(const torch::Tensor& x, Rng& rng) {
  return rng.uniform(x.sizes(), x.scalar_type());
}

}  // namespace

Batch corrupt_batch(const Batch& batch, const std::vector<bool>& mask, CorruptionMode mode, Rng& rng,
                    const Dataset* donors) {
  check_mask(mask, batch.num_modalities());
  Batch out = batch;
  for (auto& t : out.x) t = t.clone();
  const int64_t b = batch.size();
  for (int64_t i = 0; i < batch.num_modalities(); ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    auto& x = out.x[static_cast<size_t>(i)];
    switch (mode) {
      case CorruptionMode::blank:
        x.zero_();
        break;
      case CorruptionMode::noise:
        x.copy_(noise_like(x, rng));
        break;
      case CorruptionMode::swap: {
        if (donors == nullptr || donors->size() == 0) throw InvalidArgument("swap corruption needs a donor dataset");
        auto donor_labels = donors->labels();
        for (int64_t r = 0; r < b; ++r) {
          const int64_t own = batch.labels[r].item<int64_t>();
          int64_t pick = -1;
          for (int tries = 0; tries < 1000 && pick < 0; ++tries) {
            const int64_t cand = rng.uniform_int(donors->size());
            if (donor_labels[cand].item<int64_t>() != own) pick = cand;
          }
          if (pick < 0) throw InvalidArgument("swap corruption found no donor with a different label");
          x[r].copy_(donors->modality(i)[pick].to(x.scalar_type()));
        }
        break;
      }
    }
  }
  return out;
}

MultimodalSample corrupt_modalities(const MultimodalSample& sample, const std::vector<bool>& mask,
                                    CorruptionMode mode, Rng& rng, const Dataset* donors) {
  return corrupt_batch(Batch::from_samples({sample}), mask, mode, rng, donors).sample(0);
}

Dataset regenerate_from_manifest(const json& manifest) {
  if (!manifest.contains("generator")) throw InvalidArgument("manifest has no generator record");
  const auto& gen = manifest.at("generator");
  const auto kind = gen.at("kind").get<std::string>();
  if (kind == "glyphs") return make_glyph_dataset(GlyphDatasetSpec::from_json(gen.at("spec")));
  if (kind == "polygon_views") return make_polygon_views_dataset(PolygonViewsSpec::from_json(gen.at("spec")));
  if (kind == "linear_gaussian") {
    return make_linear_gaussian_dataset(LinearGaussianSpec::from_json(gen.at("spec"))).dataset;
  }
  throw InvalidArgument("unknown generator kind '" + kind + "'");
}

}  // namespace shala
