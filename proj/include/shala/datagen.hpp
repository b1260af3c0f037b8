#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/rng.hpp"

namespace shala {

// ---------------------------------------------------------------------------
// Glyphs: a fixed ten-symbol stroke alphabet rendered once per modality, each
// modality with its own rotation, foreground color and background texture.

enum class Texture : int { flat = 0, stripes = 1, checker = 2, noise = 3, diagonal = 4 };

struct GlyphStyle {
  double rotation_deg = 0.0;
  std::array<double, 3> color{1.0, 1.0, 1.0};
  Texture texture = Texture::flat;
};

struct GlyphDatasetSpec {
  int64_t n_samples = 1000;
  int64_t n_classes = 10;
  std::vector<GlyphStyle> modalities;
  int64_t image_side = 16;
  int64_t jitter_px = 1;
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static GlyphDatasetSpec from_json(const json& j);
  /// The first m entries of a fixed style palette.
  static std::vector<GlyphStyle> default_styles(int64_t m);
};

inline constexpr int64_t kGlyphAlphabetSize = 10;

Dataset make_glyph_dataset(const GlyphDatasetSpec& spec);

/// Renders one glyph; shared_shape = {slant, scale}. Returns {H, W, 3}.
torch::Tensor render_glyph(int64_t glyph, const GlyphStyle& style, int64_t side, std::array<double, 2> shared_shape,
                           std::array<double, 2> offset_px, double texture_phase, Rng& texture_rng);

// ---------------------------------------------------------------------------
// Linear-Gaussian family with a closed-form posterior.

enum class LinearDesign { random, orthogonal };

struct LinearGaussianSpec {
  int64_t latent_dim = 2;
  std::vector<int64_t> observation_dims{4, 4};
  std::vector<double> noise_scales{0.5, 0.5};
  int64_t n_samples = 1000;
  LinearDesign design = LinearDesign::random;
  uint64_t seed = 0;
  /// Explicit observation matrices; when empty they are drawn from the seed.
  std::vector<torch::Tensor> matrices;

  void validate() const;
  json to_json() const;
  static LinearGaussianSpec from_json(const json& j);
};

/// p(z|X) for z ~ N(0, I), x_i = A_i z + s_i eps. The covariance is shared by
/// every sample: Sigma^-1 = I + sum_i A_i^T A_i / s_i^2.
struct AnalyticPosterior {
  torch::Tensor mean;        // [N, d] float64
  torch::Tensor covariance;  // [d, d] float64
  torch::Tensor precision;   // [d, d] float64
};

struct LinearGaussianData {
  Dataset dataset;  // float64 vector modalities
  std::vector<torch::Tensor> matrices;
  std::vector<double> noise_scales;
  torch::Tensor latents;  // [N, d] ground-truth z
  AnalyticPosterior posterior;
};

LinearGaussianData make_linear_gaussian_dataset(const LinearGaussianSpec& spec);

/// Conjugate posterior of arbitrary observations under the given model.
AnalyticPosterior linear_gaussian_posterior(const std::vector<torch::Tensor>& matrices,
                                            const std::vector<double>& noise_scales,
                                            const std::vector<torch::Tensor>& observations);

// ---------------------------------------------------------------------------
// Multi-view polygons: V renderings of one filled polygon at evenly spaced
// rotations. Shape class is the label.

struct PolygonViewsSpec {
  int64_t n_samples = 1000;
  int64_t n_views = 16;
  int64_t n_shape_classes = 6;
  int64_t image_side = 16;
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static PolygonViewsSpec from_json(const json& j);
};

inline constexpr int64_t kPolygonShapeCount = 6;

Dataset make_polygon_views_dataset(const PolygonViewsSpec& spec);

/// Vertices in unit coordinates (centered at the origin) for a shape class.
std::vector<std::array<double, 2>> polygon_vertices(int64_t shape_class);

// ---------------------------------------------------------------------------
// 2-D ring mixture: equal-weight isotropic Gaussians on a circle. Stands in
// for a narrow aggregated posterior with an exact sampler.

struct RingMixtureSpec {
  int64_t components = 8;
  double radius = 2.0;
  double component_std = 0.15;

  json to_json() const;
  static RingMixtureSpec from_json(const json& j);
};

torch::Tensor sample_ring_mixture(const RingMixtureSpec& spec, int64_t n, Rng& rng);
/// Largest Mahalanobis-style radius (in component std units) to the nearest center, per row.
torch::Tensor ring_mixture_nearest_distance(const RingMixtureSpec& spec, const torch::Tensor& points);

// ---------------------------------------------------------------------------

enum class CorruptionMode { noise, blank, swap };

CorruptionMode parse_corruption_mode(const std::string& name);

/// Replaces masked modalities. `donors` supplies swap candidates; the swapped
/// modality comes from a donor whose label differs from the sample's.
MultimodalSample corrupt_modalities(const MultimodalSample& sample, const std::vector<bool>& mask,
                                    CorruptionMode mode, Rng& rng, const Dataset* donors = nullptr);

/// Batch form of corrupt_modalities; the same mask applies to every row.
Batch corrupt_batch(const Batch& batch, const std::vector<bool>& mask, CorruptionMode mode, Rng& rng,
                    const Dataset* donors = nullptr);

/// Rebuilds a dataset from the generator record stored in its manifest.
Dataset regenerate_from_manifest(const json& manifest);

}  // namespace shala
