#include <algorithm>
#include <cmath>
#include <numbers>

#include "shala/datagen.hpp"

namespace shala {

namespace {

// Seven-segment strokes in unit glyph coordinates, y pointing down.
struct Segment {
  double x0, y0, x1, y1;
};

constexpr double kLeft = 0.30, kRight = 0.70, kTop = 0.15, kMid = 0.50, kBottom = 0.85;
constexpr double kHalfStroke = 0.075;

// a b c d e f g
constexpr std::array<Segment, 7> kSegments{{
    {kLeft, kTop, kRight, kTop},        // a
    {kRight, kTop, kRight, kMid},       // b
    {kRight, kMid, kRight, kBottom},    // c
    {kLeft, kBottom, kRight, kBottom},  // d
    {kLeft, kMid, kLeft, kBottom},      // e
    {kLeft, kTop, kLeft, kMid},         // f
    {kLeft, kMid, kRight, kMid},        // g
}};

// Bit i set means segment i is drawn.
constexpr std::array<uint8_t, kGlyphAlphabetSize> kGlyphSegments{
    0b0111111,  // 0: abcdef
    0b0000110,  // 1: bc
    0b1011011,  // 2: abdeg
    0b1001111,  // 3: abcdg
    0b1100110,  // 4: bcfg
    0b1101101,  // 5: acdfg
    0b1111101,  // 6: acdefg
    0b0000111,  // 7: abc
    0b1111111,  // 8
    0b1101111,  // 9: abcdfg
};

double segment_distance(const Segment& s, double px, double py) {
  const double dx = s.x1 - s.x0;
  const double dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = ((px - s.x0) * dx + (py - s.y0) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = s.x0 + t * dx - px;
  const double cy = s.y0 + t * dy - py;
  return std::sqrt(cx * cx + cy * cy);
}

float background(Texture texture, int64_t x, int64_t y, double phase, Rng& rng) {
  const auto shift = static_cast<int64_t>(std::floor(phase * 4.0));
  switch (texture) {
    case Texture::flat:
      return 0.10f;
    case Texture::stripes:
      return ((y + shift) % 4 < 2) ? 0.30f : 0.05f;
    case Texture::checker:
      return (((x + shift) / 2 + y / 2) % 2 == 0) ? 0.30f : 0.05f;
    case Texture::noise:
      return static_cast<float>(rng.uniform(0.0, 0.35));
    case Texture::diagonal:
      return ((x + y + shift) % 4 < 2) ? 0.30f : 0.05f;
  }
  return 0.0f;
}

}  // namespace

void GlyphDatasetSpec::validate() const {
  if (modalities.empty()) throw InvalidArgument("glyph spec needs at least one modality");
  if (n_samples <= 0) throw InvalidArgument("glyph spec n_samples must be positive");
  if (n_classes <= 0 || n_classes > kGlyphAlphabetSize) {
    throw InvalidArgument("glyph spec n_classes must lie in [1, " + std::to_string(kGlyphAlphabetSize) + "]");
  }
  if (image_side < 8) throw InvalidArgument("glyph spec image_side must be at least 8");
  if (jitter_px < 0) throw InvalidArgument("glyph spec jitter_px must be non-negative");
  for (const auto& s : modalities) {
    for (double c : s.color) {
      if (!(c >= 0.0 && c <= 1.0)) throw InvalidArgument("glyph color components must lie in [0, 1]");
    }
  }
}

std::vector<GlyphStyle> GlyphDatasetSpec::default_styles(int64_t m) {
  static const std::array<GlyphStyle, 5> palette{{
      {0.0, {1.0, 0.25, 0.25}, Texture::flat},
      {35.0, {0.25, 1.0, 0.35}, Texture::stripes},
      {-50.0, {0.35, 0.55, 1.0}, Texture::checker},
      {90.0, {1.0, 0.9, 0.2}, Texture::noise},
      {180.0, {0.9, 0.35, 1.0}, Texture::diagonal},
  }};
  std::vector<GlyphStyle> out;
  for (int64_t i = 0; i < m; ++i) {
    auto s = palette[static_cast<size_t>(i) % palette.size()];
    s.rotation_deg += 15.0 * static_cast<double>(i / static_cast<int64_t>(palette.size()));
    out.push_back(s);
  }
  return out;
}

json GlyphDatasetSpec::to_json() const {
  json styles = json::array();
  for (const auto& s : modalities) {
    styles.push_back({{"rotation_deg", s.rotation_deg},
                      {"color", s.color},
                      {"texture", static_cast<int>(s.texture)}});
  }
  return {{"n_samples", n_samples}, {"n_classes", n_classes}, {"modalities", styles},
          {"image_side", image_side}, {"jitter_px", jitter_px}, {"seed", seed}};
}

GlyphDatasetSpec GlyphDatasetSpec::from_json(const json& j) {
  GlyphDatasetSpec spec;
  spec.n_samples = j.at("n_samples").get<int64_t>();
  spec.n_classes = j.at("n_classes").get<int64_t>();
  spec.image_side = j.at("image_side").get<int64_t>();
  spec.jitter_px = j.at("jitter_px").get<int64_t>();
  spec.seed = j.at("seed").get<uint64_t>();
  for (const auto& s : j.at("modalities")) {
    GlyphStyle style;
    style.rotation_deg = s.at("rotation_deg").get<double>();
    style.color = s.at("color").get<std::array<double, 3>>();
    const int tex = s.at("texture").get<int>();
    if (tex < 0 || tex > 4) throw InvalidArgument("unknown texture id " + std::to_string(tex));
    style.texture = static_cast<Texture>(tex);
    spec.modalities.push_back(style);
  }
  return spec;
}

torch::Tensor render_glyph(int64_t glyph, const GlyphStyle& style, int64_t side, std::array<double, 2> shared_shape,
                           std::array<double, 2> offset_px, double texture_phase, Rng& texture_rng) {
  if (glyph < 0 || glyph >= kGlyphAlphabetSize) throw InvalidArgument("glyph index out of range");
  const double slant = shared_shape[0];
  const double scale = shared_shape[1];
  const double theta = style.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  // forward map: u = center + R * [[scale, slant*scale], [0, scale]] * (g - center) + offset
  const double m00 = c * scale, m01 = c * slant * scale - s * scale;
  const double m10 = s * scale, m11 = s * slant * scale + c * scale;
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;

  auto image = torch::empty({side, side, 3}, torch::kFloat);
  auto acc = image.accessor<float, 3>();
  const uint8_t mask = kGlyphSegments[static_cast<size_t>(glyph)];
  const double inv_side = 1.0 / static_cast<double>(side);
  for (int64_t y = 0; y < side; ++y) {
    for (int64_t x = 0; x < side; ++x) {
      const double ux = (static_cast<double>(x) + 0.5 - offset_px[0]) * inv_side - 0.5;
      const double uy = (static_cast<double>(y) + 0.5 - offset_px[1]) * inv_side - 0.5;
      const double gx = 0.5 + i00 * ux + i01 * uy;
      const double gy = 0.5 + i10 * ux + i11 * uy;
      bool on = false;
      for (size_t k = 0; k < kSegments.size() && !on; ++k) {
        if ((mask >> k) & 1U) {
          on = segment_distance(kSegments[k], gx, gy) <= kHalfStroke;
        }
      }
      const float bg = background(style.texture, x, y, texture_phase, texture_rng);
      for (int64_t ch = 0; ch < 3; ++ch) {
        acc[y][x][ch] = on ? static_cast<float>(style.color[static_cast<size_t>(ch)]) : bg;
      }
    }
  }
  return image;
}

Dataset make_glyph_dataset(const GlyphDatasetSpec& spec) {
  spec.validate();
  const auto m = static_cast<int64_t>(spec.modalities.size());
  const int64_t n = spec.n_samples;
  const int64_t side = spec.image_side;
  Rng rng(spec.seed);

  // balanced labels, shuffled
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % spec.n_classes;
  for (int64_t i = n - 1; i > 0; --i) {
    std::swap(labels[static_cast<size_t>(i)], labels[static_cast<size_t>(rng.uniform_int(i + 1))]);
  }

  std::vector<torch::Tensor> arrays;
  for (int64_t i = 0; i < m; ++i) arrays.push_back(torch::empty({n, side, side, 3}, torch::kFloat));

  for (int64_t k = 0; k < n; ++k) {
    const std::array<double, 2> shape{rng.uniform(-0.2, 0.2), rng.uniform(0.85, 1.1)};
    for (int64_t i = 0; i < m; ++i) {
      const std::array<double, 2> offset{static_cast<double>(rng.uniform_int(2 * spec.jitter_px + 1) - spec.jitter_px),
                                         static_cast<double>(rng.uniform_int(2 * spec.jitter_px + 1) - spec.jitter_px)};
      const double phase = rng.uniform();
      arrays[static_cast<size_t>(i)][k].copy_(render_glyph(labels[static_cast<size_t>(k)],
                                                           spec.modalities[static_cast<size_t>(i)], side, shape,
                                                           offset, phase, rng));
    }
  }

  std::vector<ModalityInfo> infos;
  for (int64_t i = 0; i < m; ++i) {
    infos.push_back({"glyph_" + std::to_string(i), ModalityKind::image, {side, side, 3}});
  }
  Batch data;
  data.x = std::move(arrays);
  data.labels = torch::tensor(labels, torch::kLong);
  data.presence = torch::ones({n, m}, torch::kBool);
  json manifest = {{"generator", {{"kind", "glyphs"}, {"spec", spec.to_json()}}}};
  return Dataset(std::move(infos), std::move(data), std::move(manifest));
}

}  // namespace shala
