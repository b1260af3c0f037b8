#include <cmath>
#include <numbers>

#include "shala/datagen.hpp"

namespace shala {

void PolygonViewsSpec::validate() const {
  if (n_views < 2) throw InvalidArgument("polygon views need V >= 2, got " + std::to_string(n_views));
  if (n_samples <= 0) throw InvalidArgument("polygon spec n_samples must be positive");
  if (n_shape_classes < 1 || n_shape_classes > kPolygonShapeCount) {
    throw InvalidArgument("polygon spec n_shape_classes must lie in [1, " + std::to_string(kPolygonShapeCount) + "]");
  }
  if (image_side < 8) throw InvalidArgument("polygon spec image_side must be at least 8");
}

json PolygonViewsSpec::to_json() const {
  return {{"n_samples", n_samples}, {"n_views", n_views},       {"n_shape_classes", n_shape_classes},
          {"image_side", image_side}, {"seed", seed}};
}

PolygonViewsSpec PolygonViewsSpec::from_json(const json& j) {
  PolygonViewsSpec spec;
  spec.n_samples = j.at("n_samples").get<int64_t>();
  spec.n_views = j.at("n_views").get<int64_t>();
  spec.n_shape_classes = j.at("n_shape_classes").get<int64_t>();
  spec.image_side = j.at("image_side").get<int64_t>();
  spec.seed = j.at("seed").get<uint64_t>();
  return spec;
}

std::vector<std::array<double, 2>> polygon_vertices(int64_t shape_class) {
  auto regular = [](int n, double phase) {
    std::vector<std::array<double, 2>> v;
    for (int k = 0; k < n; ++k) {
      const double a = phase + 2.0 * std::numbers::pi * k / n;
      v.push_back({std::cos(a), std::sin(a)});
    }
    return v;
  };
  switch (shape_class) {
    case 0:
      return regular(3, -std::numbers::pi / 2);
    case 1:
      return regular(4, std::numbers::pi / 4);
    case 2:
      return regular(5, -std::numbers::pi / 2);
    case 3:
      return regular(6, 0.0);
    case 4: {  // five-point star
      std::vector<std::array<double, 2>> v;
      for (int k = 0; k < 10; ++k) {
        const double r = (k % 2 == 0) ? 1.0 : 0.45;
        const double a = -std::numbers::pi / 2 + std::numbers::pi * k / 5;
        v.push_back({r * std::cos(a), r * std::sin(a)});
      }
      return v;
    }
    case 5:  // arrow, no rotational symmetry
      return {{1.0, 0.0}, {0.1, 0.8}, {0.1, 0.3}, {-0.9, 0.3}, {-0.9, -0.3}, {0.1, -0.3}, {0.1, -0.8}};
    default:
      throw InvalidArgument("unknown polygon shape class " + std::to_string(shape_class));
  }
}

namespace {

bool inside(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  const size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if (((a[1] > y) != (b[1] > y)) && (x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0])) {
      in = !in;
    }
  }
  return in;
}

}  // namespace

Dataset make_polygon_views_dataset(const PolygonViewsSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int64_t n = spec.n_samples;
  const int64_t v = spec.n_views;
  const int64_t side = spec.image_side;

  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % spec.n_shape_classes;
  for (int64_t i = n - 1; i > 0; --i) {
    std::swap(labels[static_cast<size_t>(i)], labels[static_cast<size_t>(rng.uniform_int(i + 1))]);
  }

  std::vector<torch::Tensor> arrays;
  for (int64_t k = 0; k < v; ++k) arrays.push_back(torch::zeros({n, side, side, 1}, torch::kFloat));
  std::vector<torch::TensorAccessor<float, 4>> acc;
  for (auto& a : arrays) acc.push_back(a.accessor<float, 4>());

  for (int64_t s = 0; s < n; ++s) {
    const auto base = polygon_vertices(labels[static_cast<size_t>(s)]);
    const double theta0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double scale = rng.uniform(0.30, 0.45);
    const float intensity = static_cast<float>(rng.uniform(0.6, 1.0));
    for (int64_t k = 0; k < v; ++k) {
      const double theta = theta0 + 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(v);
      const double c = std::cos(theta);
      const double sn = std::sin(theta);
      std::vector<std::array<double, 2>> poly;
      for (const auto& p : base) {
        poly.push_back({scale * (c * p[0] - sn * p[1]), scale * (sn * p[0] + c * p[1])});
      }
      for (int64_t y = 0; y < side; ++y) {
        for (int64_t x = 0; x < side; ++x) {
          const double ux = (static_cast<double>(x) + 0.5) / static_cast<double>(side) - 0.5;
          const double uy = (static_cast<double>(y) + 0.5) / static_cast<double>(side) - 0.5;
          if (inside(poly, ux, uy)) acc[static_cast<size_t>(k)][s][y][x][0] = intensity;
        }
      }
    }
  }

  std::vector<ModalityInfo> infos;
  for (int64_t k = 0; k < v; ++k) {
    infos.push_back({"view_" + std::to_string(k), ModalityKind::image, {side, side, 1}});
  }
  Batch data;
  data.x = std::move(arrays);
  data.labels = torch::tensor(labels, torch::kLong);
  data.presence = torch::ones({n, v}, torch::kBool);
  json manifest = {{"generator", {{"kind", "polygon_views"}, {"spec", spec.to_json()}}}};
  return Dataset(std::move(infos), std::move(data), std::move(manifest));
}

}  // namespace shala
