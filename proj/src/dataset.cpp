#include "shala/dataset.hpp"

#include <cstring>
#include <numeric>

namespace shala {

std::string to_string(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::image:
      return "image";
    case ModalityKind::vector:
      return "vector";
    case ModalityKind::categorical:
      return "categorical";
  }
  return "vector";
}

ModalityKind parse_modality_kind(const std::string& name) {
  if (name == "image") return ModalityKind::image;
  if (name == "vector") return ModalityKind::vector;
  if (name == "categorical") return ModalityKind::categorical;
  throw InvalidArgument("unknown modality kind '" + name + "'");
}

int64_t ModalityInfo::numel() const {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

void MultimodalSample::validate(const std::vector<ModalityInfo>& infos) const {
  const auto m = infos.size();
  if (modalities.size() != m || presence.size() != m) {
    throw InvalidArgument("sample has " + std::to_string(modalities.size()) + " modalities and " +
                          std::to_string(presence.size()) + " presence flags, expected " + std::to_string(m));
  }
  if (std::none_of(presence.begin(), presence.end(), [](bool p) { return p; })) {
    throw InvalidArgument("sample has no present modality");
  }
  for (size_t i = 0; i < m; ++i) {
    if (!presence[i]) continue;
    const auto& x = modalities[i];
    if (x.sizes().vec() != infos[i].shape) {
      throw ShapeMismatch("modality " + std::to_string(i) + " has shape " + c10::str(x.sizes()));
    }
    if (infos[i].kind == ModalityKind::image) {
      if (x.min().item<double>() < 0.0 || x.max().item<double>() > 1.0) {
        throw InvalidArgument("image modality " + std::to_string(i) + " has values outside [0, 1]");
      }
    }
  }
}

Batch Batch::select(const torch::Tensor& indices) const {
  Batch out;
  out.x.reserve(x.size());
  for (const auto& t : x) {
    out.x.push_back(t.index_select(0, indices));
  }
  out.labels = labels.index_select(0, indices);
  out.presence = presence.index_select(0, indices);
  return out;
}

Batch Batch::to(torch::ScalarType dtype) const {
  Batch out = *this;
  for (auto& t : out.x) {
    t = t.to(dtype);
  }
  return out;
}

MultimodalSample Batch::sample(int64_t i) const {
  MultimodalSample s;
  for (const auto& t : x) {
    s.modalities.push_back(t[i].clone());
  }
  s.label = labels[i].item<int64_t>();
  auto p = presence[i];
  for (int64_t j = 0; j < p.size(0); ++j) {
    s.presence.push_back(p[j].item<bool>());
  }
  return s;
}

Batch Batch::from_samples(const std::vector<MultimodalSample>& samples) {
  if (samples.empty()) {
    throw InvalidArgument("Batch::from_samples needs at least one sample");
  }
  const auto m = samples.front().modalities.size();
  Batch out;
  for (size_t i = 0; i < m; ++i) {
    std::vector<torch::Tensor> parts;
    for (const auto& s : samples) parts.push_back(s.modalities.at(i));
    out.x.push_back(torch::stack(parts));
  }
  std::vector<int64_t> labels;
  std::vector<uint8_t> presence;
  for (const auto& s : samples) {
    labels.push_back(s.label);
    for (bool p : s.presence) presence.push_back(p ? 1 : 0);
  }
  const auto b = static_cast<int64_t>(samples.size());
  out.labels = torch::tensor(labels, torch::kLong);
  out.presence = torch::tensor(presence, torch::kUInt8).view({b, static_cast<int64_t>(m)}).to(torch::kBool);
  return out;
}

Dataset::Dataset(std::vector<ModalityInfo> infos, Batch data, json manifest)
    : infos_(std::move(infos)), data_(std::move(data)), manifest_(std::move(manifest)) {
  if (infos_.empty()) {
    throw InvalidArgument("dataset needs at least one modality");
  }
  if (data_.x.size() != infos_.size()) {
    throw ShapeMismatch("dataset has " + std::to_string(data_.x.size()) + " arrays for " +
                        std::to_string(infos_.size()) + " modalities");
  }
  const int64_t n = data_.labels.size(0);
  for (size_t i = 0; i < infos_.size(); ++i) {
    auto expected = infos_[i].shape;
    expected.insert(expected.begin(), n);
    if (data_.x[i].sizes().vec() != expected) {
      throw ShapeMismatch("modality " + std::to_string(i) + " array has shape " + c10::str(data_.x[i].sizes()) +
                          ", expected " + c10::str(c10::IntArrayRef(expected)));
    }
  }
  if (data_.presence.dim() != 2 || data_.presence.size(0) != n ||
      data_.presence.size(1) != static_cast<int64_t>(infos_.size())) {
    throw ShapeMismatch("presence mask has shape " + c10::str(data_.presence.sizes()));
  }
}

Dataset Dataset::subset(const torch::Tensor& indices) const {
  return Dataset(infos_, data_.select(indices), manifest_);
}

Dataset Dataset::with_modalities(const std::vector<int64_t>& keep) const {
  std::vector<ModalityInfo> infos;
  Batch data;
  std::vector<int64_t> cols;
  for (auto i : keep) {
    infos.push_back(info(i));
    data.x.push_back(modality(i));
    cols.push_back(i);
  }
  data.labels = data_.labels;
  data.presence = data_.presence.index_select(1, torch::tensor(cols, torch::kLong));
  return Dataset(std::move(infos), std::move(data), manifest_);
}

Dataset Dataset::with_manifest(json manifest) const { return Dataset(infos_, data_, std::move(manifest)); }

bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.scalar_type() != b.scalar_type() || a.sizes() != b.sizes()) return false;
  auto ca = a.contiguous();
  auto cb = b.contiguous();
  return std::memcmp(ca.data_ptr(), cb.data_ptr(), ca.nbytes()) == 0;
}

bool bitwise_equal(const Dataset& a, const Dataset& b) {
  if (a.infos() != b.infos()) return false;
  for (int64_t i = 0; i < a.num_modalities(); ++i) {
    if (!bitwise_equal(a.modality(i), b.modality(i))) return false;
  }
  return bitwise_equal(a.labels(), b.labels()) && bitwise_equal(a.presence(), b.presence());
}

std::pair<torch::Tensor, torch::Tensor> holdout_split(int64_t n, int64_t n_holdout) {
  if (n_holdout < 0 || n_holdout >= n) {
    throw InvalidArgument("holdout size must lie in [0, n)");
  }
  auto all = torch::arange(n, torch::kLong);
  return {all.slice(0, 0, n - n_holdout), all.slice(0, n - n_holdout, n)};
}

}  // namespace shala
