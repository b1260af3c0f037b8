#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "shala/common.hpp"

namespace shala {

enum class ModalityKind { image, vector, categorical };

std::string to_string(ModalityKind kind);
ModalityKind parse_modality_kind(const std::string& name);

/// Per-sample layout of one modality. Images are {H, W, C} with values in
/// [0, 1]; vectors are {D}; categorical modalities are one-hot {C}.
struct ModalityInfo {
  std::string name;
  ModalityKind kind = ModalityKind::vector;
  std::vector<int64_t> shape;

  int64_t numel() const;
  bool operator==(const ModalityInfo&) const = default;
};

/// One multimodal observation X = {x_1..x_M}.
struct MultimodalSample {
  std::vector<torch::Tensor> modalities;
  int64_t label = 0;
  std::vector<bool> presence;

  int64_t num_modalities() const { return static_cast<int64_t>(modalities.size()); }
  /// Throws InvalidArgument when the sample breaks its invariants.
  void validate(const std::vector<ModalityInfo>& infos) const;
};

/// Column-major view of many samples: modality i is a tensor [B, shape_i...].
struct Batch {
  std::vector<torch::Tensor> x;
  torch::Tensor labels;    // int64 [B]
  torch::Tensor presence;  // bool [B, M]

  int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  int64_t num_modalities() const { return static_cast<int64_t>(x.size()); }
  Batch select(const torch::Tensor& indices) const;
  Batch to(torch::ScalarType dtype) const;
  MultimodalSample sample(int64_t i) const;
  static Batch from_samples(const std::vector<MultimodalSample>& samples);
};

/// Immutable set of multimodal samples with the manifest that produced it.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<ModalityInfo> infos, Batch data, json manifest = json::object());

  int64_t size() const { return data_.size(); }
  int64_t num_modalities() const { return static_cast<int64_t>(infos_.size()); }
  const std::vector<ModalityInfo>& infos() const { return infos_; }
  const ModalityInfo& info(int64_t i) const { return infos_.at(static_cast<size_t>(i)); }
  const Batch& data() const { return data_; }
  const torch::Tensor& modality(int64_t i) const { return data_.x.at(static_cast<size_t>(i)); }
  const torch::Tensor& labels() const { return data_.labels; }
  const torch::Tensor& presence() const { return data_.presence; }
  const json& manifest() const { return manifest_; }

  MultimodalSample sample(int64_t i) const { return data_.sample(i); }
  Batch batch(const torch::Tensor& indices) const { return data_.select(indices); }
  Dataset subset(const torch::Tensor& indices) const;
  /// Keeps the selected modalities, in the given order.
  Dataset with_modalities(const std::vector<int64_t>& keep) const;
  Dataset with_manifest(json manifest) const;

 private:
  std::vector<ModalityInfo> infos_;
  Batch data_;
  json manifest_;
};

/// Element-wise equality of shapes, dtypes and bytes.
bool bitwise_equal(const Dataset& a, const Dataset& b);
bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b);

/// Split [0, n) into a deterministic train/held-out pair of index tensors.
std::pair<torch::Tensor, torch::Tensor> holdout_split(int64_t n, int64_t n_holdout);

}  // namespace shala
