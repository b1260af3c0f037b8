#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "shala/dataset.hpp"

namespace shala {

inline constexpr int kArchiveFormatVersion = 1;

/// Writes `modality_<i>.bin`, `labels.bin`, `presence.bin` (raw little-endian)
/// and `manifest.json` describing dtype/shape of each file plus the dataset's
/// own manifest under "dataset".
void persist_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Raw array helpers shared with checkpoint bundles.
std::string dtype_name(torch::ScalarType t);
torch::ScalarType parse_dtype(const std::string& name);
void write_raw_array(const torch::Tensor& t, const std::filesystem::path& file);
torch::Tensor read_raw_array(const std::filesystem::path& file, torch::ScalarType dtype,
                             const std::vector<int64_t>& shape);

json read_json_file(const std::filesystem::path& file);
void write_json_file(const json& j, const std::filesystem::path& file);

}  // namespace shala
