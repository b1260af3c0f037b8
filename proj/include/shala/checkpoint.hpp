#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "shala/common.hpp"

namespace shala {

inline constexpr int kCheckpointFormatVersion = 1;

enum class StageTag { stage1, stage2 };

StageTag parse_stage_tag(const std::string& name);
std::string to_string(StageTag s);

/// Lowercase hex SHA-256.
std::string sha256_hex(const void* data, size_t size);
std::string sha256_hex(const std::string& text);
/// Digest of the canonical (sorted-key, compact) JSON text.
std::string json_digest(const json& j);
/// Digest over names, dtypes, shapes and bytes of every parameter and buffer.
std::string module_digest(torch::nn::Module& module);

/// Named parameter arrays plus the manifest that identifies them. Stored as
/// one raw little-endian file per array and a `manifest.json`.
struct CheckpointBundle {
  StageTag stage = StageTag::stage1;
  int format_version = kCheckpointFormatVersion;
  json config;
  std::string config_digest;
  /// Stage-2 bundles name the stage-1 bundle they were trained against.
  std::string stage1_digest;
  std::vector<std::pair<std::string, torch::Tensor>> arrays;

  /// Identity of the bundle: config digest, stage tag and array contents.
  std::string digest() const;
};

/// Snapshot of a module's parameters and buffers (deep copies).
CheckpointBundle make_bundle(StageTag stage, torch::nn::Module& module, const json& config,
                             const std::string& stage1_digest = "");
/// Copies the arrays into a module with the same structure; throws
/// ShapeMismatch on missing, extra or mis-shaped arrays.
void load_into(const CheckpointBundle& bundle, torch::nn::Module& module);

void save_bundle(const CheckpointBundle& bundle, const std::filesystem::path& dir);
/// Throws FormatVersionMismatch for bundles written by another format version
/// and DigestMismatch when the stored digest does not match the contents.
CheckpointBundle load_bundle(const std::filesystem::path& dir);

/// Refuses a stage-2 bundle that was trained against a different stage-1.
void check_stage_pair(const CheckpointBundle& stage1, const CheckpointBundle& stage2);

}  // namespace shala
