#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "shala/datagen.hpp"
#include "shala/diffusion.hpp"
#include "shala/eval.hpp"
#include "shala/generator.hpp"

namespace shala {

/// Generator record: {"kind": glyphs|polygon_views|linear_gaussian, "spec": {...}}.
/// For glyphs, "modalities" may be an integer m as shorthand for the first m
/// palette styles.
struct DatasetConfig {
  std::string kind = "glyphs";
  json spec;

  Dataset build() const;
  json to_json() const;
  static DatasetConfig from_json(const json& j);
};

struct EvalConfig {
  ClassifierConfig classifier;
  int64_t n_generate = 500;
  double guidance = 1.0;
  /// Forward depth for correction and style transfer; -1 means T / 4.
  int64_t k_correct = -1;
  int64_t k_style = -1;
  /// Other run directories whose metrics join the comparison table.
  std::vector<std::string> baselines;

  json to_json() const;
  static EvalConfig from_json(const json& j);
};

/// One experiment: dataset, both training stages, evaluation and output
/// location. Parsing rejects unknown keys anywhere in the tree; missing keys
/// take their defaults.
struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  Stage1Config stage1;
  Stage2Config stage2;
  EvalConfig eval;
  std::string output_dir = "runs/default";
  uint64_t seed = 0;
  /// When set, stage-2 training refuses a stage-1 bundle with another digest.
  std::string stage1_digest;

  void validate() const;
  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::filesystem::path& file);
  /// Digest of the canonical JSON form.
  std::string digest() const;
};

/// Environment variable that, when set, re-roots relative output directories.
inline constexpr const char* kOutputRootEnv = "SHALA_OUTPUT_ROOT";

std::filesystem::path resolve_output_dir(const std::string& output_dir);

/// Throws InvalidArgument naming the first key of `j` that `schema` lacks,
/// recursing into objects present in both.
void reject_unknown_keys(const json& j, const json& schema, const std::string& where);

}  // namespace shala
