#include "shala/config.hpp"

#include <cstdlib>

#include "shala/archive.hpp"
#include "shala/checkpoint.hpp"

namespace shala {

namespace {

json default_dataset_spec(const std::string& kind) {
  if (kind == "glyphs") {
    GlyphDatasetSpec s;
    s.modalities = GlyphDatasetSpec::default_styles(3);
    return s.to_json();
  }
  if (kind == "polygon_views") return PolygonViewsSpec{}.to_json();
  if (kind == "linear_gaussian") return LinearGaussianSpec{}.to_json();
  throw InvalidArgument("unknown dataset kind '" + kind + "' (expected glyphs, polygon_views or linear_gaussian)");
}

/// Defaults overlaid with the user's values after the key check.
json overlay(const json& defaults, const json& user, const std::string& where) {
  if (!user.is_object()) throw InvalidArgument(where + " must be an object");
  reject_unknown_keys(user, defaults, where);
  json merged = defaults;
  merged.merge_patch(user);
  return merged;
}

template <typename T>
T parse_section(const json& root, const char* key, const std::string& where) {
  if (!root.contains(key)) return T{};
  try {
    return T::from_json(overlay(T{}.to_json(), root.at(key), where + "." + key));
  } catch (const json::exception& e) {
    throw InvalidArgument(where + "." + key + ": " + e.what());
  }
}

}  // namespace

void reject_unknown_keys(const json& j, const json& schema, const std::string& where) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    if (!schema.is_object() || !schema.contains(key)) {
      throw InvalidArgument("unknown key '" + where + "." + key + "'");
    }
    const auto& expected = schema.at(key);
    if (value.is_object() && expected.is_object()) reject_unknown_keys(value, expected, where + "." + key);
  }
}

Dataset DatasetConfig::build() const {
  return regenerate_from_manifest({{"generator", {{"kind", kind}, {"spec", to_json().at("spec")}}}});
}

json DatasetConfig::to_json() const {
  return {{"kind", kind}, {"spec", spec.is_null() ? default_dataset_spec(kind) : spec}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("dataset must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "kind" && key != "spec") throw InvalidArgument("unknown key 'dataset." + key + "'");
  }
  DatasetConfig c;
  c.kind = j.value("kind", c.kind);
  json user = j.contains("spec") && !j.at("spec").is_null() ? j.at("spec") : json::object();
  if (c.kind == "glyphs" && user.contains("modalities") && user.at("modalities").is_number_integer()) {
    GlyphDatasetSpec tmp;
    tmp.modalities = GlyphDatasetSpec::default_styles(user.at("modalities").get<int64_t>());
    user["modalities"] = tmp.to_json().at("modalities");
  }
  c.spec = overlay(default_dataset_spec(c.kind), user, "dataset.spec");
  // Round-trip through the typed spec so malformed values fail here.
  try {
    if (c.kind == "glyphs") GlyphDatasetSpec::from_json(c.spec).validate();
    if (c.kind == "polygon_views") PolygonViewsSpec::from_json(c.spec).validate();
    if (c.kind == "linear_gaussian") LinearGaussianSpec::from_json(c.spec).validate();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("dataset.spec: ") + e.what());
  }
  return c;
}

json EvalConfig::to_json() const {
  return {{"classifier", classifier.to_json()}, {"n_generate", n_generate}, {"guidance", guidance},
          {"k_correct", k_correct},             {"k_style", k_style},       {"baselines", baselines}};
}

EvalConfig EvalConfig::from_json(const json& j) {
  EvalConfig c;
  c.classifier = ClassifierConfig::from_json(j.at("classifier"));
  c.n_generate = j.at("n_generate").get<int64_t>();
  c.guidance = j.at("guidance").get<double>();
  c.k_correct = j.at("k_correct").get<int64_t>();
  c.k_style = j.at("k_style").get<int64_t>();
  c.baselines = j.at("baselines").get<std::vector<std::string>>();
  return c;
}

void ExperimentConfig::validate() const {
  stage1.validate();
  stage2.validate();
  if (model.latent_dim < 1) throw InvalidArgument("model.latent_dim must be positive");
  if (stage2.denoiser.latent_dim != model.latent_dim) {
    throw InvalidArgument("stage2.denoiser.latent_dim must equal model.latent_dim");
  }
  if (stage2.denoiser.cond_width > 0 && stage2.policy.source == ConditionSource::embedding &&
      stage2.denoiser.cond_width != model.encoder.embed_width) {
    throw InvalidArgument("stage2.denoiser.cond_width must equal model.encoder.embed_width for embedding conditioning");
  }
  if (eval.n_generate < 0) throw InvalidArgument("eval.n_generate must be non-negative");
  if (output_dir.empty()) throw InvalidArgument("output_dir must not be empty");
}

json ExperimentConfig::to_json() const {
  return {{"dataset", dataset.to_json()}, {"model", model.to_json()}, {"stage1", stage1.to_json()},
          {"stage2", stage2.to_json()},   {"eval", eval.to_json()},   {"output_dir", output_dir},
          {"seed", seed},                 {"stage1_digest", stage1_digest}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("config root must be an object");
  ExperimentConfig defaults;
  json schema = defaults.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!schema.contains(key)) throw InvalidArgument("unknown key 'config." + key + "'");
  }
  ExperimentConfig c;
  if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
  else c.dataset = DatasetConfig::from_json(json::object());
  c.model = parse_section<ModelConfig>(j, "model", "config");
  c.stage1 = parse_section<Stage1Config>(j, "stage1", "config");
  c.stage2 = parse_section<Stage2Config>(j, "stage2", "config");
  c.eval = parse_section<EvalConfig>(j, "eval", "config");
  try {
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
    c.stage1_digest = j.value("stage1_digest", c.stage1_digest);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw InvalidArgument("config file " + file.string() + " does not exist");
  json j;
  try {
    j = read_json_file(file);
  } catch (const json::exception& e) {
    throw InvalidArgument("config file " + file.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::digest() const { return json_digest(to_json()); }

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  const char* root = std::getenv(kOutputRootEnv);
  if (root != nullptr && *root != '\0' && p.is_relative()) return std::filesystem::path(root) / p;
  return p;
}

}  // namespace shala
