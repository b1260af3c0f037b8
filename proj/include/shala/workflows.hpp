#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "shala/dataset.hpp"
#include "shala/diffusion.hpp"
#include "shala/generator.hpp"

namespace shala {

enum class GenerationMode { joint, cross, correct, style, reconstruct };

GenerationMode parse_generation_mode(const std::string& name);
std::string to_string(GenerationMode m);

struct GenerationRequest {
  GenerationMode mode = GenerationMode::joint;
  /// Modalities treated as observed (cross) or uncorrupted (correct).
  std::vector<int64_t> observed;
  double guidance = 1.0;
  int64_t n = 16;
  uint64_t seed = 0;
  /// Forward steps before re-generation (correct and style only).
  int64_t k = 0;

  void validate(int64_t num_modalities, int64_t steps) const;
};

/// Enough to replay one generated row: rerunning the same request and taking
/// row `index` reproduces it bit for bit.
struct Provenance {
  GenerationMode mode = GenerationMode::joint;
  uint64_t seed = 0;
  int64_t k = 0;
  double guidance = 1.0;
  /// Conditioning modality, -1 for the null token.
  int64_t cond_modality = -1;
  int64_t index = 0;
  int64_t batch_size = 0;

  json to_json() const;
  static Provenance from_json(const json& j);
};

struct GenerationResult {
  Batch samples;            // decoded modalities, presence all true
  torch::Tensor latents;    // z0 that was decoded, [n, d]
  std::vector<Provenance> provenance;
  /// Denoiser passes per chain plus one decoder pass.
  int64_t nfe = 0;
};

/// Composes a trained stage-1 model with a trained latent prior. Every call
/// is a pure function of (parameters, inputs, seed).
class ShalaPipeline {
 public:
  ShalaPipeline(ShalaVae stage1, LatentPrior prior);

  GenerationResult joint_generate(int64_t n, double guidance, uint64_t seed);
  /// Conditions each row on one present modality chosen uniformly, then
  /// decodes every modality (observed ones included).
  GenerationResult cross_modal_generate(const Batch& partial, double guidance, uint64_t seed);
  /// z ~ q(z | corrupted), K forward steps, reverse conditioned on the first
  /// modality not flagged in `corrupted`.
  GenerationResult latent_correct(const Batch& corrupted, const std::vector<bool>& corrupted_flags, int64_t k,
                                  double guidance, uint64_t seed);
  /// z ~ q(z | source), K forward steps, reverse conditioned on a reference
  /// embedding chosen uniformly per row. K = T starts from a fresh N(0, I)
  /// state, which makes the output independent of the source.
  GenerationResult style_transfer(const Batch& source, const Batch& reference, int64_t k, double guidance,
                                  uint64_t seed);
  /// Decodes a posterior draw; latent_correct with K = 0 reduces to this.
  GenerationResult reconstruct(const Batch& batch, uint64_t seed);

  /// Dispatches a request. `inputs` is the partial/corrupted/source batch,
  /// `reference` the style reference.
  GenerationResult run(const GenerationRequest& request, const Batch* inputs = nullptr,
                       const Batch* reference = nullptr);

  /// Condition vector for modality i: the stage-1 embedding, or the raw
  /// condition encoder when the prior was trained on raw inputs.
  torch::Tensor condition(int64_t modality, const torch::Tensor& x);

  ShalaVae& stage1() { return stage1_; }
  LatentPrior& prior() { return prior_; }
  int64_t steps() const { return prior_->schedule().steps(); }

 private:
  torch::Tensor posterior_draw(const Batch& batch, Rng& rng);
  GenerationResult finish(const torch::Tensor& z, const Batch* labels_from, GenerationMode mode, uint64_t seed,
                          int64_t k, double guidance, const std::vector<int64_t>& cond, int64_t nfe);
  void check_k(int64_t k) const;

  ShalaVae stage1_;
  LatentPrior prior_;
  torch::ScalarType dtype_;
};

/// Writes the samples as a dataset directory, `provenance.jsonl`, and one
/// PPM grid per image modality (first `grid_rows` samples).
void write_generation(const GenerationResult& result, const std::vector<ModalityInfo>& infos, const json& manifest,
                      const std::filesystem::path& dir, int64_t grid_rows = 8);

/// Binary PPM (P6) of images [N, H, W, C] tiled in a row-major grid.
void write_image_grid(const torch::Tensor& images, int64_t columns, const std::filesystem::path& file);

}  // namespace shala
