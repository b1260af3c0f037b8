#include "shala/workflows.hpp"

#include <fstream>

#include "shala/archive.hpp"

namespace shala {

namespace {

// Independent streams per concern so that, for example, latent_correct with
// K = 0 draws the same posterior sample as reconstruct.
constexpr uint64_t kPosteriorStream = 1;
constexpr uint64_t kChoiceStream = 2;
constexpr uint64_t kDiffusionStream = 3;

Batch empty_batch(const std::vector<ModalityInfo>& infos, torch::ScalarType dtype) {
  Batch b;
  for (const auto& info : infos) {
    std::vector<int64_t> shape{0};
    shape.insert(shape.end(), info.shape.begin(), info.shape.end());
    b.x.push_back(torch::zeros(shape, torch::TensorOptions().dtype(dtype)));
  }
  b.labels = torch::zeros({0}, torch::kLong);
  b.presence = torch::zeros({0, static_cast<int64_t>(infos.size())}, torch::kBool);
  return b;
}

void check_batch(const Batch& batch, const std::vector<ModalityInfo>& infos, const char* what) {
  if (batch.num_modalities() != static_cast<int64_t>(infos.size())) {
    throw ShapeMismatch(std::string(what) + ": expected " + std::to_string(infos.size()) + " modalities, got " +
                        std::to_string(batch.num_modalities()));
  }
}

}  // namespace

GenerationMode parse_generation_mode(const std::string& name) {
  if (name == "joint") return GenerationMode::joint;
  if (name == "cross") return GenerationMode::cross;
  if (name == "correct") return GenerationMode::correct;
  if (name == "style") return GenerationMode::style;
  if (name == "reconstruct") return GenerationMode::reconstruct;
  throw InvalidArgument("unknown generation mode '" + name + "'");
}

std::string to_string(GenerationMode m) {
  switch (m) {
    case GenerationMode::joint: return "joint";
    case GenerationMode::cross: return "cross";
    case GenerationMode::correct: return "correct";
    case GenerationMode::style: return "style";
    case GenerationMode::reconstruct: return "reconstruct";
  }
  return "joint";
}

void GenerationRequest::validate(int64_t num_modalities, int64_t steps) const {
  if (n < 0) throw InvalidArgument("sample count must be non-negative");
  GuidanceConfig{guidance}.validate();
  for (auto i : observed) {
    if (i < 0 || i >= num_modalities) throw InvalidArgument("observed modality index out of range");
  }
  if (mode == GenerationMode::cross && observed.empty()) {
    throw InvalidArgument("cross-modal generation needs at least one observed modality");
  }
  if (mode == GenerationMode::correct && observed.empty()) {
    throw InvalidArgument("latent correction needs at least one uncorrupted modality");
  }
  if ((mode == GenerationMode::correct || mode == GenerationMode::style) && (k < 0 || k > steps)) {
    throw InvalidArgument("K must lie in [0, " + std::to_string(steps) + "]");
  }
}

json Provenance::to_json() const {
  return {{"mode", to_string(mode)}, {"seed", seed},   {"k", k},
          {"guidance", guidance},    {"cond_modality", cond_modality},
          {"index", index},          {"batch_size", batch_size}};
}

Provenance Provenance::from_json(const json& j) {
  Provenance p;
  p.mode = parse_generation_mode(j.at("mode").get<std::string>());
  p.seed = j.at("seed").get<uint64_t>();
  p.k = j.at("k").get<int64_t>();
  p.guidance = j.at("guidance").get<double>();
  p.cond_modality = j.at("cond_modality").get<int64_t>();
  p.index = j.at("index").get<int64_t>();
  p.batch_size = j.at("batch_size").get<int64_t>();
  return p;
}

ShalaPipeline::ShalaPipeline(ShalaVae stage1, LatentPrior prior)
    : stage1_(std::move(stage1)), prior_(std::move(prior)) {
  if (stage1_->latent_dim() != prior_->denoiser()->config().latent_dim) {
    throw ShapeMismatch("stage-1 latent width " + std::to_string(stage1_->latent_dim()) +
                        " does not match the prior's " + std::to_string(prior_->denoiser()->config().latent_dim));
  }
  dtype_ = stage1_->parameters().front().scalar_type();
  stage1_->eval();
  prior_->eval();
}

void ShalaPipeline::check_k(int64_t k) const {
  if (k < 0 || k > steps()) {
    throw InvalidArgument("K = " + std::to_string(k) + " outside [0, " + std::to_string(steps()) + "]");
  }
}

torch::Tensor ShalaPipeline::condition(int64_t modality, const torch::Tensor& x) {
  torch::NoGradGuard guard;
  if (prior_->policy().source == ConditionSource::raw) {
    return prior_->raw_encoder()->encode(modality, x.to(dtype_));
  }
  return stage1_->inference()->bank()->encode_modality(modality, x.to(dtype_));
}

torch::Tensor ShalaPipeline::posterior_draw(const Batch& batch, Rng& rng) {
  torch::NoGradGuard guard;
  auto q = stage1_->inference()->infer(batch.to(dtype_));
  return sample_posterior(q, rng);
}

GenerationResult ShalaPipeline::finish(const torch::Tensor& z, const Batch* labels_from, GenerationMode mode,
                                       uint64_t seed, int64_t k, double guidance, const std::vector<int64_t>& cond,
                                       int64_t nfe) {
  torch::NoGradGuard guard;
  GenerationResult out;
  const int64_t n = z.size(0);
  out.latents = z;
  out.samples.x = stage1_->decode(z);
  out.samples.labels = labels_from != nullptr ? labels_from->labels.clone() : torch::full({n}, -1, torch::kLong);
  out.samples.presence = torch::ones({n, static_cast<int64_t>(stage1_->infos().size())}, torch::kBool);
  out.nfe = nfe + 1;
  for (int64_t i = 0; i < n; ++i) {
    Provenance p;
    p.mode = mode;
    p.seed = seed;
    p.k = k;
    p.guidance = guidance;
    p.cond_modality = cond.empty() ? -1 : cond[static_cast<size_t>(i)];
    p.index = i;
    p.batch_size = n;
    out.provenance.push_back(p);
  }
  return out;
}

GenerationResult ShalaPipeline::joint_generate(int64_t n, double guidance, uint64_t seed) {
  if (n < 0) throw InvalidArgument("sample count must be non-negative");
  if (n == 0) {
    GenerationResult out;
    out.samples = empty_batch(stage1_->infos(), dtype_);
    out.latents = torch::zeros({0, stage1_->latent_dim()}, torch::TensorOptions().dtype(dtype_));
    out.nfe = steps() + 1;
    return out;
  }
  Rng rng = Rng(seed).split(kDiffusionStream);
  auto sample = sample_prior(prior_->denoiser(), prior_->schedule(), n, {}, guidance, rng);
  return finish(sample.z0, nullptr, GenerationMode::joint, seed, 0, guidance, {}, sample.nfe);
}

GenerationResult ShalaPipeline::cross_modal_generate(const Batch& partial, double guidance, uint64_t seed) {
  check_batch(partial, stage1_->infos(), "cross_modal_generate");
  const int64_t n = partial.size();
  const int64_t m = partial.num_modalities();
  Rng choice = Rng(seed).split(kChoiceStream);
  auto pres = partial.presence.to(torch::kBool).contiguous();
  auto acc = pres.accessor<bool, 2>();
  std::vector<int64_t> chosen(static_cast<size_t>(n));
  std::vector<int64_t> present;
  for (int64_t r = 0; r < n; ++r) {
    present.clear();
    for (int64_t j = 0; j < m; ++j) {
      if (acc[r][j]) present.push_back(j);
    }
    if (present.empty()) {
      throw InvalidArgument("cross-modal generation needs at least one present modality (row " +
                            std::to_string(r) + ")");
    }
    chosen[static_cast<size_t>(r)] =
        present[static_cast<size_t>(choice.uniform_int(static_cast<int64_t>(present.size())))];
  }
  torch::Tensor cond;
  if (n > 0) {
    std::vector<torch::Tensor> all;
    for (int64_t j = 0; j < m; ++j) all.push_back(condition(j, partial.x[static_cast<size_t>(j)]));
    auto stacked = torch::stack(all, 0);
    auto idx = torch::tensor(chosen, torch::kLong).view({1, n, 1}).expand({1, n, stacked.size(2)});
    cond = stacked.gather(0, idx).squeeze(0);
  }
  Rng rng = Rng(seed).split(kDiffusionStream);
  auto sample = sample_prior(prior_->denoiser(), prior_->schedule(), n, cond, guidance, rng);
  return finish(sample.z0, &partial, GenerationMode::cross, seed, 0, guidance, chosen, sample.nfe);
}

GenerationResult ShalaPipeline::reconstruct(const Batch& batch, uint64_t seed) {
  check_batch(batch, stage1_->infos(), "reconstruct");
  Rng rng = Rng(seed).split(kPosteriorStream);
  auto z = posterior_draw(batch, rng);
  return finish(z, &batch, GenerationMode::reconstruct, seed, 0, 0.0, {}, 0);
}

GenerationResult ShalaPipeline::latent_correct(const Batch& corrupted, const std::vector<bool>& corrupted_flags,
                                               int64_t k, double guidance, uint64_t seed) {
  check_batch(corrupted, stage1_->infos(), "latent_correct");
  check_k(k);
  if (static_cast<int64_t>(corrupted_flags.size()) != corrupted.num_modalities()) {
    throw InvalidArgument("corruption flags must have one entry per modality");
  }
  int64_t anchor = -1;
  for (size_t j = 0; j < corrupted_flags.size(); ++j) {
    if (!corrupted_flags[j]) {
      anchor = static_cast<int64_t>(j);
      break;
    }
  }
  if (anchor < 0) throw InvalidArgument("latent correction needs an uncorrupted modality");

  Rng post = Rng(seed).split(kPosteriorStream);
  auto z = posterior_draw(corrupted, post);
  const int64_t n = corrupted.size();
  std::vector<int64_t> cond_idx(static_cast<size_t>(n), anchor);
  if (k == 0) return finish(z, &corrupted, GenerationMode::correct, seed, 0, guidance, cond_idx, 0);

  Rng rng = Rng(seed).split(kDiffusionStream);
  auto z_k = forward_marginal(z, k, prior_->schedule(), rng);
  auto cond = condition(anchor, corrupted.x[static_cast<size_t>(anchor)]);
  auto sample = sample_prior(prior_->denoiser(), prior_->schedule(), n, cond, guidance, rng, k, z_k);
  return finish(sample.z0, &corrupted, GenerationMode::correct, seed, k, guidance, cond_idx, sample.nfe);
}

GenerationResult ShalaPipeline::style_transfer(const Batch& source, const Batch& reference, int64_t k,
                                               double guidance, uint64_t seed) {
  check_batch(source, stage1_->infos(), "style_transfer source");
  check_batch(reference, stage1_->infos(), "style_transfer reference");
  check_k(k);
  if (source.size() != reference.size()) throw ShapeMismatch("source and reference batches differ in size");
  if (!source.presence.all().item<bool>() || !reference.presence.all().item<bool>()) {
    throw InvalidArgument("style transfer needs complete source and reference samples");
  }
  const int64_t n = source.size();
  const int64_t m = source.num_modalities();
  Rng post = Rng(seed).split(kPosteriorStream);
  auto z = posterior_draw(source, post);
  if (k == 0) return finish(z, &source, GenerationMode::style, seed, 0, guidance, {}, 0);

  Rng choice = Rng(seed).split(kChoiceStream);
  std::vector<int64_t> chosen(static_cast<size_t>(n));
  for (auto& c : chosen) c = choice.uniform_int(m);
  std::vector<torch::Tensor> all;
  for (int64_t j = 0; j < m; ++j) all.push_back(condition(j, reference.x[static_cast<size_t>(j)]));
  auto stacked = torch::stack(all, 0);
  auto idx = torch::tensor(chosen, torch::kLong).view({1, n, 1}).expand({1, n, stacked.size(2)});
  auto cond = stacked.gather(0, idx).squeeze(0);

  Rng rng = Rng(seed).split(kDiffusionStream);
  torch::Tensor z_k = k == steps() ? rng.normal(z.sizes(), z.scalar_type())
                                   : forward_marginal(z, k, prior_->schedule(), rng);
  auto sample = sample_prior(prior_->denoiser(), prior_->schedule(), n, cond, guidance, rng, k, z_k);
  return finish(sample.z0, &source, GenerationMode::style, seed, k, guidance, chosen, sample.nfe);
}

GenerationResult ShalaPipeline::run(const GenerationRequest& request, const Batch* inputs, const Batch* reference) {
  request.validate(static_cast<int64_t>(stage1_->infos().size()), steps());
  auto need = [&](const Batch* b, const char* what) -> const Batch& {
    if (b == nullptr) throw InvalidArgument(std::string(to_string(request.mode)) + " mode needs " + what);
    return *b;
  };
  switch (request.mode) {
    case GenerationMode::joint:
      return joint_generate(request.n, request.guidance, request.seed);
    case GenerationMode::cross: {
      Batch partial = need(inputs, "an input batch");
      auto mask = torch::zeros({partial.num_modalities()}, torch::kBool);
      for (auto i : request.observed) mask[i] = true;
      partial.presence = partial.presence.to(torch::kBool) & mask.unsqueeze(0);
      return cross_modal_generate(partial, request.guidance, request.seed);
    }
    case GenerationMode::correct: {
      const auto& batch = need(inputs, "a corrupted batch");
      std::vector<bool> flags(static_cast<size_t>(batch.num_modalities()), true);
      for (auto i : request.observed) flags[static_cast<size_t>(i)] = false;
      return latent_correct(batch, flags, request.k, request.guidance, request.seed);
    }
    case GenerationMode::style:
      return style_transfer(need(inputs, "a source batch"), need(reference, "a reference batch"), request.k,
                            request.guidance, request.seed);
    case GenerationMode::reconstruct:
      return reconstruct(need(inputs, "an input batch"), request.seed);
  }
  throw InvalidArgument("unsupported generation mode");
}

void write_image_grid(const torch::Tensor& images, int64_t columns, const std::filesystem::path& file) {
  if (images.dim() != 4) throw ShapeMismatch("image grid expects [N, H, W, C]");
  const int64_t n = images.size(0), h = images.size(1), w = images.size(2), c = images.size(3);
  if (c != 1 && c != 3) throw ShapeMismatch("image grid supports 1 or 3 channels");
  const int64_t cols = std::max<int64_t>(1, std::min(columns, std::max<int64_t>(n, 1)));
  const int64_t rows = n == 0 ? 1 : (n + cols - 1) / cols;
  const int64_t pad = 1;
  const int64_t gw = cols * (w + pad) + pad, gh = rows * (h + pad) + pad;
  auto px = (images.to(torch::kDouble).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  if (c == 1) px = px.expand({n, h, w, 3}).contiguous();
  std::vector<uint8_t> canvas(static_cast<size_t>(gw * gh * 3), 40);
  const auto* src = px.data_ptr<uint8_t>();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t oy = pad + (i / cols) * (h + pad), ox = pad + (i % cols) * (w + pad);
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        for (int64_t ch = 0; ch < 3; ++ch) {
          canvas[static_cast<size_t>(((oy + y) * gw + ox + x) * 3 + ch)] = src[((i * h + y) * w + x) * 3 + ch];
        }
      }
    }
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << "P6\n" << gw << " " << gh << "\n255\n";
  out.write(reinterpret_cast<const char*>(canvas.data()), static_cast<std::streamsize>(canvas.size()));
}

void write_generation(const GenerationResult& result, const std::vector<ModalityInfo>& infos, const json& manifest,
                      const std::filesystem::path& dir, int64_t grid_rows) {
  std::filesystem::create_directories(dir);
  Dataset ds(infos, result.samples.to(torch::kFloat), manifest);
  persist_dataset(ds, dir / "samples");
  {
    std::ofstream prov(dir / "provenance.jsonl");
    for (const auto& p : result.provenance) prov << p.to_json().dump() << "\n";
  }
  json grids = json::array();
  constexpr int64_t kColumns = 8;
  for (size_t i = 0; i < infos.size(); ++i) {
    if (infos[i].kind != ModalityKind::image) continue;
    const auto& x = result.samples.x[i];
    const int64_t take = std::min<int64_t>(x.size(0), grid_rows * kColumns);
    const auto name = "grid_" + std::to_string(i) + ".ppm";
    write_image_grid(x.slice(0, 0, take), kColumns, dir / name);
    grids.push_back(name);
  }
  json summary = {{"samples", result.samples.size()}, {"nfe", result.nfe}, {"grids", grids},
                  {"manifest", manifest}};
  write_json_file(summary, dir / "generation.json");
}

}  // namespace shala
