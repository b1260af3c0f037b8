#include <cmath>
#include <sstream>

#include "shala/suites.hpp"
#include "suite_support.hpp"

namespace shala {

namespace {

// Budgets shared by every image suite so the compared pipelines always see
// the same data, iterations and batch sizes.
struct ImageBudget {
  int64_t latent_dim = 16;
  int64_t embed_width = 64;
  int64_t stage1_iterations = 3000;
  int64_t stage2_iterations = 8000;
  int64_t batch_size = 64;
  double guidance = 1.0;
  double obs_scale = 0.1;
};

ModelConfig image_model_config(const ImageBudget& b, FusionVariant variant) {
  ModelConfig cfg;
  cfg.latent_dim = b.latent_dim;
  cfg.encoder.embed_width = b.embed_width;
  cfg.encoder.conv_channels = {16, 32};
  cfg.encoder.hidden = {128};
  cfg.fusion.variant = variant;
  cfg.fusion.fused_width = 128;
  cfg.fusion.layers = 2;
  cfg.decoder.conv_channels = {32, 16};
  cfg.decoder.hidden = {128};
  cfg.decoder.obs_scale = b.obs_scale;
  return cfg;
}

Stage1Config image_stage1_config(const ImageBudget& b, uint64_t seed) {
  Stage1Config s;
  s.iterations = b.stage1_iterations;
  s.batch_size = b.batch_size;
  s.lr_theta = 1e-3;
  s.lr_phi = 1e-3;
  s.log_every = 100;
  s.seed = seed;
  return s;
}

Stage2Config image_stage2_config(const ImageBudget& b, ConditionSource source, uint64_t seed) {
  Stage2Config s;
  s.iterations = b.stage2_iterations;
  s.batch_size = 256;
  s.lr_beta = 1e-3;
  s.steps = 250;
  s.policy.source = source;
  s.policy.drop_probability = 0.1;
  s.denoiser.latent_dim = b.latent_dim;
  s.denoiser.cond_width = b.embed_width;
  s.denoiser.hidden = 256;
  s.denoiser.blocks = 3;
  s.denoiser.time_width = 64;
  s.guidance = b.guidance;
  s.log_every = 200;
  s.seed = seed;
  return s;
}

ShalaVae train_shala_stage1(const Dataset& train, const ModelConfig& cfg, const Stage1Config& s1, uint64_t init,
                            detail::SuiteContext& ctx, const std::string& tag) {
  torch::manual_seed(init);
  ShalaVae model(train.infos(), cfg);
  auto report = train_stage1(model, train, s1);
  if (report.status != TrainStatus::completed) throw NumericalError(tag + " stage-1 diverged: " + report.diagnostics);
  ctx.record(tag + ".stage1_final_loss", report.curve.back().loss, s1.iterations);
  return model;
}

LatentPrior train_shala_prior(ShalaVae& stage1, const Dataset& train, const Stage2Config& s2, uint64_t init,
                              detail::SuiteContext& ctx, const std::string& tag) {
  torch::manual_seed(init);
  LatentPrior prior(build_schedule(s2.steps, s2.schedule), s2.denoiser, s2.policy, train.infos());
  auto report = train_stage2(prior, stage1, train, s2);
  if (report.status != TrainStatus::completed) throw NumericalError(tag + " stage-2 diverged: " + report.diagnostics);
  ctx.record(tag + ".stage2_final_loss", report.curve.back().loss, s2.iterations);
  return prior;
}

ExpertsVae train_moe(const Dataset& train, const ModelConfig& cfg, const Stage1Config& s1, uint64_t init,
                     detail::SuiteContext& ctx, const std::string& tag) {
  torch::manual_seed(init);
  ExpertsVae model(train.infos(), cfg, ExpertCombination::moe);
  auto report = train_experts_vae(model, train, s1);
  if (report.status != TrainStatus::completed) throw NumericalError(tag + " baseline diverged: " + report.diagnostics);
  ctx.record(tag + ".moe_final_loss", report.curve.back().loss, s1.iterations);
  return model;
}

std::vector<ToyClassifier> train_classifiers(const Dataset& clean, int64_t classes, uint64_t seed,
                                             detail::SuiteContext& ctx, const std::string& tag) {
  std::vector<ToyClassifier> out;
  for (int64_t i = 0; i < clean.num_modalities(); ++i) {
    ClassifierConfig cfg;
    cfg.seed = mix_seed(seed, static_cast<uint64_t>(i));
    ClassifierReport rep;
    out.push_back(train_toy_classifier(clean, i, classes, cfg, &rep));
    ctx.record(tag + ".classifier_accuracy_" + std::to_string(i), rep.holdout_accuracy, rep.holdout_size);
  }
  return out;
}

/// Partial batch with only modality i flagged present.
Batch only_modality(const Batch& batch, int64_t i) {
  Batch out = batch;
  out.presence = torch::zeros_like(batch.presence, torch::kBool);
  out.presence.select(1, i).fill_(true);
  return out;
}

Batch decoded_batch(std::vector<torch::Tensor> x, int64_t m) {
  Batch b;
  b.x = std::move(x);
  const int64_t n = b.x.front().size(0);
  b.labels = torch::full({n}, -1, torch::kLong);
  b.presence = torch::ones({n, m}, torch::kBool);
  return b;
}

double shala_conditional_coherence(ShalaPipeline& pipe, const Batch& eval, std::vector<ToyClassifier>& clf,
                                   double guidance, uint64_t seed) {
  const int64_t m = eval.num_modalities();
  auto observed = classify_batch(clf, eval);
  std::vector<std::pair<torch::Tensor, torch::Tensor>> pairs;
  for (int64_t i = 0; i < m; ++i) {
    auto res = pipe.cross_modal_generate(only_modality(eval, i), guidance, mix_seed(seed, static_cast<uint64_t>(i)));
    auto pred = classify_batch(clf, res.samples);
    for (int64_t j = 0; j < m; ++j) {
      if (j != i) pairs.emplace_back(observed[static_cast<size_t>(i)], pred[static_cast<size_t>(j)]);
    }
  }
  return conditional_coherence(pairs);
}

double moe_conditional_coherence(ExpertsVae& moe, const Batch& eval, std::vector<ToyClassifier>& clf,
                                 uint64_t seed) {
  torch::NoGradGuard guard;
  moe->eval();
  const int64_t m = eval.num_modalities();
  auto observed = classify_batch(clf, eval);
  std::vector<std::pair<torch::Tensor, torch::Tensor>> pairs;
  for (int64_t i = 0; i < m; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    auto z = moe->sample_latent(only_modality(eval, i), rng);
    auto pred = classify_batch(clf, decoded_batch(moe->decode(z), m));
    for (int64_t j = 0; j < m; ++j) {
      if (j != i) pairs.emplace_back(observed[static_cast<size_t>(i)], pred[static_cast<size_t>(j)]);
    }
  }
  return conditional_coherence(pairs);
}

/// Mean over modalities of the Fréchet distance in classifier feature space.
double mean_frechet(std::vector<ToyClassifier>& clf, const Batch& generated, const Batch& real) {
  double total = 0.0;
  for (size_t i = 0; i < clf.size(); ++i) {
    total += frechet_distance(classifier_features(clf[i], generated.x[i]), classifier_features(clf[i], real.x[i]));
  }
  return total / static_cast<double>(clf.size());
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

GlyphDatasetSpec glyph_spec(int64_t n, uint64_t seed) {
  GlyphDatasetSpec spec;
  spec.n_samples = n;
  spec.modalities = GlyphDatasetSpec::default_styles(3);
  spec.seed = seed;
  return spec;
}

}  // namespace

SuiteReport run_glyph_suite(const SuiteOptions& options) {
  detail::SuiteContext ctx("glyphs", options);
  const uint64_t seed = options.seed;
  ImageBudget budget;

  auto train = make_glyph_dataset(glyph_spec(6000, mix_seed(seed, 1)));
  auto eval_set = make_glyph_dataset(glyph_spec(1000, mix_seed(seed, 2)));
  auto clean = make_glyph_dataset(glyph_spec(5000, mix_seed(seed, 3)));
  const auto& eval = eval_set.data();
  const int64_t m = train.num_modalities();
  auto clf = train_classifiers(clean, 10, mix_seed(seed, 4), ctx, "glyphs");
  ctx.record("glyphs.ground_truth_joint_coherence", joint_coherence(classify_batch(clf, eval)), eval.size());

  auto cfg = image_model_config(budget, FusionVariant::concat);
  auto s1 = image_stage1_config(budget, mix_seed(seed, 5));
  auto stage1 = train_shala_stage1(train, cfg, s1, mix_seed(seed, 6), ctx, "glyphs");
  auto s2 = image_stage2_config(budget, ConditionSource::embedding, mix_seed(seed, 7));
  auto prior = train_shala_prior(stage1, train, s2, mix_seed(seed, 8), ctx, "glyphs");
  auto moe = train_moe(train, cfg, s1, mix_seed(seed, 9), ctx, "glyphs");
  ShalaPipeline pipe(stage1, prior);

  // Joint generation: learned prior against N(0, I) through the same decoders.
  const int64_t n_gen = 1000;
  auto joint = pipe.joint_generate(n_gen, budget.guidance, mix_seed(seed, 10));
  Batch gaussian_joint;
  {
    torch::NoGradGuard guard;
    Rng rng(mix_seed(seed, 11));
    gaussian_joint = decoded_batch(stage1->decode(rng.normal({n_gen, budget.latent_dim})), m);
  }
  const double coh_shala = joint_coherence(classify_batch(clf, joint.samples));
  const double coh_gauss = joint_coherence(classify_batch(clf, gaussian_joint));
  ctx.record("glyphs.joint_coherence.shala", coh_shala, n_gen, {{"estimator", "all-agree"}});
  ctx.record("glyphs.joint_coherence.stage1_gaussian", coh_gauss, n_gen, {{"estimator", "all-agree"}});

  const double cc_shala = shala_conditional_coherence(pipe, eval, clf, budget.guidance, mix_seed(seed, 12));
  const double cc_moe = moe_conditional_coherence(moe, eval, clf, mix_seed(seed, 13));
  ctx.record("glyphs.conditional_coherence.shala", cc_shala, eval.size(), {{"estimator", "pairwise macro"}});
  ctx.record("glyphs.conditional_coherence.moe", cc_moe, eval.size(), {{"estimator", "pairwise macro"}});

  ctx.criterion(5, "coherence orderings",
                coh_shala - coh_gauss >= 0.05 && cc_shala - cc_moe >= 0.05 && ctx.elapsed() < 1800.0,
                std::min(coh_shala - coh_gauss, cc_shala - cc_moe), 0.05,
                "joint " + fmt(coh_shala) + " vs N(0,I) " + fmt(coh_gauss) + "; conditional " + fmt(cc_shala) +
                    " vs MoE " + fmt(cc_moe));

  const double fid_shala = mean_frechet(clf, joint.samples, eval);
  const double fid_gauss = mean_frechet(clf, gaussian_joint, eval);
  ctx.record("glyphs.frechet.shala", fid_shala, n_gen, {{"features", "classifier penultimate"}});
  ctx.record("glyphs.frechet.stage1_gaussian", fid_gauss, n_gen, {{"features", "classifier penultimate"}});
  ctx.criterion(6, "Fréchet ordering", fid_shala < fid_gauss, fid_shala, fid_gauss,
                "learned prior " + fmt(fid_shala) + " < N(0,I) " + fmt(fid_gauss));

  {
    // Prior-hole diagnostics in latent space.
    auto agg = infer_dataset(stage1, eval_set).mean;
    ctx.record("glyphs.prior_gap.aggregated_vs_standard", prior_gap(agg), eval.size(),
               {{"estimator", "moment-matched Gaussian KL"}});
    ctx.record("glyphs.prior_gap.prior_samples_vs_aggregated", fitted_gap(joint.latents, agg), n_gen,
               {{"estimator", "moment-matched Gaussian KL"}});
  }

  // Latent correction for 1..M-1 swapped modalities.
  const int64_t k_correct = pipe.steps() / 4;
  bool correct_ok = true;
  std::string correct_detail;
  double worst_gain = 1.0;
  for (int64_t c = 1; c < m; ++c) {
    std::vector<bool> mask(static_cast<size_t>(m), false);
    for (int64_t j = m - c; j < m; ++j) mask[static_cast<size_t>(j)] = true;
    Rng crng(mix_seed(seed, 20 + static_cast<uint64_t>(c)));
    auto corrupted = corrupt_batch(eval, mask, CorruptionMode::swap, crng, &eval_set);
    const double before = joint_coherence(classify_batch(clf, corrupted));
    auto recon = pipe.latent_correct(corrupted, mask, 0, budget.guidance, mix_seed(seed, 30));
    auto fixed = pipe.latent_correct(corrupted, mask, k_correct, budget.guidance, mix_seed(seed, 30));
    const double recon_coh = joint_coherence(classify_batch(clf, recon.samples));
    const double after = joint_coherence(classify_batch(clf, fixed.samples));
    const auto tag = "glyphs.correction." + std::to_string(c) + "_corrupted";
    ctx.record(tag + ".corrupted", before, eval.size());
    ctx.record(tag + ".reconstruction", recon_coh, eval.size());
    ctx.record(tag + ".corrected", after, eval.size(), {{"k", k_correct}});
    correct_ok = correct_ok && after > before;
    worst_gain = std::min(worst_gain, after - before);
    correct_detail += std::to_string(c) + " corrupted: " + fmt(before) + " -> " + fmt(after) + "; ";
  }

  // Style-transfer sweep: structure similarity to the source as K grows.
  const int64_t pairs = 100;
  auto src = eval.select(torch::arange(0, pairs, torch::kLong));
  auto ref = eval.select(torch::arange(pairs, 2 * pairs, torch::kLong));
  std::vector<int64_t> ks;
  for (int64_t q = 0; q <= 8; ++q) ks.push_back(pipe.steps() * q / 8);
  std::vector<std::vector<double>> sweeps(static_cast<size_t>(pairs));
  std::vector<double> mean_curve;
  // Each pair's expected score is estimated from a few independent draws.
  constexpr int64_t kDraws = 4;
  for (auto k : ks) {
    auto score = torch::zeros({pairs}, torch::kDouble);
    for (int64_t r = 0; r < kDraws; ++r) {
      auto out = pipe.style_transfer(src, ref, k, budget.guidance, mix_seed(seed, 40 + static_cast<uint64_t>(r)));
      for (int64_t j = 0; j < m; ++j) {
        score += ssim_per_image(out.samples.x[static_cast<size_t>(j)], src.x[static_cast<size_t>(j)]);
      }
    }
    score /= static_cast<double>(m * kDraws);
    for (int64_t p = 0; p < pairs; ++p) sweeps[static_cast<size_t>(p)].push_back(score[p].item<double>());
    mean_curve.push_back(score.mean().item<double>());
    ctx.record("glyphs.style.ssim_to_source.k" + std::to_string(k), mean_curve.back(), pairs);
  }
  {
    // Default-K transfer: which tuple's class the output follows. Glyph
    // colours are fixed per modality, so class is the main thing an embedding
    // can carry across.
    auto out = pipe.style_transfer(src, ref, pipe.steps() / 4, budget.guidance, mix_seed(seed, 50));
    auto pred = classify_batch(clf, out.samples);
    double to_src = 0.0, to_ref = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      to_src += label_agreement(pred[static_cast<size_t>(j)], src.labels);
      to_ref += label_agreement(pred[static_cast<size_t>(j)], ref.labels);
    }
    const json k_detail = {{"k", pipe.steps() / 4}};
    ctx.record("glyphs.style.label_agreement.source", to_src / static_cast<double>(m), pairs, k_detail);
    ctx.record("glyphs.style.label_agreement.reference", to_ref / static_cast<double>(m), pairs, k_detail);
  }
  constexpr double kSweepTolerance = 0.05;
  const double violations = monotone_violation_rate(sweeps, kSweepTolerance);
  ctx.record("glyphs.style.violation_rate", violations, pairs, {{"tolerance", kSweepTolerance}});
  ctx.criterion(8, "workflow properties", correct_ok && violations <= 0.05, violations, 0.05,
                correct_detail + "style sweep violations " + fmt(violations) + " <= 0.05");

  ctx.record("glyphs.nfe.joint", static_cast<double>(joint.nfe), n_gen);
  ctx.criterion(10, "NFE accounting", joint.nfe == 251, static_cast<double>(joint.nfe), 251.0,
                "denoiser passes " + std::to_string(joint.nfe - 1) + " + 1 decode");
  return ctx.finish();
}

SuiteReport run_multiview_suite(const SuiteOptions& options) {
  detail::SuiteContext ctx("multiview", options);
  const uint64_t seed = options.seed;
  ImageBudget budget;
  budget.stage1_iterations = 2500;
  budget.stage2_iterations = 6000;

  struct ViewScores {
    double psnr_shala, ssim_shala, psnr_moe, ssim_moe;
  };
  auto run_views = [&](int64_t views) {
    const auto tag = "multiview.v" + std::to_string(views);
    PolygonViewsSpec spec;
    spec.n_views = views;
    spec.n_samples = 5000;
    spec.seed = mix_seed(seed, 100 + static_cast<uint64_t>(views));
    auto train = make_polygon_views_dataset(spec);
    spec.n_samples = 500;
    spec.seed = mix_seed(seed, 200 + static_cast<uint64_t>(views));
    auto eval_set = make_polygon_views_dataset(spec);
    const auto& eval = eval_set.data();

    auto cfg = image_model_config(budget, FusionVariant::concat);
    auto s1 = image_stage1_config(budget, mix_seed(seed, 300 + static_cast<uint64_t>(views)));
    auto stage1 = train_shala_stage1(train, cfg, s1, mix_seed(seed, 400 + static_cast<uint64_t>(views)), ctx, tag);
    auto s2 = image_stage2_config(budget, ConditionSource::embedding, mix_seed(seed, 500 + static_cast<uint64_t>(views)));
    auto prior = train_shala_prior(stage1, train, s2, mix_seed(seed, 600 + static_cast<uint64_t>(views)), ctx, tag);
    auto moe = train_moe(train, cfg, s1, mix_seed(seed, 700 + static_cast<uint64_t>(views)), ctx, tag);
    ShalaPipeline pipe(stage1, prior);

    // Observe view 0, generate the remaining views.
    auto shala_out = pipe.cross_modal_generate(only_modality(eval, 0), budget.guidance, mix_seed(seed, 800));
    std::vector<torch::Tensor> moe_x;
    {
      torch::NoGradGuard guard;
      moe->eval();
      Rng rng(mix_seed(seed, 900));
      moe_x = moe->decode(moe->sample_latent(only_modality(eval, 0), rng));
    }
    ViewScores s{0, 0, 0, 0};
    for (int64_t j = 1; j < views; ++j) {
      const auto& truth = eval.x[static_cast<size_t>(j)];
      s.psnr_shala += psnr_per_image(shala_out.samples.x[static_cast<size_t>(j)], truth).mean().item<double>();
      s.ssim_shala += ssim(shala_out.samples.x[static_cast<size_t>(j)], truth);
      s.psnr_moe += psnr_per_image(moe_x[static_cast<size_t>(j)], truth).mean().item<double>();
      s.ssim_moe += ssim(moe_x[static_cast<size_t>(j)], truth);
    }
    const double norm = static_cast<double>(views - 1);
    s.psnr_shala /= norm;
    s.ssim_shala /= norm;
    s.psnr_moe /= norm;
    s.ssim_moe /= norm;
    ctx.record(tag + ".psnr.shala", s.psnr_shala, eval.size());
    ctx.record(tag + ".ssim.shala", s.ssim_shala, eval.size());
    ctx.record(tag + ".psnr.moe", s.psnr_moe, eval.size());
    ctx.record(tag + ".ssim.moe", s.ssim_moe, eval.size());
    return s;
  };

  auto v3 = run_views(3);
  auto v8 = run_views(8);
  const double drop_shala = v3.psnr_shala - v8.psnr_shala;
  const double drop_moe = v3.psnr_moe - v8.psnr_moe;
  ctx.record("multiview.psnr_drop.shala", drop_shala, 2);
  ctx.record("multiview.psnr_drop.moe", drop_moe, 2);
  const bool pass = v8.psnr_shala > v8.psnr_moe && v8.ssim_shala > v8.ssim_moe && drop_shala < drop_moe;
  ctx.criterion(7, "multi-view scaling", pass, v8.psnr_shala - v8.psnr_moe, 0.0,
                "V=8 PSNR " + fmt(v8.psnr_shala) + " vs MoE " + fmt(v8.psnr_moe) + ", SSIM " + fmt(v8.ssim_shala) +
                    " vs " + fmt(v8.ssim_moe) + "; PSNR drop V3->V8 " + fmt(drop_shala) + " vs MoE " +
                    fmt(drop_moe));
  return ctx.finish();
}

SuiteReport run_ablation_suite(const SuiteOptions& options) {
  detail::SuiteContext ctx("ablations", options);
  const uint64_t seed = options.seed;
  ImageBudget budget;

  auto train = make_glyph_dataset(glyph_spec(6000, mix_seed(seed, 1)));
  auto eval_set = make_glyph_dataset(glyph_spec(1000, mix_seed(seed, 2)));
  auto clean = make_glyph_dataset(glyph_spec(5000, mix_seed(seed, 3)));
  const auto& eval = eval_set.data();
  const int64_t m = train.num_modalities();
  auto clf = train_classifiers(clean, 10, mix_seed(seed, 4), ctx, "ablations");

  // Conditioning source: stage-1 embeddings against freshly encoded raw inputs.
  auto cfg = image_model_config(budget, FusionVariant::concat);
  auto s1 = image_stage1_config(budget, mix_seed(seed, 5));
  auto stage1 = train_shala_stage1(train, cfg, s1, mix_seed(seed, 6), ctx, "ablations.concat");
  double cc_embedding = 0.0, cc_raw = 0.0, joint_embedding = 0.0, joint_raw = 0.0;
  for (auto source : {ConditionSource::embedding, ConditionSource::raw}) {
    const auto tag = "ablations.source_" + to_string(source);
    auto s2 = image_stage2_config(budget, source, mix_seed(seed, 7));
    auto prior = train_shala_prior(stage1, train, s2, mix_seed(seed, 8), ctx, tag);
    ShalaPipeline pipe(stage1, prior);
    const double cc = shala_conditional_coherence(pipe, eval, clf, budget.guidance, mix_seed(seed, 12));
    auto joint = pipe.joint_generate(1000, budget.guidance, mix_seed(seed, 10));
    const double jc = joint_coherence(classify_batch(clf, joint.samples));
    ctx.record(tag + ".conditional_coherence", cc, eval.size());
    ctx.record(tag + ".joint_coherence", jc, 1000);
    (source == ConditionSource::embedding ? cc_embedding : cc_raw) = cc;
    (source == ConditionSource::embedding ? joint_embedding : joint_raw) = jc;
  }
  ctx.criterion(9, "conditioning ablation", cc_embedding > cc_raw, cc_embedding - cc_raw, 0.0,
                "embedding " + fmt(cc_embedding) + " vs raw " + fmt(cc_raw) + " conditional coherence; joint " +
                    fmt(joint_embedding) + " vs " + fmt(joint_raw));

  // Fusion variants, reported only.
  for (auto variant : {FusionVariant::sum, FusionVariant::gated}) {
    const auto tag = "ablations.fusion_" + to_string(variant);
    auto vcfg = image_model_config(budget, variant);
    auto vstage1 = train_shala_stage1(train, vcfg, s1, mix_seed(seed, 6), ctx, tag);
    auto s2 = image_stage2_config(budget, ConditionSource::embedding, mix_seed(seed, 7));
    auto prior = train_shala_prior(vstage1, train, s2, mix_seed(seed, 8), ctx, tag);
    ShalaPipeline pipe(vstage1, prior);
    ctx.record(tag + ".conditional_coherence",
               shala_conditional_coherence(pipe, eval, clf, budget.guidance, mix_seed(seed, 12)), eval.size());
    auto joint = pipe.joint_generate(1000, budget.guidance, mix_seed(seed, 10));
    ctx.record(tag + ".joint_coherence", joint_coherence(classify_batch(clf, joint.samples)), 1000);
  }
  ctx.record("ablations.fusion_concat.conditional_coherence", cc_embedding, eval.size());
  ctx.record("ablations.fusion_concat.joint_coherence", joint_embedding, 1000);
  (void)m;
  return ctx.finish();
}

}  // namespace shala
