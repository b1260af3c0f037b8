#include "shala/commands.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "shala/archive.hpp"
#include "shala/checkpoint.hpp"
#include "shala/datagen.hpp"
#include "shala/suites.hpp"

namespace shala {

namespace {

json infos_to_json(const std::vector<ModalityInfo>& infos) {
  json out = json::array();
  for (const auto& i : infos) out.push_back({{"name", i.name}, {"kind", to_string(i.kind)}, {"shape", i.shape}});
  return out;
}

std::vector<ModalityInfo> infos_from_json(const json& j) {
  std::vector<ModalityInfo> out;
  for (const auto& e : j) {
    out.push_back({e.at("name").get<std::string>(), parse_modality_kind(e.at("kind").get<std::string>()),
                   e.at("shape").get<std::vector<int64_t>>()});
  }
  return out;
}

/// What a bundle needs to rebuild its module without regenerating data.
json bundle_config(const ExperimentConfig& config, const Dataset& dataset, torch::ScalarType dtype) {
  return {{"experiment", config.to_json()}, {"infos", infos_to_json(dataset.infos())}, {"dtype", dtype_name(dtype)}};
}

struct LoadedRun {
  ExperimentConfig config;
  std::vector<ModalityInfo> infos;
  torch::ScalarType dtype = torch::kFloat;
  CheckpointBundle stage1_bundle;
  ShalaVae stage1{nullptr};
};

LoadedRun load_stage1(const std::filesystem::path& dir) {
  LoadedRun run;
  run.stage1_bundle = load_bundle(dir);
  if (run.stage1_bundle.stage != StageTag::stage1) throw InvalidArgument(dir.string() + " is not a stage1 bundle");
  const auto& c = run.stage1_bundle.config;
  run.config = ExperimentConfig::from_json(c.at("experiment"));
  run.infos = infos_from_json(c.at("infos"));
  run.dtype = parse_dtype(c.at("dtype").get<std::string>());
  run.stage1 = ShalaVae(run.infos, run.config.model);
  run.stage1->to(run.dtype);
  load_into(run.stage1_bundle, *run.stage1);
  run.stage1->eval();
  return run;
}

LatentPrior make_prior(const ExperimentConfig& config, const std::vector<ModalityInfo>& infos, torch::ScalarType dtype) {
  LatentPrior prior(build_schedule(config.stage2.steps, config.stage2.schedule), config.stage2.denoiser,
                    config.stage2.policy, infos);
  prior->to(dtype);
  return prior;
}

torch::ScalarType dataset_dtype(const Dataset& d) { return d.modality(0).scalar_type(); }

void write_text(const std::filesystem::path& file, const std::string& text) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
}

std::string short_digest(const ExperimentConfig& config) { return config.digest().substr(0, 16); }

MetricRecord make_record(const ExperimentConfig& config, const std::string& name, double value, int64_t count,
                         json details = json::object()) {
  MetricRecord r;
  r.name = name;
  r.value = value;
  r.count = count;
  r.config_digest = short_digest(config);
  r.seed = config.seed;
  r.details = std::move(details);
  return r;
}

Batch first_rows(const Dataset& d, int64_t n) {
  if (n > d.size()) {
    throw InvalidArgument("requested " + std::to_string(n) + " samples but the source holds " +
                          std::to_string(d.size()));
  }
  return d.batch(torch::arange(0, n, torch::kLong));
}

}  // namespace

std::filesystem::path cmd_train_stage1(const ExperimentConfig& config, std::ostream& out) {
  RunLayout layout{resolve_output_dir(config.output_dir)};
  auto dataset = config.dataset.build();
  const auto dtype = dataset_dtype(dataset);
  torch::manual_seed(config.seed);
  ShalaVae model(dataset.infos(), config.model);
  model->to(dtype);
  auto report = train_stage1(model, dataset, config.stage1);

  std::filesystem::create_directories(layout.root);
  write_json_file(config.to_json(), layout.config());
  save_bundle(make_bundle(StageTag::stage1, *model, bundle_config(config, dataset, dtype)), layout.stage1());
  write_text(layout.root / "stage1_curve.jsonl", curve_to_jsonl(report.curve));
  std::vector<MetricRecord> records;
  if (!report.curve.empty()) {
    records.push_back(make_record(config, "stage1.final_loss", report.curve.back().loss, report.iterations_run));
    records.push_back(make_record(config, "stage1.final_kl", report.curve.back().kl, report.iterations_run));
  }
  append_records(records, layout.metrics());
  if (report.status == TrainStatus::diverged) {
    throw NumericalError("stage-1 training diverged (" + report.diagnostics +
                         "); the last finite state was saved to " + layout.stage1().string());
  }
  out << "stage1 checkpoint: " << layout.stage1().string() << "\n";
  return layout.stage1();
}

std::filesystem::path cmd_train_stage2(const ExperimentConfig& config, std::ostream& out,
                                       const std::optional<std::filesystem::path>& stage1_dir) {
  RunLayout layout{resolve_output_dir(config.output_dir)};
  auto run = load_stage1(stage1_dir.value_or(layout.stage1()));
  const auto stage1_digest = run.stage1_bundle.digest();
  if (!config.stage1_digest.empty() && config.stage1_digest != stage1_digest) {
    throw DigestMismatch("config expects stage-1 digest " + config.stage1_digest + " but the bundle has " +
                         stage1_digest);
  }
  if (config.model.to_json() != run.config.model.to_json()) {
    throw InvalidArgument("config.model differs from the model stored in the stage-1 bundle");
  }
  auto dataset = config.dataset.build();
  const auto before = module_digest(*run.stage1);
  torch::manual_seed(mix_seed(config.seed, 2));
  auto prior = make_prior(config, run.infos, run.dtype);
  auto report = train_stage2(prior, run.stage1, dataset, config.stage2);
  if (module_digest(*run.stage1) != before) throw Error("stage-1 parameters changed during stage-2 training");

  std::filesystem::create_directories(layout.root);
  save_bundle(make_bundle(StageTag::stage2, *prior, bundle_config(config, dataset, run.dtype), stage1_digest),
              layout.stage2());
  write_text(layout.root / "stage2_curve.jsonl", curve_to_jsonl(report.curve));
  std::vector<MetricRecord> records;
  if (!report.curve.empty()) {
    records.push_back(make_record(config, "stage2.final_loss", report.curve.back().loss, report.iterations_run));
  }
  append_records(records, layout.metrics());
  if (report.status == TrainStatus::diverged) {
    throw NumericalError("stage-2 training diverged (" + report.diagnostics +
                         "); the last finite state was saved to " + layout.stage2().string());
  }
  out << "stage2 checkpoint: " << layout.stage2().string() << "\n";
  return layout.stage2();
}

std::filesystem::path cmd_generate(const GenerateOptions& options, std::ostream& out) {
  RunLayout layout{options.run};
  if (!std::filesystem::exists(layout.stage2())) {
    throw InvalidArgument("no stage-2 checkpoint in " + layout.root.string() + "; run train-stage2 first");
  }
  auto run = load_stage1(layout.stage1());
  auto stage2_bundle = load_bundle(layout.stage2());
  check_stage_pair(run.stage1_bundle, stage2_bundle);
  auto stage2_cfg = ExperimentConfig::from_json(stage2_bundle.config.at("experiment"));
  auto prior = make_prior(stage2_cfg, run.infos, run.dtype);
  load_into(stage2_bundle, *prior);
  ShalaPipeline pipe(run.stage1, prior);
  const int64_t m = static_cast<int64_t>(run.infos.size());

  GenerationRequest req;
  req.mode = options.mode;
  req.n = options.n;
  req.seed = options.seed;
  req.guidance = options.guidance.value_or(stage2_cfg.eval.guidance);
  req.k = options.k.value_or(pipe.steps() / 4);

  auto check_indices = [&](const std::vector<int64_t>& v, const char* flag) {
    for (auto i : v) {
      if (i < 0 || i >= m) throw InvalidArgument(std::string(flag) + " index " + std::to_string(i) + " out of range");
    }
  };
  auto source = [&]() -> Dataset {
    Dataset d = options.input ? load_dataset(*options.input) : stage2_cfg.dataset.build();
    if (d.infos() != run.infos) throw ShapeMismatch("input dataset modalities do not match the model");
    return d;
  };

  GenerationResult result;
  json request = {{"mode", to_string(req.mode)}, {"n", req.n},       {"seed", req.seed},
                  {"guidance", req.guidance},    {"k", req.k}};
  switch (options.mode) {
    case GenerationMode::joint:
      result = pipe.run(req);
      break;
    case GenerationMode::cross: {
      std::vector<int64_t> mask = options.mask.value_or(std::vector<int64_t>{});
      if (!options.mask) {
        for (int64_t i = 1; i < m; ++i) mask.push_back(i);
      }
      check_indices(mask, "--mask");
      for (int64_t i = 0; i < m; ++i) {
        if (std::find(mask.begin(), mask.end(), i) == mask.end()) req.observed.push_back(i);
      }
      if (req.observed.empty()) throw InvalidArgument("--cross with every modality masked leaves nothing to condition on");
      auto batch = first_rows(source(), req.n);
      result = pipe.run(req, &batch);
      request["observed"] = req.observed;
      break;
    }
    case GenerationMode::correct: {
      std::vector<int64_t> corrupt = options.corrupt.value_or(std::vector<int64_t>{m - 1});
      check_indices(corrupt, "--corrupt");
      std::vector<bool> flags(static_cast<size_t>(m), false);
      for (auto i : corrupt) flags[static_cast<size_t>(i)] = true;
      for (int64_t i = 0; i < m; ++i) {
        if (!flags[static_cast<size_t>(i)]) req.observed.push_back(i);
      }
      if (req.observed.empty()) throw InvalidArgument("--correct needs at least one uncorrupted modality");
      auto data = source();
      auto batch = first_rows(data, req.n);
      Rng rng(mix_seed(req.seed, 0xC0FF));
      auto corrupted = corrupt_batch(batch, flags, options.corruption, rng, &data);
      result = pipe.run(req, &corrupted);
      request["corrupted"] = corrupt;
      break;
    }
    case GenerationMode::style: {
      if (!options.reference) throw InvalidArgument("--style needs --reference <dataset dir>");
      auto ref_data = load_dataset(*options.reference);
      if (ref_data.infos() != run.infos) throw ShapeMismatch("reference dataset modalities do not match the model");
      auto src = first_rows(source(), req.n);
      auto ref = first_rows(ref_data, req.n);
      result = pipe.run(req, &src, &ref);
      request["reference"] = options.reference->string();
      break;
    }
    case GenerationMode::reconstruct: {
      auto batch = first_rows(source(), req.n);
      result = pipe.run(req, &batch);
      break;
    }
  }
  if (result.samples.x.empty()) {
    result.samples.x = std::vector<torch::Tensor>{};
    for (const auto& info : run.infos) {
      std::vector<int64_t> shape{0};
      shape.insert(shape.end(), info.shape.begin(), info.shape.end());
      result.samples.x.push_back(torch::zeros(shape));
    }
    result.samples.labels = torch::zeros({0}, torch::kLong);
    result.samples.presence = torch::zeros({0, m}, torch::kBool);
  }
  const auto dir = options.out.value_or(layout.generations() /
                                        (to_string(req.mode) + "-seed" + std::to_string(req.seed)));
  json manifest = {{"request", request},
                   {"config_digest", stage2_cfg.digest()},
                   {"stage1_digest", stage2_bundle.stage1_digest},
                   {"stage2_digest", stage2_bundle.digest()}};
  write_generation(result, run.infos, manifest, dir);
  out << "samples: " << result.samples.size() << "\n";
  out << "NFE: " << result.nfe << "\n";
  out << "output: " << dir.string() << "\n";
  return dir;
}

std::vector<MetricRecord> cmd_evaluate(const std::filesystem::path& run_dir, std::ostream& out) {
  RunLayout layout{run_dir};
  auto config = ExperimentConfig::load(layout.config());
  auto dataset = config.dataset.build();
  const int64_t classes = dataset.labels().max().item<int64_t>() + 1;
  if (classes < 2) throw InvalidArgument("evaluation needs a labelled dataset with at least two classes");

  std::vector<ToyClassifier> clf;
  std::vector<MetricRecord> records;
  for (int64_t i = 0; i < dataset.num_modalities(); ++i) {
    auto ccfg = config.eval.classifier;
    ccfg.seed = mix_seed(config.eval.classifier.seed, static_cast<uint64_t>(i));
    ClassifierReport rep;
    clf.push_back(train_toy_classifier(dataset, i, classes, ccfg, &rep));
    records.push_back(make_record(config, "classifier.accuracy." + std::to_string(i), rep.holdout_accuracy,
                                  rep.holdout_size, {{"gate", ccfg.gate}}));
  }
  {
    const auto n_hold =
        static_cast<int64_t>(std::llround(config.eval.classifier.holdout_fraction * static_cast<double>(dataset.size())));
    auto held = dataset.subset(holdout_split(dataset.size(), n_hold).second);
    records.push_back(make_record(config, "ground_truth.joint_coherence",
                                  joint_coherence(classify_batch(clf, held.data())), held.size(),
                                  {{"estimator", "all-agree"}}));
  }

  std::vector<std::filesystem::path> gens;
  if (std::filesystem::exists(layout.generations())) {
    for (const auto& e : std::filesystem::directory_iterator(layout.generations())) {
      if (e.is_directory() && std::filesystem::exists(e.path() / "samples")) gens.push_back(e.path());
    }
  }
  std::sort(gens.begin(), gens.end());
  for (const auto& g : gens) {
    auto samples = load_dataset(g / "samples");
    const auto name = g.filename().string();
    if (samples.size() == 0) continue;
    auto preds = classify_batch(clf, samples.data());
    records.push_back(make_record(config, name + ".joint_coherence", joint_coherence(preds), samples.size(),
                                  {{"estimator", "all-agree"}}));
    if (samples.labels().ge(0).all().item<bool>()) {
      double agree = 0.0;
      for (const auto& p : preds) agree += label_agreement(p, samples.labels());
      records.push_back(make_record(config, name + ".source_label_agreement",
                                    agree / static_cast<double>(preds.size()), samples.size(),
                                    {{"estimator", "mean over modalities of agreement with the source label"}}));
    }
  }

  std::filesystem::create_directories(layout.evaluation());
  write_text(layout.evaluation() / "metrics.jsonl", records_to_jsonl(records));
  std::vector<std::pair<std::string, std::vector<MetricRecord>>> runs{{run_dir.filename().string(), records}};
  for (const auto& b : config.eval.baselines) {
    std::filesystem::path p = resolve_output_dir(b) / "evaluation" / "metrics.jsonl";
    std::vector<MetricRecord> other;
    if (std::filesystem::exists(p)) {
      std::ifstream in(p);
      std::stringstream ss;
      ss << in.rdbuf();
      other = records_from_jsonl(ss.str());
    } else {
      out << "baseline " << b << ": no evaluation found, marked absent\n";
    }
    runs.emplace_back(std::filesystem::path(b).filename().string(), other);
  }
  auto table = tabulate(runs);
  write_text(layout.evaluation() / "table.txt", table.to_text());
  write_text(layout.evaluation() / "table.csv", table.to_csv());
  out << table.to_text();
  return records;
}

int cmd_reproduce(const std::string& suite, uint64_t seed, const std::optional<std::filesystem::path>& out_dir,
                  std::ostream& out) {
  SuiteOptions options;
  options.seed = seed;
  options.output_dir =
      out_dir.value_or(resolve_output_dir("reproduce/" + suite + "-seed" + std::to_string(seed)));
  auto report = run_suite(suite, options);
  for (const auto& c : report.criteria) out << c.line() << "\n";
  out << "suite " << suite << ": " << (report.passed() ? "PASS" : "FAIL") << " (" << report.criteria.size()
      << " criteria, metrics in " << (options.output_dir / "metrics.jsonl").string() << ")\n";
  return report.passed() ? kExitOk : kExitAssertion;
}

namespace {

std::vector<int64_t> parse_index_list(const std::string& text, const char* flag) {
  std::vector<int64_t> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidArgument(std::string(flag) + " expects comma-separated indices, got '" + text + "'");
    }
  }
  return out;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared-latent multimodal generation: training, sampling, evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  auto* s1 = app.add_subcommand("train-stage1", "Train encoders, fusion and decoders");
  s1->add_option("--config", config_path, "Experiment config (JSON)")->required();

  std::string stage1_dir;
  auto* s2 = app.add_subcommand("train-stage2", "Train the latent diffusion prior");
  s2->add_option("--config", config_path, "Experiment config (JSON)")->required();
  s2->add_option("--stage1", stage1_dir, "Stage-1 checkpoint directory (default: the run's own)");

  GenerateOptions gen;
  std::string run_dir, mask, corrupt, corruption = "blank", input, reference, gen_out;
  bool joint = false, cross = false, correct = false, style = false;
  double guidance = 0.0;
  int64_t k = 0;
  auto* g = app.add_subcommand("generate", "Sample from a trained run");
  g->add_option("--run", run_dir, "Run directory")->required();
  g->add_flag("--joint", joint, "Unconditional joint generation");
  g->add_flag("--cross", cross, "Cross-modal generation from observed modalities");
  g->add_flag("--correct", correct, "Latent correction of corrupted samples");
  g->add_flag("--style", style, "Latent style transfer");
  auto* k_opt = g->add_option("--k", k, "Forward steps for --correct / --style (default T/4)");
  auto* w_opt = g->add_option("--guidance", guidance, "Guidance scale");
  g->add_option("--n", gen.n, "Number of samples");
  g->add_option("--seed", gen.seed, "Seed");
  auto* mask_opt = g->add_option("--mask", mask, "Cross: comma-separated modalities to hide");
  auto* corrupt_opt = g->add_option("--corrupt", corrupt, "Correct: comma-separated modalities to corrupt");
  g->add_option("--corruption", corruption, "Correct: blank, noise or swap");
  g->add_option("--input", input, "Source dataset directory");
  g->add_option("--reference", reference, "Style reference dataset directory");
  g->add_option("--out", gen_out, "Output directory");

  std::string eval_run;
  auto* e = app.add_subcommand("evaluate", "Score a run's data and generations");
  e->add_option("--run", eval_run, "Run directory")->required();

  std::string suite, suite_out;
  uint64_t suite_seed = 0;
  auto* r = app.add_subcommand("reproduce", "Run an acceptance suite");
  std::string suites_help = "One of:";
  for (const auto& s : suite_names()) suites_help += " " + s;
  r->add_option("suite", suite, suites_help)->required();
  r->add_option("--seed", suite_seed, "Seed");
  r->add_option("--out", suite_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << "\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitConfig;
  }

  try {
    torch::set_num_threads(1);
    if (s1->parsed()) {
      cmd_train_stage1(ExperimentConfig::load(config_path), out);
    } else if (s2->parsed()) {
      std::optional<std::filesystem::path> dir;
      if (!stage1_dir.empty()) dir = stage1_dir;
      cmd_train_stage2(ExperimentConfig::load(config_path), out, dir);
    } else if (g->parsed()) {
      const int modes = int(joint) + int(cross) + int(correct) + int(style);
      if (modes != 1) throw InvalidArgument("generate needs exactly one of --joint, --cross, --correct, --style");
      gen.mode = joint ? GenerationMode::joint
                 : cross ? GenerationMode::cross
                 : correct ? GenerationMode::correct
                           : GenerationMode::style;
      gen.run = run_dir;
      if (*w_opt) gen.guidance = guidance;
      if (*k_opt) {
        if (!(correct || style)) throw InvalidArgument("--k applies to --correct and --style only");
        gen.k = k;
      }
      if (*mask_opt) {
        if (!cross) throw InvalidArgument("--mask applies to --cross only");
        gen.mask = parse_index_list(mask, "--mask");
      }
      if (*corrupt_opt) {
        if (!correct) throw InvalidArgument("--corrupt applies to --correct only");
        gen.corrupt = parse_index_list(corrupt, "--corrupt");
      }
      gen.corruption = parse_corruption_mode(corruption);
      if (!input.empty()) gen.input = input;
      if (!reference.empty()) {
        if (!style) throw InvalidArgument("--reference applies to --style only");
        gen.reference = reference;
      }
      if (!gen_out.empty()) gen.out = gen_out;
      cmd_generate(gen, out);
    } else if (e->parsed()) {
      cmd_evaluate(eval_run, out);
    } else if (r->parsed()) {
      std::optional<std::filesystem::path> dir;
      if (!suite_out.empty()) dir = suite_out;
      return cmd_reproduce(suite, suite_seed, dir, out);
    }
  } catch (const InvalidArgument& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const DigestMismatch& ex) {
    err << "digest error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const FormatVersionMismatch& ex) {
    err << "format error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const GateFailure& ex) {
    err << "gate failure: " << ex.what() << "\n";
    return kExitAssertion;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace shala
