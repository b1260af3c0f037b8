#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "shala/archive.hpp"
#include "shala/checkpoint.hpp"
#include "shala/commands.hpp"
#include "shala/config.hpp"
#include "test_support.hpp"

using namespace shala;
using shala::testing::glyph_spec;
using shala::testing::TempDir;
using shala::testing::tiny_model;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "shala");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Two glyph modalities, tiny networks and a few hundred iterations.
ExperimentConfig smoke_config(const std::string& output_dir) {
  ExperimentConfig c;
  c.dataset.kind = "glyphs";
  c.dataset.spec = glyph_spec(2, 1500, 3).to_json();
  c.model = tiny_model(4);
  c.stage1.iterations = 200;
  c.stage1.batch_size = 32;
  c.stage2.iterations = 200;
  c.stage2.batch_size = 64;
  c.stage2.denoiser.latent_dim = 4;
  c.stage2.denoiser.cond_width = c.model.encoder.embed_width;
  c.stage2.denoiser.hidden = 32;
  c.stage2.denoiser.blocks = 1;
  c.stage2.denoiser.time_width = 16;
  c.eval.n_generate = 16;
  c.eval.baselines = {"runs/missing-baseline"};
  c.output_dir = output_dir;
  c.seed = 5;
  return c;
}

void write_config(const ExperimentConfig& c, const std::filesystem::path& file) {
  write_json_file(c.to_json(), file);
}

/// Points relative output directories at a scratch root for one scope.
class OutputRoot {
 public:
  explicit OutputRoot(const std::filesystem::path& root) { ::setenv(kOutputRootEnv, root.c_str(), 1); }
  ~OutputRoot() { ::unsetenv(kOutputRootEnv); }
};

}  // namespace

TEST_CASE("configs reject unknown keys at any depth") {
  auto j = ExperimentConfig{}.to_json();
  CHECK_NOTHROW(ExperimentConfig::from_json(j));
  auto top = j;
  top["learning_rate"] = 1.0;
  CHECK_THROWS_AS(ExperimentConfig::from_json(top), InvalidArgument);
  auto nested = j;
  nested["stage1"]["warmup"] = 3;
  CHECK_THROWS_AS(ExperimentConfig::from_json(nested), InvalidArgument);
  auto typed = j;
  typed["seed"] = "seven";
  CHECK_THROWS_AS(ExperimentConfig::from_json(typed), InvalidArgument);
}

TEST_CASE("configs round-trip and their digest tracks content") {
  auto c = smoke_config("runs/a");
  auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.digest() == c.digest());
  back.seed += 1;
  CHECK(back.digest() != c.digest());
  CHECK(c.digest().size() == 64);
}

TEST_CASE("inconsistent configs are refused") {
  auto c = smoke_config("runs/a");
  c.stage2.denoiser.latent_dim = 7;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = smoke_config("");
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  TempDir tmp("config_missing");
  CHECK_THROWS_AS(ExperimentConfig::load(tmp.path() / "nope.json"), InvalidArgument);
  std::ofstream(tmp.path() / "broken.json") << "{ not json";
  CHECK_THROWS_AS(ExperimentConfig::load(tmp.path() / "broken.json"), InvalidArgument);
}

TEST_CASE("shipped configs parse and validate") {
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(std::filesystem::path(SHALA_SOURCE_DIR) / "configs")) {
    CAPTURE(entry.path().string());
    auto c = ExperimentConfig::load(entry.path());
    CHECK_NOTHROW(c.validate());
    CHECK(ExperimentConfig::from_json(c.to_json()).digest() == c.digest());
    ++count;
  }
  CHECK(count >= 3);
}

TEST_CASE("output roots re-root only relative paths") {
  TempDir tmp("root");
  OutputRoot root(tmp.path());
  CHECK(resolve_output_dir("runs/x") == tmp.path() / "runs/x");
  CHECK(resolve_output_dir("/abs/x") == std::filesystem::path("/abs/x"));
}

TEST_CASE("SHA-256 matches the standard test vector") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(json_digest({{"b", 1}, {"a", 2}}) == json_digest({{"a", 2}, {"b", 1}}));
}

TEST_CASE("checkpoints round-trip and detect tampering") {
  TempDir tmp("checkpoint");
  torch::manual_seed(0);
  torch::nn::Linear net(3, 2);
  auto bundle = make_bundle(StageTag::stage1, *net, {{"width", 3}});
  save_bundle(bundle, tmp.path() / "ok");
  auto back = load_bundle(tmp.path() / "ok");
  CHECK(back.digest() == bundle.digest());
  torch::manual_seed(1);
  torch::nn::Linear other(3, 2);
  load_into(back, *other);
  CHECK(module_digest(*other) == module_digest(*net));

  torch::nn::Linear wrong(4, 2);
  CHECK_THROWS_AS(load_into(back, *wrong), ShapeMismatch);

  SUBCASE("flipped byte") {
    auto file = tmp.path() / "ok" / "array_0.bin";
    auto bytes = slurp(file);
    bytes[0] = static_cast<char>(bytes[0] ^ 0x01);
    std::ofstream(file, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_bundle(tmp.path() / "ok"), DigestMismatch);
  }
  SUBCASE("edited config") {
    auto manifest = read_json_file(tmp.path() / "ok" / "manifest.json");
    manifest["config"]["width"] = 4;
    write_json_file(manifest, tmp.path() / "ok" / "manifest.json");
    CHECK_THROWS_AS(load_bundle(tmp.path() / "ok"), DigestMismatch);
  }
  SUBCASE("future format") {
    auto manifest = read_json_file(tmp.path() / "ok" / "manifest.json");
    manifest["format_version"] = kCheckpointFormatVersion + 1;
    write_json_file(manifest, tmp.path() / "ok" / "manifest.json");
    try {
      load_bundle(tmp.path() / "ok");
      FAIL("expected a format error");
    } catch (const FormatVersionMismatch& e) {
      CHECK(std::string(e.what()).find("retrain or re-export") != std::string::npos);
    }
  }
  SUBCASE("missing manifest") { CHECK_THROWS_AS(load_bundle(tmp.path() / "absent"), InvalidArgument); }
}

TEST_CASE("stage-2 bundles must name their stage-1 bundle") {
  torch::manual_seed(0);
  torch::nn::Linear a(2, 2), b(2, 2);
  auto s1 = make_bundle(StageTag::stage1, *a, json::object());
  auto s2 = make_bundle(StageTag::stage2, *b, json::object(), s1.digest());
  CHECK_NOTHROW(check_stage_pair(s1, s2));
  auto s1_other = make_bundle(StageTag::stage1, *a, {{"x", 1}});
  CHECK_THROWS_AS(check_stage_pair(s1_other, s2), DigestMismatch);
  CHECK_THROWS_AS(check_stage_pair(s2, s1), InvalidArgument);
  CHECK_THROWS_AS(make_bundle(StageTag::stage2, *b, json::object()), InvalidArgument);
}

TEST_CASE("usage errors exit with the configuration code") {
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"fly"}).code == kExitConfig);
  CHECK(cli({"reproduce", "nonexistent"}).code == kExitConfig);
  CHECK(cli({"train-stage1"}).code == kExitConfig);
  CHECK(cli({"train-stage1", "--config", "/nonexistent/config.json"}).code == kExitConfig);
  CHECK(cli({"generate", "--run", "/nonexistent", "--joint", "--cross"}).code == kExitConfig);
  CHECK(cli({"generate", "--run", "/nonexistent", "--joint", "--k", "3"}).code == kExitConfig);
  CHECK(cli({"generate", "--run", "/nonexistent", "--joint"}).code == kExitConfig);
}

TEST_CASE("the command line trains, generates and evaluates a smoke run") {
  TempDir tmp("smoke");
  OutputRoot root(tmp.path());
  const auto cfg_file = tmp.path() / "smoke.json";
  write_config(smoke_config("runs/smoke"), cfg_file);
  const auto run = tmp.path() / "runs/smoke";

  auto s1 = cli({"train-stage1", "--config", cfg_file.string()});
  REQUIRE_MESSAGE(s1.code == kExitOk, s1.err);
  CHECK(std::filesystem::exists(run / "stage1" / "manifest.json"));
  CHECK(std::filesystem::exists(run / "config.json"));
  auto s2 = cli({"train-stage2", "--config", cfg_file.string()});
  REQUIRE_MESSAGE(s2.code == kExitOk, s2.err);

  auto joint = cli({"generate", "--run", run.string(), "--joint", "--n", "8", "--seed", "1"});
  REQUIRE_MESSAGE(joint.code == kExitOk, joint.err);
  CHECK(joint.out.find("NFE: 251") != std::string::npos);
  CHECK(joint.out.find("samples: 8") != std::string::npos);
  const auto first = slurp(run / "generations/joint-seed1/samples/modality_0.bin");
  CHECK(cli({"generate", "--run", run.string(), "--joint", "--n", "8", "--seed", "1"}).code == kExitOk);
  CHECK(slurp(run / "generations/joint-seed1/samples/modality_0.bin") == first);

  auto empty = cli({"generate", "--run", run.string(), "--joint", "--n", "0", "--out", (tmp.path() / "e").string()});
  CHECK(empty.code == kExitOk);
  CHECK(empty.out.find("samples: 0") != std::string::npos);

  auto cross = cli({"generate", "--run", run.string(), "--cross", "--n", "4", "--seed", "2"});
  CHECK(cross.code == kExitOk);
  CHECK(cli({"generate", "--run", run.string(), "--cross", "--mask", "0,1"}).code == kExitConfig);
  auto correct = cli({"generate", "--run", run.string(), "--correct", "--n", "4", "--k", "20"});
  CHECK(correct.code == kExitOk);
  CHECK(correct.out.find("NFE: 21") != std::string::npos);
  CHECK(cli({"generate", "--run", run.string(), "--correct", "--k", "251"}).code == kExitConfig);
  CHECK(cli({"generate", "--run", run.string(), "--style", "--n", "4"}).code == kExitConfig);
  auto style = cli({"generate", "--run", run.string(), "--style", "--n", "4", "--reference",
                    (run / "generations/joint-seed1/samples").string()});
  CHECK_MESSAGE(style.code == kExitOk, style.err);

  auto ev = cli({"evaluate", "--run", run.string()});
  REQUIRE_MESSAGE(ev.code == kExitOk, ev.err);
  CHECK(ev.out.find("absent") != std::string::npos);
  const auto records = records_from_jsonl(slurp(run / "evaluation/metrics.jsonl"));
  bool found = false;
  for (const auto& r : records) {
    if (r.name == "ground_truth.joint_coherence") {
      found = true;
      CHECK(r.value >= 0.99);
    }
  }
  CHECK(found);
  CHECK(std::filesystem::exists(run / "evaluation/table.csv"));
  const auto metrics = slurp(run / "evaluation/metrics.jsonl");
  CHECK(cli({"evaluate", "--run", run.string()}).code == kExitOk);
  CHECK(slurp(run / "evaluation/metrics.jsonl") == metrics);

  {
    // Retraining from the same config reproduces the parameters bit for bit.
    const auto d1 = load_bundle(run / "stage1").digest();
    const auto d2 = load_bundle(run / "stage2").digest();
    write_config(smoke_config("runs/again"), tmp.path() / "again.json");
    REQUIRE(cli({"train-stage1", "--config", (tmp.path() / "again.json").string()}).code == kExitOk);
    REQUIRE(cli({"train-stage2", "--config", (tmp.path() / "again.json").string()}).code == kExitOk);
    // The stored configs differ in output_dir, so compare the arrays.
    auto a = load_bundle(run / "stage1"), b = load_bundle(tmp.path() / "runs/again/stage1");
    REQUIRE(a.arrays.size() == b.arrays.size());
    for (size_t i = 0; i < a.arrays.size(); ++i) CHECK(torch::equal(a.arrays[i].second, b.arrays[i].second));
    auto p = load_bundle(run / "stage2"), q = load_bundle(tmp.path() / "runs/again/stage2");
    for (size_t i = 0; i < p.arrays.size(); ++i) CHECK(torch::equal(p.arrays[i].second, q.arrays[i].second));
    CHECK(load_bundle(run / "stage1").digest() == d1);
    CHECK(load_bundle(run / "stage2").digest() == d2);
  }
  {
    // A pinned stage-1 digest that does not match is refused.
    auto c = smoke_config("runs/smoke");
    c.stage1_digest = std::string(64, '0');
    write_config(c, tmp.path() / "pinned.json");
    CHECK(cli({"train-stage2", "--config", (tmp.path() / "pinned.json").string()}).code == kExitConfig);
  }
  {
    // A stage-2 bundle trained against another stage-1 is refused.
    auto other = smoke_config("runs/other");
    other.seed = 6;
    write_config(other, tmp.path() / "other.json");
    REQUIRE(cli({"train-stage1", "--config", (tmp.path() / "other.json").string()}).code == kExitOk);
    std::filesystem::remove_all(tmp.path() / "runs/other/stage2");
    std::filesystem::copy(run / "stage2", tmp.path() / "runs/other/stage2");
    CHECK(cli({"generate", "--run", (tmp.path() / "runs/other").string(), "--joint", "--n", "2"}).code ==
          kExitConfig);
  }
}
