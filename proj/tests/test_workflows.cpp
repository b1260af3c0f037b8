#include <doctest.h>

#include <fstream>

#include "shala/archive.hpp"
#include "shala/datagen.hpp"
#include "shala/suites.hpp"
#include "shala/workflows.hpp"
#include "test_support.hpp"

using namespace shala;
using shala::testing::glyph_spec;
using shala::testing::max_abs_diff;
using shala::testing::TempDir;
using shala::testing::tiny_model;

namespace {

struct Fixture {
  Dataset data = make_glyph_dataset(glyph_spec(3, 12, 2));
  ShalaPipeline pipe = make();

  ShalaPipeline make() {
    auto cfg = tiny_model();
    torch::manual_seed(1);
    ShalaVae stage1(data.infos(), cfg);
    DenoiserConfig dn;
    dn.latent_dim = cfg.latent_dim;
    dn.cond_width = cfg.encoder.embed_width;
    dn.hidden = 32;
    dn.blocks = 2;
    dn.time_width = 16;
    torch::manual_seed(2);
    LatentPrior prior(build_schedule(250, ScheduleKind::linear), dn, ConditioningPolicy{}, data.infos());
    torch::NoGradGuard guard;
    for (auto& p : prior->named_parameters()) {
      if (p.key().find("output.") != std::string::npos) p.value().normal_(0.0, 0.2);
    }
    return ShalaPipeline(stage1, prior);
  }
};

void check_same(const GenerationResult& a, const GenerationResult& b) {
  CHECK(torch::equal(a.latents, b.latents));
  for (size_t i = 0; i < a.samples.x.size(); ++i) CHECK(torch::equal(a.samples.x[i], b.samples.x[i]));
}

}  // namespace

TEST_CASE("joint generation reports 251 function evaluations at T = 250") {
  Fixture f;
  auto out = f.pipe.joint_generate(4, 1.0, 0);
  CHECK(out.nfe == 251);
  CHECK(out.samples.size() == 4);
  CHECK(out.samples.num_modalities() == 3);
  CHECK(out.samples.presence.all().item<bool>());
  for (const auto& p : out.provenance) CHECK(p.cond_modality == -1);
}

TEST_CASE("zero joint samples give an empty result") {
  Fixture f;
  auto out = f.pipe.joint_generate(0, 1.0, 0);
  CHECK(out.samples.size() == 0);
  CHECK(out.provenance.empty());
  CHECK(out.samples.x.size() == 3);
  CHECK_THROWS_AS(f.pipe.joint_generate(-1, 1.0, 0), InvalidArgument);
}

TEST_CASE("joint generation is reproducible under a seed") {
  Fixture f;
  check_same(f.pipe.joint_generate(5, 1.0, 42), f.pipe.joint_generate(5, 1.0, 42));
  CHECK_FALSE(torch::equal(f.pipe.joint_generate(5, 1.0, 42).latents, f.pipe.joint_generate(5, 1.0, 43).latents));
}

TEST_CASE("unguided cross-modal generation takes the joint path") {
  Fixture f;
  auto cross = f.pipe.cross_modal_generate(f.data.data(), 0.0, 7);
  auto joint = f.pipe.joint_generate(f.data.size(), 0.0, 7);
  check_same(cross, joint);
  auto guided = f.pipe.cross_modal_generate(f.data.data(), 1.0, 7);
  CHECK_FALSE(torch::equal(guided.latents, joint.latents));
}

TEST_CASE("cross-modal generation conditions on present modalities only") {
  Fixture f;
  auto batch = f.data.data();
  batch.presence = torch::zeros_like(batch.presence);
  batch.presence.index_put_({torch::indexing::Slice(), 2}, true);
  auto out = f.pipe.cross_modal_generate(batch, 1.0, 3);
  for (const auto& p : out.provenance) CHECK(p.cond_modality == 2);
  CHECK(torch::equal(out.samples.labels, batch.labels));
  batch.presence.index_put_({0, 2}, false);
  CHECK_THROWS_AS(f.pipe.cross_modal_generate(batch, 1.0, 3), InvalidArgument);
}

TEST_CASE("latent correction with K = 0 is plain reconstruction") {
  Fixture f;
  auto corrupted = f.data.data();
  Rng rng(4);
  corrupted = corrupt_batch(corrupted, {false, true, false}, CorruptionMode::blank, rng);
  auto fixed = f.pipe.latent_correct(corrupted, {false, true, false}, 0, 1.0, 9);
  auto recon = f.pipe.reconstruct(corrupted, 9);
  check_same(fixed, recon);
  CHECK(fixed.nfe == 1);
}

TEST_CASE("latent correction anchors on the first uncorrupted modality") {
  Fixture f;
  auto out = f.pipe.latent_correct(f.data.data(), {true, false, false}, 60, 1.0, 5);
  for (const auto& p : out.provenance) {
    CHECK(p.cond_modality == 1);
    CHECK(p.k == 60);
  }
  CHECK(out.nfe == 61);
  CHECK_THROWS_AS(f.pipe.latent_correct(f.data.data(), {true, true, true}, 10, 1.0, 5), InvalidArgument);
  CHECK_THROWS_AS(f.pipe.latent_correct(f.data.data(), {true, false, false}, 251, 1.0, 5), InvalidArgument);
  CHECK_THROWS_AS(f.pipe.latent_correct(f.data.data(), {true, false, false}, -1, 1.0, 5), InvalidArgument);
}

TEST_CASE("style transfer with K = 0 reconstructs the source") {
  Fixture f;
  auto src = f.data.batch(torch::arange(0, 6));
  auto ref = f.data.batch(torch::arange(6, 12));
  check_same(f.pipe.style_transfer(src, ref, 0, 1.0, 11), f.pipe.reconstruct(src, 11));
}

TEST_CASE("style transfer with K = T ignores the source") {
  Fixture f;
  auto src_a = f.data.batch(torch::arange(0, 4));
  auto src_b = f.data.batch(torch::arange(4, 8));
  auto ref = f.data.batch(torch::arange(8, 12));
  auto a = f.pipe.style_transfer(src_a, ref, 250, 1.0, 12);
  auto b = f.pipe.style_transfer(src_b, ref, 250, 1.0, 12);
  check_same(a, b);
  auto c = f.pipe.style_transfer(src_a, ref, 100, 1.0, 12);
  auto e = f.pipe.style_transfer(src_b, ref, 100, 1.0, 12);
  CHECK_FALSE(torch::equal(c.latents, e.latents));
}

TEST_CASE("style transfer needs matching complete inputs") {
  Fixture f;
  auto src = f.data.batch(torch::arange(0, 4));
  auto ref = f.data.batch(torch::arange(4, 7));
  CHECK_THROWS_AS(f.pipe.style_transfer(src, ref, 10, 1.0, 0), ShapeMismatch);
  auto partial = f.data.batch(torch::arange(4, 8));
  partial.presence = partial.presence.clone();
  partial.presence.index_put_({0, 1}, false);
  CHECK_THROWS_AS(f.pipe.style_transfer(src, partial, 10, 1.0, 0), InvalidArgument);
}

TEST_CASE("requests validate their mode constraints") {
  GenerationRequest r;
  r.mode = GenerationMode::cross;
  CHECK_THROWS_AS(r.validate(3, 250), InvalidArgument);
  r.observed = {0};
  CHECK_NOTHROW(r.validate(3, 250));
  r.observed = {3};
  CHECK_THROWS_AS(r.validate(3, 250), InvalidArgument);
  r.mode = GenerationMode::style;
  r.observed = {};
  r.k = 300;
  CHECK_THROWS_AS(r.validate(3, 250), InvalidArgument);
  Fixture f;
  GenerationRequest style;
  style.mode = GenerationMode::style;
  style.k = 10;
  CHECK_THROWS_AS(f.pipe.run(style), InvalidArgument);
}

TEST_CASE("provenance replays a generated row bit for bit") {
  Fixture f;
  GenerationRequest req;
  req.mode = GenerationMode::correct;
  req.observed = {0, 2};
  req.k = 40;
  req.n = f.data.size();
  req.seed = 21;
  auto first = f.pipe.run(req, &f.data.data());
  const auto& p = first.provenance.at(5);
  auto back = Provenance::from_json(p.to_json());
  CHECK(back.to_json() == p.to_json());

  GenerationRequest replay;
  replay.mode = back.mode;
  replay.seed = back.seed;
  replay.k = back.k;
  replay.guidance = back.guidance;
  replay.observed = req.observed;
  replay.n = back.batch_size;
  auto second = f.pipe.run(replay, &f.data.data());
  for (size_t i = 0; i < 3; ++i) CHECK(torch::equal(second.samples.x[i][back.index], first.samples.x[i][5]));
}

TEST_CASE("generation output holds samples, provenance and image grids") {
  Fixture f;
  TempDir tmp("generation");
  auto out = f.pipe.joint_generate(5, 1.0, 3);
  write_generation(out, f.data.infos(), {{"note", "test"}}, tmp.path());
  auto samples = load_dataset(tmp.path() / "samples");
  CHECK(samples.size() == 5);
  CHECK((samples.infos() == f.data.infos()));
  std::ifstream prov(tmp.path() / "provenance.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(prov, line)) {
    auto j = json::parse(line);
    CHECK(j.at("mode") == "joint");
    ++lines;
  }
  CHECK(lines == 5);
  std::ifstream grid(tmp.path() / "grid_0.ppm", std::ios::binary);
  std::string magic;
  grid >> magic;
  CHECK(magic == "P6");
  auto manifest = read_json_file(tmp.path() / "generation.json");
  CHECK(manifest.at("nfe") == 251);
}

TEST_CASE("empty generations still write a valid manifest") {
  Fixture f;
  TempDir tmp("empty_generation");
  write_generation(f.pipe.joint_generate(0, 1.0, 0), f.data.infos(), json::object(), tmp.path());
  CHECK(load_dataset(tmp.path() / "samples").size() == 0);
  CHECK(read_json_file(tmp.path() / "generation.json").at("samples") == 0);
}

TEST_CASE("sweep violations count rises above tolerance") {
  CHECK(monotone_violation_rate({{1.0, 0.9, 0.8}}, 0.0) == 0.0);
  CHECK(monotone_violation_rate({{1.0, 0.9, 0.95}}, 0.01) == doctest::Approx(0.5));
  CHECK(monotone_violation_rate({{1.0, 0.9, 0.95}}, 0.1) == 0.0);
  CHECK(monotone_violation_rate({{0.5, 0.6}, {0.5, 0.4}}, 0.0) == doctest::Approx(0.5));
}

TEST_CASE("generation modes parse by name") {
  for (auto m : {GenerationMode::joint, GenerationMode::cross, GenerationMode::correct, GenerationMode::style,
                 GenerationMode::reconstruct}) {
    CHECK(parse_generation_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_generation_mode("dream"), InvalidArgument);
}
