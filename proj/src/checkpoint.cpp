#include "shala/checkpoint.hpp"

#include <openssl/evp.h>

#include <iomanip>
#include <sstream>

#include "shala/archive.hpp"

namespace shala {

namespace {

std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

std::string file_name(size_t i) { return "array_" + std::to_string(i) + ".bin"; }

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t size) {
    if (size > 0 && EVP_DigestUpdate(ctx_, data, size) != 1) throw Error("SHA-256 update failed");
  }
  void update(const std::string& s) {
    // Length prefix keeps concatenations unambiguous.
    const uint64_t n = s.size();
    update(&n, sizeof n);
    update(s.data(), s.size());
  }
  void update(const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    update(dtype_name(c.scalar_type()));
    for (auto d : c.sizes()) update(&d, sizeof d);
    update(c.data_ptr(), c.nbytes());
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("SHA-256 final failed");
    std::ostringstream s;
    for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return s.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

StageTag parse_stage_tag(const std::string& name) {
  if (name == "stage1") return StageTag::stage1;
  if (name == "stage2") return StageTag::stage2;
  throw InvalidArgument("unknown stage tag '" + name + "'");
}

std::string to_string(StageTag s) { return s == StageTag::stage1 ? "stage1" : "stage2"; }

std::string sha256_hex(const void* data, size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

std::string sha256_hex(const std::string& text) { return sha256_hex(text.data(), text.size()); }

std::string json_digest(const json& j) { return sha256_hex(j.dump()); }

std::string module_digest(torch::nn::Module& module) {
  Sha256 h;
  for (const auto& [name, t] : named_state(module)) {
    h.update(name);
    h.update(t);
  }
  return h.hex();
}

std::string CheckpointBundle::digest() const {
  Sha256 h;
  h.update(to_string(stage));
  h.update(config_digest);
  h.update(stage1_digest);
  for (const auto& [name, t] : arrays) {
    h.update(name);
    h.update(t);
  }
  return h.hex();
}

CheckpointBundle make_bundle(StageTag stage, torch::nn::Module& module, const json& config,
                             const std::string& stage1_digest) {
  if (stage == StageTag::stage2 && stage1_digest.empty()) {
    throw InvalidArgument("a stage-2 bundle must reference its stage-1 digest");
  }
  CheckpointBundle b;
  b.stage = stage;
  b.config = config;
  b.config_digest = json_digest(config);
  b.stage1_digest = stage1_digest;
  for (const auto& [name, t] : named_state(module)) b.arrays.emplace_back(name, t.detach().clone());
  return b;
}

void load_into(const CheckpointBundle& bundle, torch::nn::Module& module) {
  auto state = named_state(module);
  if (state.size() != bundle.arrays.size()) {
    throw ShapeMismatch("checkpoint holds " + std::to_string(bundle.arrays.size()) + " arrays, module expects " +
                        std::to_string(state.size()));
  }
  torch::NoGradGuard guard;
  for (size_t i = 0; i < state.size(); ++i) {
    const auto& [name, src] = bundle.arrays[i];
    auto& [target_name, target] = state[i];
    if (name != target_name || src.sizes() != target.sizes() || src.scalar_type() != target.scalar_type()) {
      throw ShapeMismatch("checkpoint array '" + name + "' does not fit module entry '" + target_name + "'");
    }
    target.copy_(src);
  }
}

void save_bundle(const CheckpointBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json arrays = json::array();
  for (size_t i = 0; i < bundle.arrays.size(); ++i) {
    const auto& [name, t] = bundle.arrays[i];
    write_raw_array(t, dir / file_name(i));
    arrays.push_back({{"name", name}, {"file", file_name(i)}, {"dtype", dtype_name(t.scalar_type())},
                      {"shape", t.sizes().vec()}});
  }
  json manifest = {{"format_version", bundle.format_version},
                   {"stage", to_string(bundle.stage)},
                   {"config", bundle.config},
                   {"config_digest", bundle.config_digest},
                   {"stage1_digest", bundle.stage1_digest},
                   {"digest", bundle.digest()},
                   {"arrays", arrays}};
  write_json_file(manifest, dir / "manifest.json");
}

CheckpointBundle load_bundle(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw InvalidArgument("no checkpoint manifest in " + dir.string());
  }
  auto manifest = read_json_file(dir / "manifest.json");
  const int version = manifest.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion) {
    throw FormatVersionMismatch("checkpoint format version " + std::to_string(version) + " in " + dir.string() +
                                " is not supported (expected " + std::to_string(kCheckpointFormatVersion) +
                                "); retrain or re-export the checkpoint with this build");
  }
  CheckpointBundle b;
  b.format_version = version;
  b.stage = parse_stage_tag(manifest.at("stage").get<std::string>());
  b.config = manifest.at("config");
  b.config_digest = manifest.at("config_digest").get<std::string>();
  b.stage1_digest = manifest.at("stage1_digest").get<std::string>();
  for (const auto& a : manifest.at("arrays")) {
    b.arrays.emplace_back(a.at("name").get<std::string>(),
                          read_raw_array(dir / a.at("file").get<std::string>(),
                                         parse_dtype(a.at("dtype").get<std::string>()),
                                         a.at("shape").get<std::vector<int64_t>>()));
  }
  if (json_digest(b.config) != b.config_digest) {
    throw DigestMismatch("checkpoint config in " + dir.string() + " does not match its recorded digest");
  }
  const auto stored = manifest.at("digest").get<std::string>();
  if (b.digest() != stored) {
    throw DigestMismatch("checkpoint contents in " + dir.string() + " do not match digest " + stored);
  }
  return b;
}

void check_stage_pair(const CheckpointBundle& stage1, const CheckpointBundle& stage2) {
  if (stage1.stage != StageTag::stage1 || stage2.stage != StageTag::stage2) {
    throw InvalidArgument("expected a stage1 bundle and a stage2 bundle");
  }
  const auto actual = stage1.digest();
  if (stage2.stage1_digest != actual) {
    throw DigestMismatch("stage-2 bundle was trained against stage-1 digest " + stage2.stage1_digest +
                         ", but the supplied stage-1 bundle has digest " + actual);
  }
}

}  // namespace shala
