#include "shala/archive.hpp"

#include <bit>
#include <fstream>
#include <numeric>

namespace shala {

static_assert(std::endian::native == std::endian::little, "raw archives assume a little-endian host");

namespace fs = std::filesystem;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat:
      return "float32";
    case torch::kDouble:
      return "float64";
    case torch::kLong:
      return "int64";
    case torch::kUInt8:
      return "uint8";
    case torch::kBool:
      return "bool";
    default:
      throw InvalidArgument(std::string("unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType parse_dtype(const std::string& name) {
  if (name == "float32") return torch::kFloat;
  if (name == "float64") return torch::kDouble;
  if (name == "int64") return torch::kLong;
  if (name == "uint8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw InvalidArgument("unsupported dtype '" + name + "'");
}

void write_raw_array(const torch::Tensor& t, const fs::path& file) {
  auto c = t.contiguous();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.nbytes()));
  if (!out) throw Error("write failed for " + file.string());
}

torch::Tensor read_raw_array(const fs::path& file, torch::ScalarType dtype, const std::vector<int64_t>& shape) {
  if (!fs::exists(file)) throw InvalidArgument("missing array file " + file.string());
  const int64_t count = std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
  auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  const auto expected = static_cast<uintmax_t>(t.nbytes());
  const auto actual = fs::file_size(file);
  if (actual != expected) {
    throw ShapeMismatch(file.filename().string() + " holds " + std::to_string(actual) + " bytes but the manifest declares " +
                        c10::str(c10::IntArrayRef(shape)) + " " + dtype_name(dtype) + " (" + std::to_string(expected) +
                        " bytes)");
  }
  std::ifstream in(file, std::ios::binary);
  in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  if (!in && count > 0) throw Error("read failed for " + file.string());
  return t;
}

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InvalidArgument("missing file " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  out << j.dump(2) << '\n';
}

namespace {

json array_entry(const std::string& file, const torch::Tensor& t) {
  return {{"file", file}, {"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()}};
}

torch::Tensor read_entry(const fs::path& dir, const json& entry) {
  return read_raw_array(dir / entry.at("file").get<std::string>(), parse_dtype(entry.at("dtype").get<std::string>()),
                        entry.at("shape").get<std::vector<int64_t>>());
}

}  // namespace

void persist_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  json modalities = json::array();
  for (int64_t i = 0; i < dataset.num_modalities(); ++i) {
    const auto file = "modality_" + std::to_string(i) + ".bin";
    write_raw_array(dataset.modality(i), dir / file);
    auto entry = array_entry(file, dataset.modality(i));
    entry["name"] = dataset.info(i).name;
    entry["kind"] = to_string(dataset.info(i).kind);
    entry["sample_shape"] = dataset.info(i).shape;
    modalities.push_back(entry);
  }
  auto presence = dataset.presence().to(torch::kUInt8);
  write_raw_array(dataset.labels(), dir / "labels.bin");
  write_raw_array(presence, dir / "presence.bin");
  json manifest = {{"format_version", kArchiveFormatVersion},
                   {"n_samples", dataset.size()},
                   {"modalities", modalities},
                   {"labels", array_entry("labels.bin", dataset.labels())},
                   {"presence", array_entry("presence.bin", presence)},
                   {"dataset", dataset.manifest()}};
  write_json_file(manifest, dir / "manifest.json");
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw InvalidArgument("dataset archive " + dir.string() + " has no manifest.json");
  }
  const json manifest = read_json_file(dir / "manifest.json");
  const int version = manifest.value("format_version", 0);
  if (version != kArchiveFormatVersion) {
    throw FormatVersionMismatch("dataset archive format " + std::to_string(version) + ", expected " +
                                std::to_string(kArchiveFormatVersion));
  }
  std::vector<ModalityInfo> infos;
  Batch data;
  for (const auto& m : manifest.at("modalities")) {
    infos.push_back({m.at("name").get<std::string>(), parse_modality_kind(m.at("kind").get<std::string>()),
                     m.at("sample_shape").get<std::vector<int64_t>>()});
    data.x.push_back(read_entry(dir, m));
  }
  data.labels = read_entry(dir, manifest.at("labels"));
  data.presence = read_entry(dir, manifest.at("presence")).to(torch::kBool);
  return Dataset(std::move(infos), std::move(data), manifest.value("dataset", json::object()));
}

}  // namespace shala
