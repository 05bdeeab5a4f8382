#include "tsd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

TSD_NAMESPACE_BEGIN

namespace {

void put_f32(std::vector<char>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "tsd-checkpoint";
  manifest["version"] = 1;
  manifest["blob"] = kBlobFile;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["meta"] = meta;
  auto& entries = manifest["params"] = nlohmann::json::array();

  std::vector<char> blob;
  blob.reserve(params.numel() * 4);
  for (const auto& p : params.items()) {
    entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
    for (Real v : p.tensor.data()) put_f32(blob, static_cast<float>(v));
  }

  std::ofstream bin(dir / kBlobFile, std::ios::binary | std::ios::trunc);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream json(dir / kManifestFile, std::ios::trunc);
  json << manifest.dump(2) << '\n';
  if (!bin || !json) throw CheckpointError("failed to write checkpoint to " + dir.string());
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw CheckpointError("cannot open " + (dir / kManifestFile).string());
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded() || manifest.value("format", "") != "tsd-checkpoint") {
    throw CheckpointError("not a checkpoint manifest: " + (dir / kManifestFile).string());
  }
  return manifest;
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamSet& params) {
  const nlohmann::json manifest = read_manifest(dir);
  std::ifstream bin(dir / manifest.value("blob", kBlobFile), std::ios::binary);
  if (!bin) throw CheckpointError("cannot open checkpoint blob in " + dir.string());
  const std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  for (auto& p : params.items()) {
    const nlohmann::json* entry = nullptr;
    for (const auto& e : manifest["params"]) {
      if (e["name"] == p.name) entry = &e;
    }
    if (!entry) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if ((*entry)["shape"].get<Shape>() != p.tensor.shape()) {
      throw CheckpointError("shape mismatch for " + p.name + ": checkpoint " +
                            shape_str((*entry)["shape"].get<Shape>()) + ", model " + shape_str(p.tensor.shape()));
    }
    const auto offset = (*entry)["offset"].get<std::size_t>();
    if (offset + p.tensor.numel() * 4 > blob.size()) throw CheckpointError("truncated blob for " + p.name);
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(get_f32(blob.data() + offset + 4 * i));
  }
  return manifest.value("meta", nlohmann::json::object());
}

TSD_NAMESPACE_END
