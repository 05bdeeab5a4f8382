#pragma once

#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsd/nn.hpp"

TSD_NAMESPACE_BEGIN

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint is a directory holding manifest.json (name, shape and byte
// offset of every parameter, plus free-form metadata) and params.bin, the
// parameters as little-endian float32 in manifest order.
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "params.bin";

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const nlohmann::json& meta);

// Overwrites every parameter in `params` from the checkpoint and returns the
// stored metadata. Missing names or shape mismatches throw CheckpointError.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamSet& params);

nlohmann::json read_manifest(const std::filesystem::path& dir);

TSD_NAMESPACE_END
