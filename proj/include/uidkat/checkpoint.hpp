#pragma once

// Checkpoint directories: manifest.json (ordered {name, shape, dtype,
// byte_offset, byte_length}) and weights.bin (little-endian float32 tensors in
// manifest order). A generator checkpoint adds model.json with its config.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uidkat/networks.hpp"

namespace uidkat {

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t byte_offset = 0;
  std::size_t byte_length = 0;
};

using TensorRefs = std::vector<std::pair<std::string, Tensor<float>*>>;

/// Writes manifest.json and weights.bin into `dir` (created if missing).
void save_tensors(const std::filesystem::path& dir, const TensorRefs& tensors);

/// Parses and validates manifest.json (offsets contiguous, lengths = 4 * numel).
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

/// Fills every tensor in `into` from `dir`. The manifest must list exactly these
/// names in this order. Throws CheckpointError of kind kCorruptManifest,
/// kShapeMismatch (naming the tensor), kTruncated or kMissing.
void load_tensors(const std::filesystem::path& dir, const TensorRefs& into);

TensorRefs param_values(const ParamRefs<float>& params);

nlohmann::json to_json(const GeneratorConfig& cfg);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

/// model.json + manifest.json + weights.bin for the generator alone.
void save_generator(const std::filesystem::path& dir, Generator<float>& gen);
Generator<float> load_generator(const std::filesystem::path& dir);

}  // namespace uidkat
