#include "uidkat/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace uidkat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Kind = CheckpointError::Kind;

constexpr const char* kManifest = "manifest.json";
constexpr const char* kWeights = "weights.bin";
constexpr const char* kModel = "model.json";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

void write_floats(std::ofstream& out, const Tensor<float>& t) {
  std::vector<std::uint32_t> raw(t.numel());
  std::memcpy(raw.data(), t.data(), t.numel() * sizeof(float));
  for (auto& w : raw) w = to_le(w);
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
}

json read_json(const fs::path& path, Kind corrupt) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(Kind::kMissing, "checkpoint file '" + path.string() + "' not found");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError(corrupt, "cannot parse '" + path.string() + "': " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw CheckpointError(Kind::kIo, "cannot write '" + path.string() + "'");
}

}  // namespace

void save_tensors(const fs::path& dir, const TensorRefs& tensors) {
  fs::create_directories(dir);
  json manifest = json::array();
  std::ofstream blob(dir / kWeights, std::ios::binary | std::ios::trunc);
  if (!blob) throw CheckpointError(Kind::kIo, "cannot write '" + (dir / kWeights).string() + "'");
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t len = t->numel() * sizeof(float);
    manifest.push_back({{"name", name},
                        {"shape", t->shape()},
                        {"dtype", "float32"},
                        {"byte_offset", offset},
                        {"byte_length", len}});
    write_floats(blob, *t);
    offset += len;
  }
  blob.close();
  if (!blob) throw CheckpointError(Kind::kIo, "cannot write '" + (dir / kWeights).string() + "'");
  write_json(dir / kManifest, manifest);
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const json j = read_json(dir / kManifest, Kind::kCorruptManifest);
  if (!j.is_array()) throw CheckpointError(Kind::kCorruptManifest, "manifest is not a JSON array");
  std::vector<ManifestEntry> out;
  std::size_t offset = 0;
  for (const auto& e : j) {
    ManifestEntry m;
    try {
      m.name = e.at("name").get<std::string>();
      m.shape = e.at("shape").get<Shape>();
      m.byte_offset = e.at("byte_offset").get<std::size_t>();
      m.byte_length = e.at("byte_length").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "float32") {
        throw CheckpointError(Kind::kCorruptManifest, "tensor '" + m.name + "' is not float32");
      }
    } catch (const json::exception& ex) {
      throw CheckpointError(Kind::kCorruptManifest, std::string("malformed manifest entry: ") + ex.what());
    }
    if (m.byte_offset != offset) {
      throw CheckpointError(Kind::kCorruptManifest,
                            "tensor '" + m.name + "' has byte_offset " + std::to_string(m.byte_offset) +
                                ", expected " + std::to_string(offset));
    }
    if (m.byte_length != shape_numel(m.shape) * sizeof(float)) {
      throw CheckpointError(Kind::kCorruptManifest,
                            "tensor '" + m.name + "' byte_length disagrees with its shape");
    }
    offset += m.byte_length;
    out.push_back(std::move(m));
  }
  return out;
}

void load_tensors(const fs::path& dir, const TensorRefs& into) {
  const auto entries = read_manifest(dir);
  if (entries.size() != into.size()) {
    throw CheckpointError(Kind::kCorruptManifest,
                          "manifest lists " + std::to_string(entries.size()) + " tensors, expected " +
                              std::to_string(into.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = into[i];
    if (entries[i].name != name) {
      throw CheckpointError(Kind::kCorruptManifest, "manifest entry " + std::to_string(i) + " is '" +
                                                        entries[i].name + "', expected '" + name + "'");
    }
    if (entries[i].shape != t->shape()) {
      throw CheckpointError(Kind::kShapeMismatch, "tensor '" + name + "' has shape " +
                                                      shape_str(entries[i].shape) + ", expected " +
                                                      shape_str(t->shape()));
    }
  }
  const fs::path wpath = dir / kWeights;
  if (!fs::exists(wpath)) throw CheckpointError(Kind::kMissing, "'" + wpath.string() + "' not found");
  const std::size_t expected =
      entries.empty() ? 0 : entries.back().byte_offset + entries.back().byte_length;
  const auto actual = static_cast<std::size_t>(fs::file_size(wpath));
  if (actual < expected) {
    throw CheckpointError(Kind::kTruncated, "'" + wpath.string() + "' holds " + std::to_string(actual) +
                                                " bytes, manifest needs " + std::to_string(expected));
  }
  if (actual > expected) {
    throw CheckpointError(Kind::kCorruptManifest,
                          "'" + wpath.string() + "' has " + std::to_string(actual - expected) +
                              " bytes beyond the manifest");
  }
  std::ifstream blob(wpath, std::ios::binary);
  std::vector<std::uint32_t> raw;
  for (const auto& [name, t] : into) {
    raw.resize(t->numel());
    blob.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
    if (!blob) throw CheckpointError(Kind::kTruncated, "short read for tensor '" + name + "'");
    for (auto& w : raw) w = to_le(w);
    std::memcpy(t->data(), raw.data(), raw.size() * sizeof(float));
  }
}

TensorRefs param_values(const ParamRefs<float>& params) {
  TensorRefs out;
  out.reserve(params.size());
  for (auto* p : params) out.emplace_back(p->name, &p->value);
  return out;
}

json to_json(const GeneratorConfig& cfg) {
  const auto& b = cfg.block;
  return {{"variant", std::string(1, cfg.variant)},
          {"ngf", cfg.ngf},
          {"n_blocks", cfg.n_blocks},
          {"encoder_activation", activation_name(cfg.encoder_activation)},
          {"skip_mode", skip_mode_name(cfg.skip_mode)},
          {"scconv_rate", cfg.scconv_rate},
          {"block",
           {{"patch_size", b.patch_size},
            {"embed_dim", b.embed_dim},
            {"token_mixer", mixer_name(b.token_mixer)},
            {"channel_mixer", mixer_name(b.channel_mixer)},
            {"grkan_stack", b.grkan_stack},
            {"grkan_groups", b.grkan_groups},
            {"grkan_layers", b.grkan_layers},
            {"hidden_ratio", b.hidden_ratio},
            {"num_order", b.num_order},
            {"den_order", b.den_order},
            {"rational_init", rational_init_name(b.rational_init)},
            {"unembed_kernel", b.unembed_kernel}}}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig cfg;
  try {
    const auto tag = j.at("variant").get<std::string>();
    cfg.variant = tag.empty() ? '?' : tag[0];
    cfg.ngf = j.at("ngf").get<std::size_t>();
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.encoder_activation = parse_activation(j.at("encoder_activation").get<std::string>());
    cfg.skip_mode = parse_skip_mode(j.at("skip_mode").get<std::string>());
    cfg.scconv_rate = j.at("scconv_rate").get<std::size_t>();
    const auto& b = j.at("block");
    cfg.block.channels = cfg.latent_channels();
    cfg.block.patch_size = b.at("patch_size").get<std::size_t>();
    cfg.block.embed_dim = b.at("embed_dim").get<std::size_t>();
    cfg.block.token_mixer = parse_mixer(b.at("token_mixer").get<std::string>());
    cfg.block.channel_mixer = parse_mixer(b.at("channel_mixer").get<std::string>());
    cfg.block.grkan_stack = b.at("grkan_stack").get<std::size_t>();
    cfg.block.grkan_groups = b.at("grkan_groups").get<std::size_t>();
    cfg.block.grkan_layers = b.at("grkan_layers").get<std::size_t>();
    cfg.block.hidden_ratio = b.at("hidden_ratio").get<std::size_t>();
    cfg.block.num_order = b.at("num_order").get<std::size_t>();
    cfg.block.den_order = b.at("den_order").get<std::size_t>();
    cfg.block.rational_init = parse_rational_init(b.at("rational_init").get<std::string>());
    cfg.block.unembed_kernel = b.at("unembed_kernel").get<std::size_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::kCorruptManifest, std::string("malformed model config: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(Kind::kCorruptManifest, std::string("invalid model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_generator(const fs::path& dir, Generator<float>& gen) {
  save_tensors(dir, param_values(gen.params()));
  write_json(dir / kModel, to_json(gen.cfg));
}

Generator<float> load_generator(const fs::path& dir) {
  const auto cfg = generator_config_from_json(read_json(dir / kModel, Kind::kCorruptManifest));
  Rng rng(0);
  Generator<float> gen = make_generator<float>(cfg, rng);
  load_tensors(dir, param_values(gen.params()));
  return gen;
}

}  // namespace uidkat
