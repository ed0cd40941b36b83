#pragma once

// Checkpoint container.
//
//   bytes 0..7   magic "FDCKPT\0\1"
//   bytes 8..11  format version (uint32, little endian)
//   bytes 12..19 manifest length N (uint64, little endian)
//   next N bytes JSON manifest: model config, metadata, and one entry per
//                tensor {name, shape [rows, cols], dtype, offset, nbytes}
//   remainder    tensor payload; offsets are relative to its first byte
//
// Payload values are the raw IEEE-754 little-endian bytes, so a save/load
// round trip is bit-exact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"

namespace flexdepth {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'D', 'C', 'K', 'P', 'T', '\0', '\1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, double>) {
    return "f64";
  } else {
    static_assert(std::is_same_v<T, float>, "unsupported scalar type");
    return "f32";
  }
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers}, {"width", c.width},
          {"heads", c.heads},           {"ffn_width", c.ffn_width},   {"vocab_size", c.vocab_size},
          {"max_len", c.max_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_width = j.at("ffn_width").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  validate(c);
  return c;
}

using CheckpointMetadata = std::map<std::string, std::string>;

template <typename T>
void write_checkpoint(std::ostream& os, const Parameters<T>& p, const CheckpointMetadata& meta = {}) {
  nlohmann::json manifest;
  manifest["format"] = "flexdepth-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = config_to_json(p.config);
  manifest["metadata"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for_each_tensor(p, [&](const std::string& name, const Matrix<T>& m) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(m.size()) * sizeof(T);
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", {m.rows(), m.cols()}},
                                   {"dtype", dtype_name<T>()},
                                   {"offset", offset},
                                   {"nbytes", nbytes}});
    offset += nbytes;
  });
  const std::string text = manifest.dump();
  const std::uint64_t len = text.size();
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  os.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for_each_tensor(p, [&](const std::string&, const Matrix<T>& m) {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
  });
  if (!os) throw Error("checkpoint write failed");
}

struct CheckpointHeader {
  std::uint32_t version = 0;
  nlohmann::json manifest;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw ValidationError("not a flexdepth checkpoint");
  CheckpointHeader h;
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&h.version), sizeof(h.version));
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is) throw ValidationError("truncated checkpoint header");
  if (h.version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(h.version));
  }
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw ValidationError("truncated checkpoint manifest");
  try {
    h.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint manifest: ") + e.what());
  }
  return h;
}

template <typename T>
Parameters<T> read_checkpoint(std::istream& is, CheckpointMetadata* meta = nullptr) {
  const CheckpointHeader header = read_checkpoint_header(is);
  const nlohmann::json& manifest = header.manifest;
  const ModelConfig config = config_from_json(manifest.at("config"));
  if (meta) *meta = manifest.value("metadata", CheckpointMetadata{});
  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;

  Parameters<T> p = init_params<T>(config, 0);
  std::size_t seen = 0;
  for_each_tensor(p, [&](const std::string& name, Matrix<T>& m) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ValidationError("checkpoint lacks tensor " + name);
    const auto& e = it->second;
    if (e.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw ValidationError("tensor " + name + " has dtype " + e.at("dtype").get<std::string>());
    }
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols()) {
      throw ValidationError("tensor " + name + " has unexpected shape");
    }
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(m.size()) * sizeof(T) || offset + nbytes > payload.size()) {
      throw ValidationError("tensor " + name + " lies outside the payload");
    }
    std::memcpy(m.data(), payload.data() + offset, nbytes);
    ++seen;
  });
  if (seen != entries.size()) throw ValidationError("checkpoint has unexpected extra tensors");
  return p;
}

template <typename T>
void save_checkpoint(const std::string& path, const Parameters<T>& p, const CheckpointMetadata& meta = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot write " + path);
  write_checkpoint(os, p, meta);
}

template <typename T = double>
Parameters<T> load_checkpoint(const std::string& path, CheckpointMetadata* meta = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + path);
  return read_checkpoint<T>(is, meta);
}

}  // namespace flexdepth
