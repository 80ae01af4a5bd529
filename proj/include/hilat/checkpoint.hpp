#pragma once

// Checkpoint container: a magic line, a one-line JSON manifest (format
// version, free-form metadata, tensor directory with names, shapes and byte
// offsets), then the payload of little-endian float32 arrays in manifest
// order. Also used for external encoder vectors.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilat/encoder.hpp"
#include "hilat/error.hpp"
#include "hilat/tensor.hpp"

namespace hilat {

inline constexpr const char* kCheckpointMagic = "HILAT-CKPT";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return &m;
    return nullptr;
  }

  const Matrix& at(const std::string& name) const {
    if (const Matrix* m = find(name)) return *m;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, m] : ck.tensors) {
    dir.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
    for (double v : m.values()) detail::put_f32(payload, v);
  }
  nlohmann::json manifest = {{"format_version", kCheckpointVersion},
                             {"meta", ck.meta},
                             {"tensors", dir},
                             {"payload_bytes", payload.size()}};
  std::string out = std::string(kCheckpointMagic) + "\n" + manifest.dump() + "\n";
  out += payload;
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::size_t l1 = bytes.find('\n');
  if (l1 == std::string::npos || bytes.compare(0, l1, kCheckpointMagic) != 0) {
    throw FormatError("checkpoint: bad magic line");
  }
  const std::size_t l2 = bytes.find('\n', l1 + 1);
  if (l2 == std::string::npos) throw FormatError("checkpoint: manifest: missing terminator");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(l1 + 1, l2 - l1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest: ") + e.what());
  }
  if (!manifest.contains("format_version") || manifest["format_version"] != kCheckpointVersion) {
    throw FormatError("checkpoint: format_version: expected " + std::to_string(kCheckpointVersion) + ", got " +
                      (manifest.contains("format_version") ? manifest["format_version"].dump() : "none"));
  }
  for (const char* key : {"tensors", "payload_bytes", "meta"}) {
    if (!manifest.contains(key)) throw FormatError(std::string("checkpoint: manifest: missing ") + key);
  }
  const std::size_t payload_off = l2 + 1;
  const std::size_t declared = manifest["payload_bytes"].get<std::size_t>();
  std::size_t expected = 0;
  for (const auto& t : manifest["tensors"]) expected += t["rows"].get<std::size_t>() * t["cols"].get<std::size_t>() * 4;
  if (expected != declared) {
    throw FormatError("checkpoint: payload_bytes: directory implies " + std::to_string(expected) + ", manifest says " +
                      std::to_string(declared));
  }
  const std::size_t available = bytes.size() - payload_off;
  if (available < declared) {
    throw FormatError("checkpoint: payload: truncated (" + std::to_string(available) + " of " +
                      std::to_string(declared) + " bytes)");
  }
  if (available > declared) throw FormatError("checkpoint: payload: trailing bytes after payload");

  Checkpoint ck;
  ck.meta = manifest["meta"];
  for (const auto& t : manifest["tensors"]) {
    const auto rows = t["rows"].get<std::size_t>();
    const auto cols = t["cols"].get<std::size_t>();
    const auto off = t["offset"].get<std::size_t>();
    if (off + rows * cols * 4 > declared) {
      throw FormatError("checkpoint: tensor " + t["name"].get<std::string>() + ": offset out of range");
    }
    Matrix m(rows, cols);
    const char* p = bytes.data() + payload_off + off;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = detail::get_f32(p + 4 * i);
    ck.tensors.emplace_back(t["name"].get<std::string>(), std::move(m));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// Copies named tensors into parameters, validating each shape.
inline void load_into(const Checkpoint& ck, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Matrix& m = ck.at(p->name);
    if (!m.same_shape(p->value)) {
      throw FormatError("checkpoint: tensor " + p->name + ": shape mismatch (file " + m.shape_str() + ", model " +
                        p->value.shape_str() + ")");
    }
    p->value = m;
    p->zero_grad();
  }
}

inline void require_meta(const Checkpoint& ck, const std::string& field, std::size_t expected) {
  if (!ck.meta.contains(field)) throw FormatError("checkpoint: " + field + ": missing");
  const auto got = ck.meta[field].get<std::size_t>();
  if (got != expected) {
    throw FormatError("checkpoint: " + field + ": shape mismatch (file " + std::to_string(got) + ", config " +
                      std::to_string(expected) + ")");
  }
}

// ---------------------------------------------------------------------------
// External vectors
// ---------------------------------------------------------------------------

inline void save_external_vectors(const VectorStore& store, const std::string& path) {
  Checkpoint ck;
  ck.meta = {{"kind", "external_vectors"}, {"d_e", store.width()}, {"slots", store.slots()}};
  std::vector<std::string> keys;
  for (const auto& [k, m] : store.entries()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys) ck.tensors.emplace_back(k, store.entries().at(k));
  save_checkpoint(ck, path);
}

inline VectorStore load_vector_store(const std::string& path, std::size_t d_e, std::size_t slots) {
  const Checkpoint ck = load_checkpoint(path);
  require_meta(ck, "d_e", d_e);
  require_meta(ck, "slots", slots);
  VectorStore store(d_e, slots);
  for (const auto& [name, m] : ck.tensors) {
    const auto hash = name.rfind('#');
    if (hash == std::string::npos) throw FormatError("external vectors: bad key '" + name + "'");
    store.put(name.substr(0, hash), std::stoul(name.substr(hash + 1)), m);
  }
  return store;
}

// One frozen d_e x slots matrix for (doc_id, chunk_index).
inline Matrix load_external_vectors(const std::string& path, const std::string& doc_id, std::size_t chunk_index,
                                    std::size_t d_e, std::size_t slots = 512) {
  const VectorStore store = load_vector_store(path, d_e, slots);
  return store.get(doc_id, chunk_index);
}

}  // namespace hilat
