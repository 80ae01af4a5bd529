#pragma once

// Chunk encoders: map a TokenChunk to its token representation matrix
// H (d_e x slots), column j = vector of slot j.

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hilat/error.hpp"
#include "hilat/rng.hpp"
#include "hilat/tensor.hpp"
#include "hilat/textprep.hpp"

namespace hilat {

enum class FreezeMode { none, all, all_but_last };

inline FreezeMode parse_freeze_mode(const std::string& s) {
  if (s == "none") return FreezeMode::none;
  if (s == "all") return FreezeMode::all;
  if (s == "all_but_last") return FreezeMode::all_but_last;
  throw ConfigError("unknown freeze mode: " + s);
}

inline const char* to_string(FreezeMode m) {
  switch (m) {
    case FreezeMode::none:
      return "none";
    case FreezeMode::all:
      return "all";
    case FreezeMode::all_but_last:
      return "all_but_last";
  }
  return "none";
}

struct EncodeOptions {
  double dropout_p = 0.0;
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout_p > 0
};

class ChunkEncoder {
 public:
  virtual ~ChunkEncoder() = default;

  virtual std::size_t width() const = 0;
  virtual std::size_t slots() const = 0;

  // Representation of the selected slots only: d_e x |cols|, identical to the
  // matching columns of the full encoding. Dropout is not applied here.
  virtual Var encode_columns(Tape& tape, std::string_view doc_id, const TokenChunk& chunk,
                             const std::vector<std::size_t>& cols) = 0;

  virtual std::vector<Parameter*> parameters() = 0;
  virtual void set_frozen(FreezeMode mode) = 0;
};

namespace detail {

inline std::vector<std::size_t> all_slots(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

// Full d_e x slots encoding with optional inverted dropout when training.
inline Var encode_chunk(Tape& tape, ChunkEncoder& enc, std::string_view doc_id, const TokenChunk& chunk,
                        const EncodeOptions& opt = {}) {
  Var h = enc.encode_columns(tape, doc_id, chunk, detail::all_slots(chunk.slots()));
  if (opt.training && opt.dropout_p > 0.0) {
    if (!opt.rng) throw UsageError("encode_chunk: dropout requires an rng");
    h = dropout(h, opt.dropout_p, *opt.rng);
  }
  return h;
}

struct EncoderParams {
  Parameter token_embedding;     // |V| x d_e
  Parameter position_embedding;  // slots x d_e
  Parameter mix_weight;          // d_e x d_e
  Parameter mix_bias;            // d_e x 1
  bool mixing = true;
};

// Token embedding + learned position embedding, optionally followed by one
// tanh mixing layer: H = tanh(Wmix (E + P) + bmix).
class EmbeddingEncoder final : public ChunkEncoder {
 public:
  EmbeddingEncoder(std::size_t vocab_size, std::size_t d_e, std::size_t slots, bool mixing, Rng& rng)
      : slots_(slots) {
    p_.mixing = mixing;
    Matrix tok(vocab_size, d_e);
    for (std::size_t i = 0; i < tok.size(); ++i) tok[i] = rng.uniform(-0.1, 0.1);
    for (std::size_t j = 0; j < d_e && vocab_size > 0; ++j) tok(Vocabulary::kPad, j) = 0.0;
    Matrix pos(slots, d_e);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = rng.uniform(-0.1, 0.1);
    const double bound = std::sqrt(6.0 / static_cast<double>(2 * d_e));
    Matrix mw(d_e, d_e);
    for (std::size_t i = 0; i < mw.size(); ++i) mw[i] = rng.uniform(-bound, bound);
    p_.token_embedding = Parameter("encoder.token_embedding", std::move(tok));
    p_.position_embedding = Parameter("encoder.position_embedding", std::move(pos));
    p_.mix_weight = Parameter("encoder.mix_weight", std::move(mw));
    p_.mix_bias = Parameter("encoder.mix_bias", Matrix(d_e, 1));
  }

  explicit EmbeddingEncoder(EncoderParams params)
      : p_(std::move(params)), slots_(p_.position_embedding.value.rows()) {}

  std::size_t width() const override { return p_.token_embedding.value.cols(); }
  std::size_t slots() const override { return slots_; }
  std::size_t vocab_size() const { return p_.token_embedding.value.rows(); }
  bool mixing() const { return p_.mixing; }

  EncoderParams& params() { return p_; }
  const EncoderParams& params() const { return p_; }

  Var encode_columns(Tape& tape, std::string_view, const TokenChunk& chunk,
                     const std::vector<std::size_t>& cols) override {
    if (chunk.slots() != slots_) {
      throw ShapeError("encoder expects " + std::to_string(slots_) + " slots, chunk has " +
                       std::to_string(chunk.slots()));
    }
    std::vector<std::size_t> ids(cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (cols[j] >= slots_) throw IndexError("encoder: slot " + std::to_string(cols[j]) + " out of range");
      ids[j] = chunk.token_ids[cols[j]];
      if (ids[j] >= vocab_size()) {
        throw IndexError("encoder: token id " + std::to_string(ids[j]) + " >= vocabulary size " +
                         std::to_string(vocab_size()));
      }
    }
    Var e = lookup_cols(tape.param(p_.token_embedding), std::move(ids));
    Var pos = lookup_cols(tape.param(p_.position_embedding), cols);
    Var h = add(e, pos);
    if (p_.mixing) h = tanh(add_col_broadcast(matmul(tape.param(p_.mix_weight), h), tape.param(p_.mix_bias)));
    return h;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> v = {&p_.token_embedding, &p_.position_embedding};
    if (p_.mixing) {
      v.push_back(&p_.mix_weight);
      v.push_back(&p_.mix_bias);
    }
    return v;
  }

  // all_but_last keeps the mixing layer trainable and freezes the tables.
  void set_frozen(FreezeMode mode) override {
    const bool tables = mode != FreezeMode::none;
    const bool mix = mode == FreezeMode::all;
    p_.token_embedding.frozen = tables;
    p_.position_embedding.frozen = tables;
    p_.mix_weight.frozen = mix;
    p_.mix_bias.frozen = mix;
  }

 private:
  EncoderParams p_;
  std::size_t slots_;
};

// Precomputed, frozen token representations keyed by (doc_id, chunk_index).
class VectorStore {
 public:
  VectorStore(std::size_t d_e, std::size_t slots) : d_e_(d_e), slots_(slots) {}

  static std::string key(std::string_view doc_id, std::size_t chunk_index) {
    return std::string(doc_id) + "#" + std::to_string(chunk_index);
  }

  void put(std::string_view doc_id, std::size_t chunk_index, Matrix h) {
    if (h.rows() != d_e_ || h.cols() != slots_) {
      throw FormatError("external vectors must be " + std::to_string(d_e_) + "x" + std::to_string(slots_) + ", got " +
                        h.shape_str());
    }
    entries_[key(doc_id, chunk_index)] = std::move(h);
  }

  const Matrix& get(std::string_view doc_id, std::size_t chunk_index) const {
    auto it = entries_.find(key(doc_id, chunk_index));
    if (it == entries_.end()) {
      throw IndexError("no external vectors for document '" + std::string(doc_id) + "' chunk " +
                       std::to_string(chunk_index));
    }
    return it->second;
  }

  std::size_t width() const { return d_e_; }
  std::size_t slots() const { return slots_; }
  const std::unordered_map<std::string, Matrix>& entries() const { return entries_; }

 private:
  std::size_t d_e_;
  std::size_t slots_;
  std::unordered_map<std::string, Matrix> entries_;
};

// Serves stored matrices as non-trainable encoder outputs.
class ExternalVectorEncoder final : public ChunkEncoder {
 public:
  explicit ExternalVectorEncoder(std::shared_ptr<const VectorStore> store) : store_(std::move(store)) {}

  std::size_t width() const override { return store_->width(); }
  std::size_t slots() const override { return store_->slots(); }

  Var encode_columns(Tape& tape, std::string_view doc_id, const TokenChunk& chunk,
                     const std::vector<std::size_t>& cols) override {
    const Matrix& h = store_->get(doc_id, chunk.chunk_index);
    return gather_cols(tape.constant_ref(h), cols);
  }

  std::vector<Parameter*> parameters() override { return {}; }
  void set_frozen(FreezeMode) override {}

 private:
  std::shared_ptr<const VectorStore> store_;
};

}  // namespace hilat
