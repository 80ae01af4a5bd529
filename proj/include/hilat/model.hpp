#pragma once

// Hierarchical label-wise attention head.
//
//   token level (per chunk n):  Z_n = tanh(W H_n)
//                               A_n = softmax_rows(U^T Z_n)        (L x slots)
//                               C_n = H_n A_n^T                    (d_e x L)
//   stacking (per label l):     M_l = [c_1l, ..., c_Nl]            (d_e x N_c)
//   chunk level (per label l):  S_l = tanh(K M_l)
//                               o_l = softmax(v^T S_l)             (1 x N_c)
//                               d_l = M_l o_l^T                    (d_e x 1)
//   classifier:                 p_l = sigmoid(beta_l^T d_l + b_l)
//
// With PAD masking on, token attention runs over the real slots only; PAD
// slots get exactly zero weight and never influence the output.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hilat/encoder.hpp"
#include "hilat/error.hpp"
#include "hilat/rng.hpp"
#include "hilat/tensor.hpp"
#include "hilat/textprep.hpp"

namespace hilat {

enum class DocRepr { chunk_attention, mean_pool, max_pool, flat_concat };

inline DocRepr parse_doc_repr(const std::string& s) {
  if (s == "chunk_attention") return DocRepr::chunk_attention;
  if (s == "mean_pool") return DocRepr::mean_pool;
  if (s == "max_pool") return DocRepr::max_pool;
  if (s == "flat_concat") return DocRepr::flat_concat;
  throw ConfigError("unknown document representation: " + s);
}

inline const char* to_string(DocRepr r) {
  switch (r) {
    case DocRepr::chunk_attention:
      return "chunk_attention";
    case DocRepr::mean_pool:
      return "mean_pool";
    case DocRepr::max_pool:
      return "max_pool";
    case DocRepr::flat_concat:
      return "flat_concat";
  }
  return "chunk_attention";
}

enum class InitScheme { random, label_embedding };

inline InitScheme parse_init_scheme(const std::string& s) {
  if (s == "random") return InitScheme::random;
  if (s == "label_embedding") return InitScheme::label_embedding;
  throw ConfigError("unknown init scheme: " + s);
}

inline const char* to_string(InitScheme s) { return s == InitScheme::random ? "random" : "label_embedding"; }

struct HeadConfig {
  std::size_t d_e = 32;
  std::size_t n_labels = 0;
  std::size_t n_chunks = 10;
  bool mask_pads = true;
  bool multihead = false;  // one (W_n, U_n) pair per chunk
  DocRepr repr = DocRepr::chunk_attention;

  std::size_t repr_width() const { return repr == DocRepr::flat_concat ? n_chunks * d_e : d_e; }
};

struct HeadParams {
  Parameter W;     // d_e x d_e
  Parameter U;     // d_e x L, column l = label vector u_l
  Parameter K;     // d_e x d_e
  Parameter v;     // d_e x 1
  Parameter beta;  // repr_width x L, column l = beta_l
  Parameter b;     // L x 1
  std::vector<Parameter> W_chunks;
  std::vector<Parameter> U_chunks;

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    if (W_chunks.empty()) {
      out = {&W, &U};
    } else {
      for (auto& p : W_chunks) out.push_back(&p);
      for (auto& p : U_chunks) out.push_back(&p);
    }
    for (Parameter* p : {&K, &v, &beta, &b}) out.push_back(p);
    return out;
  }
};

namespace detail {

inline Matrix xavier(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(-bound, bound);
  return m;
}

}  // namespace detail

// Random head: every tensor uniform in +-sqrt(6 / (rows + cols)).
inline HeadParams random_head(const HeadConfig& cfg, Rng& rng) {
  if (cfg.n_labels == 0 || cfg.d_e == 0 || cfg.n_chunks == 0) throw ConfigError("head needs d_e, labels, chunks > 0");
  const std::size_t d = cfg.d_e, L = cfg.n_labels;
  HeadParams h;
  h.W = Parameter("head.W", detail::xavier(d, d, rng));
  h.U = Parameter("head.U", detail::xavier(d, L, rng));
  h.K = Parameter("head.K", detail::xavier(d, d, rng));
  h.v = Parameter("head.v", detail::xavier(d, 1, rng));
  h.beta = Parameter("head.beta", detail::xavier(cfg.repr_width(), L, rng));
  h.b = Parameter("head.b", detail::xavier(L, 1, rng));
  if (cfg.multihead) {
    for (std::size_t n = 0; n < cfg.n_chunks; ++n) {
      h.W_chunks.emplace_back("head.W." + std::to_string(n), detail::xavier(d, d, rng));
      h.U_chunks.emplace_back("head.U." + std::to_string(n), detail::xavier(d, L, rng));
    }
  }
  return h;
}

// Column-mean label vectors: column l of the result is the mean over the
// real slots of the encoder output for description l.
inline Matrix label_embedding_matrix(ChunkEncoder& enc, const std::vector<TokenChunk>& descriptions) {
  Matrix U(enc.width(), descriptions.size());
  for (std::size_t l = 0; l < descriptions.size(); ++l) {
    Tape tape;
    const auto cols = descriptions[l].real_slots();
    const Matrix h = enc.encode_columns(tape, "", descriptions[l], cols).value();
    for (std::size_t i = 0; i < h.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < h.cols(); ++j) s += h(i, j);
      U(i, l) = s / static_cast<double>(h.cols());
    }
  }
  return U;
}

// Random head, then U (and every U_n) set from label descriptions when the
// scheme asks for it.
inline HeadParams init_head(const HeadConfig& cfg, InitScheme scheme, const std::vector<TokenChunk>& descriptions,
                            ChunkEncoder* enc, Rng& rng) {
  HeadParams h = random_head(cfg, rng);
  if (scheme == InitScheme::label_embedding) {
    if (descriptions.size() != cfg.n_labels) {
      throw ConfigError("label_embedding init needs one description per label (" + std::to_string(cfg.n_labels) +
                        "), got " + std::to_string(descriptions.size()));
    }
    if (!enc) throw ConfigError("label_embedding init needs an encoder");
    const Matrix U = label_embedding_matrix(*enc, descriptions);
    h.U.value = U;
    for (auto& u : h.U_chunks) u.value = U;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct TokenAttention {
  Var C;                          // d_e x L
  Var A;                          // L x |cols| over the attended columns
  std::vector<std::size_t> cols;  // slot index of each attended column
};

// Attention over the columns of H (already restricted to attended slots).
inline TokenAttention token_attention_cols(Var H, Var W, Var Ut, std::vector<std::size_t> cols) {
  if (W.rows() != H.rows() || W.cols() != H.rows()) {
    throw ShapeError("token_attention: W is " + W.value().shape_str() + " for d_e=" + std::to_string(H.rows()));
  }
  if (Ut.cols() != H.rows()) throw ShapeError("token_attention: U has wrong width");
  Var Z = tanh(matmul(W, H));
  Var A = softmax_rows(matmul(Ut, Z));
  Var C = matmul(H, transpose(A));
  return {C, A, std::move(cols)};
}

// Token-level attention on a full d_e x slots matrix. `pad_mask` (true = real)
// restricts attention when mask_pads is set.
inline TokenAttention token_attention(Var H, Var W, Var U, const std::vector<bool>& pad_mask, bool mask_pads) {
  if (pad_mask.size() != H.cols()) {
    throw ShapeError("token_attention: mask has " + std::to_string(pad_mask.size()) + " slots, H has " +
                     std::to_string(H.cols()));
  }
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < H.cols(); ++j)
    if (!mask_pads || pad_mask[j]) cols.push_back(j);
  if (cols.empty()) throw DegenerateError("token_attention: every slot is masked");
  Var Hs = cols.size() == H.cols() ? H : gather_cols(H, cols);
  return token_attention_cols(Hs, W, transpose(U), std::move(cols));
}

// Scatters attention rows over attended columns into full slot width.
inline Matrix scatter_attention(const Matrix& A, const std::vector<std::size_t>& cols, std::size_t slots) {
  Matrix full(A.rows(), slots);
  for (std::size_t l = 0; l < A.rows(); ++l)
    for (std::size_t j = 0; j < cols.size(); ++j) full(l, cols[j]) = A(l, j);
  return full;
}

// M_l: column n is column l of C_n.
inline Var stack_label_chunks(const std::vector<Var>& C, std::size_t label) {
  if (C.empty()) throw ShapeError("stack_label_chunks: no chunks");
  std::vector<Var> cols;
  cols.reserve(C.size());
  for (const Var& c : C) {
    if (c.rows() != C.front().rows() || c.cols() != C.front().cols()) {
      throw ShapeError("stack_label_chunks: chunk representations differ in shape");
    }
    if (label >= c.cols()) throw IndexError("stack_label_chunks: label " + std::to_string(label) + " out of range");
    cols.push_back(col(c, label));
  }
  return concat_cols(cols);
}

struct ChunkAttention {
  Var d;  // d_e x 1
  Var o;  // 1 x N_c
};

inline ChunkAttention chunk_attention(Var M, Var K, Var v) {
  if (K.rows() != M.rows() || K.cols() != M.rows() || v.rows() != M.rows() || v.cols() != 1) {
    throw ShapeError("chunk_attention: K/v do not match d_e=" + std::to_string(M.rows()));
  }
  Var S = tanh(matmul(K, M));
  Var o = softmax_rows(matmul(transpose(v), S));
  Var d = matmul(M, transpose(o));
  return {d, o};
}

// Pooling alternatives to chunk attention.
inline Var document_repr_variant(Var M, DocRepr kind) {
  switch (kind) {
    case DocRepr::mean_pool:
      return mean_cols(M);
    case DocRepr::max_pool:
      return max_cols(M);
    case DocRepr::flat_concat:
      return flatten_cols(M);
    case DocRepr::chunk_attention:
      break;
  }
  throw ConfigError("document_repr_variant: chunk_attention is not a pooling variant");
}

// p_l = sigmoid(beta_l^T d_l + b_l) for a single label; returns 1 x 1.
inline Var classify(Var d, Var beta_l, Var b_l) {
  if (!d.value().same_shape(beta_l.value())) throw ShapeError("classify: beta and d differ in shape");
  return sigmoid(add(sum(mul(beta_l, d)), b_l));
}

// Per-example loss: -sum_l [y log p + (1 - y) log(1 - p)] with p clipped to
// [eps, 1 - eps]. `probs` is L x 1 or 1 x L.
inline Var bce_loss(Var probs, const std::vector<double>& targets, double eps = 1e-7) {
  if (probs.value().size() != targets.size()) {
    throw ShapeError("bce_loss: " + std::to_string(probs.value().size()) + " probabilities for " +
                     std::to_string(targets.size()) + " targets");
  }
  Tape& t = *probs.tape;
  Var p = clamp(probs, eps, 1.0 - eps);
  Matrix y(probs.rows(), probs.cols(), std::vector<double>(targets.begin(), targets.end()));
  Matrix one_minus_y = y;
  for (std::size_t i = 0; i < y.size(); ++i) one_minus_y[i] = 1.0 - y[i];
  Var pos = mul(t.constant(std::move(y)), log(p));
  Var neg = mul(t.constant(std::move(one_minus_y)), log(add_scalar(scale(p, -1.0), 1.0)));
  return scale(sum(add(pos, neg)), -1.0);
}

// Mean of per-example losses.
inline Var batch_loss(const std::vector<Var>& per_example) {
  if (per_example.empty()) throw UsageError("batch_loss: empty batch");
  Var total = per_example.front();
  for (std::size_t i = 1; i < per_example.size(); ++i) total = add(total, per_example[i]);
  return scale(total, 1.0 / static_cast<double>(per_example.size()));
}

// Token attention with one parameter pair per chunk.
inline std::vector<TokenAttention> multihead_token_attention(const std::vector<Var>& H, const std::vector<Var>& W,
                                                             const std::vector<Var>& U,
                                                             const std::vector<std::vector<bool>>& masks,
                                                             bool mask_pads) {
  if (W.size() != H.size() || U.size() != H.size()) {
    throw ConfigError("multihead_token_attention: " + std::to_string(W.size()) + " parameter sets for " +
                      std::to_string(H.size()) + " chunks");
  }
  if (masks.size() != H.size()) throw ShapeError("multihead_token_attention: one mask per chunk required");
  std::vector<TokenAttention> out;
  out.reserve(H.size());
  for (std::size_t n = 0; n < H.size(); ++n) out.push_back(token_attention(H[n], W[n], U[n], masks[n], mask_pads));
  return out;
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

struct AttentionRecord {
  std::vector<Matrix> token_attention;  // per chunk: L x slots (A_n)
  std::vector<Matrix> chunk_repr;       // per chunk: d_e x L (C_n)
  std::vector<Matrix> label_chunks;     // per label: d_e x N_c (M_l)
  std::vector<std::vector<double>> chunk_attention;  // per label: N_c (o_l); empty for pooling variants
  std::vector<Matrix> doc_repr;                      // per label: d_l
};

struct Prediction {
  std::vector<double> probs;
  std::vector<bool> binary;
  double threshold = 0.5;
};

inline Prediction make_prediction(std::vector<double> probs, double threshold = 0.5) {
  Prediction p;
  p.threshold = threshold;
  p.binary.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) p.binary[i] = probs[i] >= threshold;
  p.probs = std::move(probs);
  return p;
}

struct ForwardOptions {
  bool training = false;
  double dropout_p = 0.0;
  Rng* rng = nullptr;
  bool record = false;
};

struct ForwardResult {
  Var probs;  // L x 1
  std::optional<AttentionRecord> record;

  Prediction prediction(double threshold = 0.5) const {
    const Matrix& p = probs.value();
    return make_prediction(std::vector<double>(p.values().begin(), p.values().end()), threshold);
  }
};

// Head-level forward from already-encoded chunks (H_n, d_e x |cols_n|).
inline ForwardResult head_forward(Tape& tape, HeadParams& head, const HeadConfig& cfg, const std::vector<Var>& H,
                                  const std::vector<std::vector<std::size_t>>& cols, std::size_t slots,
                                  bool record) {
  if (H.size() != cfg.n_chunks) {
    throw ShapeError("forward: " + std::to_string(H.size()) + " chunks for n_chunks=" + std::to_string(cfg.n_chunks));
  }
  if (cfg.multihead && head.W_chunks.size() != cfg.n_chunks) {
    throw ConfigError("multihead: " + std::to_string(head.W_chunks.size()) + " parameter sets for " +
                      std::to_string(cfg.n_chunks) + " chunks");
  }
  const std::size_t L = cfg.n_labels;
  ForwardResult res;
  if (record) res.record.emplace();

  std::vector<Var> C;
  C.reserve(H.size());
  std::optional<Var> Ut_shared, W_shared;
  if (!cfg.multihead) {
    W_shared = tape.param(head.W);
    Ut_shared = transpose(tape.param(head.U));
  }
  for (std::size_t n = 0; n < H.size(); ++n) {
    if (H[n].cols() == 0) throw DegenerateError("forward: chunk " + std::to_string(n) + " has no attended slots");
    Var W = cfg.multihead ? tape.param(head.W_chunks[n]) : *W_shared;
    Var Ut = cfg.multihead ? transpose(tape.param(head.U_chunks[n])) : *Ut_shared;
    TokenAttention ta = token_attention_cols(H[n], W, Ut, cols[n]);
    if (record) {
      res.record->token_attention.push_back(scatter_attention(ta.A.value(), ta.cols, slots));
      res.record->chunk_repr.push_back(ta.C.value());
    }
    C.push_back(ta.C);
  }

  Var K = tape.param(head.K);
  Var v = tape.param(head.v);
  std::vector<Var> reprs;
  reprs.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    Var M = stack_label_chunks(C, l);
    Var d = M;
    if (cfg.repr == DocRepr::chunk_attention) {
      ChunkAttention ca = chunk_attention(M, K, v);
      d = ca.d;
      if (record) {
        const Matrix& o = ca.o.value();
        res.record->chunk_attention.emplace_back(o.values().begin(), o.values().end());
      }
    } else {
      d = document_repr_variant(M, cfg.repr);
    }
    if (record) {
      res.record->label_chunks.push_back(M.value());
      res.record->doc_repr.push_back(d.value());
    }
    reprs.push_back(d);
  }
  // logits_l = beta_l . d_l + b_l for all labels at once.
  Var D = concat_cols(reprs);
  Var logits = add(transpose(col_sums(mul(tape.param(head.beta), D))), tape.param(head.b));
  res.probs = sigmoid(logits);
  return res;
}

// Encoder + head over a chunked document.
inline ForwardResult forward(Tape& tape, const ChunkedDocument& doc, ChunkEncoder& enc, HeadParams& head,
                             const HeadConfig& cfg, const ForwardOptions& opt = {}) {
  if (doc.chunks.size() != cfg.n_chunks) {
    throw ShapeError("forward: document " + doc.id + " has " + std::to_string(doc.chunks.size()) +
                     " chunks, model expects " + std::to_string(cfg.n_chunks));
  }
  if (enc.width() != cfg.d_e) throw ShapeError("forward: encoder width differs from d_e");
  std::vector<Var> H;
  std::vector<std::vector<std::size_t>> cols;
  for (const auto& chunk : doc.chunks) {
    std::vector<std::size_t> c = cfg.mask_pads ? chunk.real_slots() : detail::all_slots(chunk.slots());
    if (c.empty()) throw DegenerateError("forward: chunk " + std::to_string(chunk.chunk_index) + " is fully masked");
    Var h = enc.encode_columns(tape, doc.id, chunk, c);
    if (opt.training && opt.dropout_p > 0.0) {
      if (!opt.rng) throw UsageError("forward: dropout requires an rng");
      h = dropout(h, opt.dropout_p, *opt.rng);
    }
    H.push_back(h);
    cols.push_back(std::move(c));
  }
  return head_forward(tape, head, cfg, H, cols, enc.slots(), opt.record);
}

}  // namespace hilat
