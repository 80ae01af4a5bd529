#pragma once

// Model assembly, AdamW, the warmup/decay schedule, the training loop,
// batch prediction and a finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilat/checkpoint.hpp"
#include "hilat/encoder.hpp"
#include "hilat/error.hpp"
#include "hilat/metrics.hpp"
#include "hilat/model.hpp"
#include "hilat/rng.hpp"
#include "hilat/tensor.hpp"
#include "hilat/textprep.hpp"

namespace hilat {

struct ModelConfig {
  std::size_t d_e = 32;
  bool mixing = true;
  bool mask_pads = true;
  FreezeMode freeze = FreezeMode::none;
  InitScheme init = InitScheme::random;
  bool multihead = false;
  DocRepr repr = DocRepr::chunk_attention;
  std::size_t min_freq = 1;
  std::string external_vectors;  // path; empty = trainable embedding encoder
};

// Ablation letters: a keep non-alphabetic, b drop stop words, c raw order,
// d section-grouped chunks, e freeze all but the last encoder layer,
// f label-description init, g per-chunk token attention, h mean pooling,
// i max pooling, j flat concatenation. Several letters may be combined.
inline void apply_variant(const std::string& letters, PrepConfig& prep, ModelConfig& model) {
  for (char c : letters) {
    switch (c) {
      case 'a':
        prep.clean.keep_nonalpha = true;
        break;
      case 'b':
        prep.clean.remove_stopwords = true;
        break;
      case 'c':
        prep.reorder = false;
        break;
      case 'd':
        prep.strategy = ChunkStrategy::meaningful;
        break;
      case 'e':
        model.freeze = FreezeMode::all_but_last;
        break;
      case 'f':
        model.init = InitScheme::label_embedding;
        break;
      case 'g':
        model.multihead = true;
        break;
      case 'h':
        model.repr = DocRepr::mean_pool;
        break;
      case 'i':
        model.repr = DocRepr::max_pool;
        break;
      case 'j':
        model.repr = DocRepr::flat_concat;
        break;
      default:
        throw ConfigError(std::string("unknown variant letter '") + c + "' (expected a-j)");
    }
  }
}

// "code<TAB>description" per line.
inline std::map<std::string, std::string> parse_label_descriptions(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("label descriptions: line " + std::to_string(lineno) + ": no tab");
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

inline std::map<std::string, std::string> load_label_descriptions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label descriptions: " + path);
  return parse_label_descriptions(in);
}

// ---------------------------------------------------------------------------
// Config <-> JSON (checkpoint metadata and run logs)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PrepConfig& p) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [h, g] : p.section_map.groups) groups[h] = g;
  return {{"keep_nonalpha", p.clean.keep_nonalpha},
          {"remove_stopwords", p.clean.remove_stopwords},
          {"deid_pattern", p.clean.deid_source},
          {"reorder", p.reorder},
          {"front_sections", p.front_sections},
          {"n_chunks", p.n_chunks},
          {"content_len", p.content_len},
          {"strategy", to_string(p.strategy)},
          {"section_map", {{"groups", groups}, {"fallback", p.section_map.fallback}}},
          {"subword_threshold", p.subword_threshold}};
}

inline PrepConfig prep_from_json(const nlohmann::json& j) {
  PrepConfig p;
  try {
    p.clean.keep_nonalpha = j.at("keep_nonalpha").get<bool>();
    p.clean.remove_stopwords = j.at("remove_stopwords").get<bool>();
    p.clean.set_deid_pattern(j.value("deid_pattern", std::string()));
    p.reorder = j.at("reorder").get<bool>();
    p.front_sections = j.at("front_sections").get<std::vector<std::string>>();
    p.n_chunks = j.at("n_chunks").get<std::size_t>();
    p.content_len = j.at("content_len").get<std::size_t>();
    p.strategy = parse_chunk_strategy(j.at("strategy").get<std::string>());
    p.section_map.groups.clear();
    for (const auto& [h, g] : j.at("section_map").at("groups").items()) p.section_map.groups[h] = g.get<std::size_t>();
    p.section_map.fallback = j.at("section_map").at("fallback").get<std::size_t>();
    p.subword_threshold = j.at("subword_threshold").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: prep config: ") + e.what());
  }
  return p;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"d_e", m.d_e},
          {"mixing", m.mixing},
          {"mask_pads", m.mask_pads},
          {"freeze", to_string(m.freeze)},
          {"init", to_string(m.init)},
          {"multihead", m.multihead},
          {"repr", to_string(m.repr)},
          {"min_freq", m.min_freq},
          {"external_vectors", m.external_vectors}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  try {
    m.d_e = j.at("d_e").get<std::size_t>();
    m.mixing = j.at("mixing").get<bool>();
    m.mask_pads = j.at("mask_pads").get<bool>();
    m.freeze = parse_freeze_mode(j.at("freeze").get<std::string>());
    m.init = parse_init_scheme(j.at("init").get<std::string>());
    m.multihead = j.at("multihead").get<bool>();
    m.repr = parse_doc_repr(j.at("repr").get<std::string>());
    m.min_freq = j.at("min_freq").get<std::size_t>();
    m.external_vectors = j.value("external_vectors", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: model config: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class HilatModel {
 public:
  PrepConfig prep;
  ModelConfig config;
  Vocabulary vocab;
  LabelSet labels;
  std::unique_ptr<ChunkEncoder> encoder;
  HeadParams head;

  HeadConfig head_config() const {
    HeadConfig h;
    h.d_e = config.d_e;
    h.n_labels = labels.size();
    h.n_chunks = prep.n_chunks;
    h.mask_pads = config.mask_pads;
    h.multihead = config.multihead;
    h.repr = config.repr;
    return h;
  }

  // Fresh model: vocabulary from `train_docs`, seeded initialization.
  static HilatModel create(const std::vector<Document>& train_docs, LabelSet label_set, PrepConfig prep_cfg,
                           ModelConfig model_cfg, std::uint64_t seed,
                           const std::map<std::string, std::string>* descriptions = nullptr) {
    if (label_set.size() == 0) throw ConfigError("model needs at least one label");
    HilatModel m;
    m.prep = std::move(prep_cfg);
    m.config = std::move(model_cfg);
    m.labels = std::move(label_set);
    m.vocab = build_vocab(train_docs, m.prep, m.config.min_freq);
    Rng rng = Rng::derive(seed, 1);
    m.make_encoder(&rng);
    m.encoder->set_frozen(m.config.freeze);
    std::vector<TokenChunk> desc;
    if (m.config.init == InitScheme::label_embedding) {
      if (!descriptions) throw ConfigError("label_embedding init needs label descriptions");
      for (const auto& code : m.labels.codes()) {
        auto it = descriptions->find(code);
        if (it == descriptions->end()) throw ConfigError("no description for label " + code);
        desc.push_back(m.description_chunk(it->second));
      }
    }
    m.head = init_head(m.head_config(), m.config.init, desc, m.encoder.get(), rng);
    return m;
  }

  TokenChunk description_chunk(const std::string& text) const {
    const auto words = detail::split_ws(clean_text(text, prep.clean));
    return chunk_words("", words, vocab, 1, prep.content_len, prep.subword_threshold).chunks.front();
  }

  ChunkedDocument prepare(const Document& d) const { return chunk_document(d, vocab, prep, &labels); }

  std::vector<ChunkedDocument> prepare(const std::vector<Document>& docs) const {
    std::vector<ChunkedDocument> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(prepare(d));
    return out;
  }

  ForwardResult forward(Tape& tape, const ChunkedDocument& doc, const ForwardOptions& opt = {}) {
    return hilat::forward(tape, doc, *encoder, head, head_config(), opt);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = encoder->parameters();
    for (Parameter* p : head.all()) out.push_back(p);
    return out;
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.meta = {{"d_e", config.d_e},
               {"n_labels", labels.size()},
               {"n_chunks", prep.n_chunks},
               {"model", to_json(config)},
               {"prep", to_json(prep)},
               {"vocab", vocab.content_tokens()},
               {"labels", labels.codes()}};
    for (Parameter* p : parameters()) ck.tensors.emplace_back(p->name, p->value);
    return ck;
  }

  static HilatModel from_checkpoint(const Checkpoint& ck) {
    HilatModel m;
    try {
      m.config = model_config_from_json(ck.meta.at("model"));
      m.prep = prep_from_json(ck.meta.at("prep"));
      m.vocab = Vocabulary(ck.meta.at("vocab").get<std::vector<std::string>>());
      m.labels = LabelSet(ck.meta.at("labels").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: meta: ") + e.what());
    }
    require_meta(ck, "d_e", m.config.d_e);
    require_meta(ck, "n_labels", m.labels.size());
    require_meta(ck, "n_chunks", m.prep.n_chunks);
    Rng rng(0);
    m.make_encoder(&rng);
    m.head = random_head(m.head_config(), rng);
    load_into(ck, m.parameters());
    m.encoder->set_frozen(m.config.freeze);
    return m;
  }

 private:
  void make_encoder(Rng* rng) {
    if (config.external_vectors.empty()) {
      encoder = std::make_unique<EmbeddingEncoder>(vocab.size(), config.d_e, prep.slots(), config.mixing, *rng);
    } else {
      auto store = std::make_shared<const VectorStore>(load_vector_store(config.external_vectors, config.d_e, prep.slots()));
      encoder = std::make_unique<ExternalVectorEncoder>(std::move(store));
    }
  }
};

// Verifies that a checkpointed model was trained on the given label vocabulary.
inline void require_same_labels(const HilatModel& m, const LabelSet& labels) {
  if (m.labels.codes() != labels.codes()) {
    throw ValidationError("label vocabulary mismatch: checkpoint has " + std::to_string(m.labels.size()) +
                          " labels, dataset vocabulary has " + std::to_string(labels.size()) +
                          " (or the order differs)");
  }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::unordered_map<const Parameter*, std::pair<Matrix, Matrix>> moments;
};

// Decoupled weight decay (theta -= lr*wd*theta) followed by the bias-corrected
// Adam update. Frozen tensors are skipped; any non-finite gradient aborts
// before a single value changes.
inline void adamw_step(const std::vector<Parameter*>& params, AdamState& st, double lr, double weight_decay) {
  for (const Parameter* p : params) {
    if (p->frozen) continue;
    if (!p->grad.same_shape(p->value)) throw ShapeError("adamw: gradient of " + p->name + " has the wrong shape");
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad[i])) {
        throw NumericError("adamw: non-finite gradient in " + p->name + " at flat index " + std::to_string(i));
      }
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (Parameter* p : params) {
    if (p->frozen) continue;
    auto [it, fresh] = st.moments.try_emplace(p);
    auto& [m, v] = it->second;
    if (fresh) {
      m = Matrix(p->value.rows(), p->value.cols());
      v = Matrix(p->value.rows(), p->value.cols());
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      double& theta = p->value[i];
      theta -= lr * weight_decay * theta;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      theta -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
    }
  }
}

// Linear ramp 0 -> base over warmup, then linear decay to 0 at total.
inline double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total, double base_lr) {
  if (step < 1 || step > total) {
    throw UsageError("lr_schedule: step " + std::to_string(step) + " outside 1.." + std::to_string(total));
  }
  if (warmup > total) throw UsageError("lr_schedule: warmup exceeds total steps");
  if (step <= warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return base_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 5e-5;
  double weight_decay = 0.1;
  std::size_t total_steps = 2500;
  std::size_t warmup_steps = 500;
  double dropout_p = 0.1;
  std::uint64_t seed = 0;
  std::size_t val_every = 100;
  std::size_t workers = 1;
  double threshold = 0.5;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0, 1)");
    if (workers == 0) throw ConfigError("workers must be at least 1");
    if (val_every == 0) throw ConfigError("val_every must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},     {"learning_rate", t.learning_rate}, {"weight_decay", t.weight_decay},
          {"total_steps", t.total_steps},   {"warmup_steps", t.warmup_steps},   {"dropout_p", t.dropout_p},
          {"seed", t.seed},                 {"val_every", t.val_every},         {"workers", t.workers},
          {"threshold", t.threshold}};
}

// Published fine-tuning hyperparameters.
inline TrainConfig paper_profile() { return TrainConfig{}; }

// Small-corpus settings: the embedding encoder here trains from scratch, so it
// needs a far larger step size than fine-tuning a pretrained model.
inline TrainConfig desk_profile() {
  TrainConfig t;
  t.batch_size = 8;
  t.learning_rate = 1e-2;
  t.weight_decay = 0.01;
  t.total_steps = 300;
  t.warmup_steps = 30;
  t.dropout_p = 0.1;
  t.val_every = 50;
  return t;
}

struct TrainResult {
  Checkpoint final_checkpoint;
  std::optional<Checkpoint> best_checkpoint;  // by validation micro-F1
  std::size_t best_step = 0;
  double best_val_micro_f1 = -1.0;
  std::vector<nlohmann::json> log;
  std::size_t steps_done = 0;
  bool aborted = false;
  std::string abort_reason;
};

using LogSink = std::function<void(const nlohmann::json&)>;

namespace detail {

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first
// failure in index order.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t k = std::min(workers, n);
  if (k <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < k; ++w) threads.emplace_back(run, w, k);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double example_loss_and_grad(HilatModel& model, const ChunkedDocument& doc, double weight, double dropout_p,
                                    Rng& rng, GradSink* sink) {
  Tape tape;
  ForwardOptions opt;
  opt.training = true;
  opt.dropout_p = dropout_p;
  opt.rng = &rng;
  ForwardResult res = model.forward(tape, doc, opt);
  Var loss = bce_loss(res.probs, doc.labels);
  const double value = loss.value()(0, 0);
  if (!std::isfinite(value)) throw NumericError("non-finite loss on document " + doc.id);
  tape.backward(scale(loss, weight), sink);
  return value;
}

}  // namespace detail

// Probabilities for each document (n_docs x L). Forward passes are
// independent, so the result does not depend on `workers`.
inline Matrix predict(HilatModel& model, const std::vector<ChunkedDocument>& docs, std::size_t workers = 1) {
  const std::size_t L = model.labels.size();
  Matrix out(docs.size(), L);
  detail::parallel_for(docs.size(), workers, [&](std::size_t i) {
    Tape tape;
    const Matrix& p = model.forward(tape, docs[i]).probs.value();
    for (std::size_t l = 0; l < L; ++l) out(i, l) = p[l];
  });
  return out;
}

inline Matrix gold_matrix(const std::vector<ChunkedDocument>& docs, std::size_t n_labels) {
  Matrix g(docs.size(), n_labels);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].labels.size() != n_labels) throw ShapeError("document " + docs[i].id + " has the wrong label count");
    for (std::size_t l = 0; l < n_labels; ++l) g(i, l) = docs[i].labels[l];
  }
  return g;
}

inline ScoreMatrix score(HilatModel& model, const std::vector<ChunkedDocument>& docs, std::size_t workers = 1) {
  return {predict(model, docs, workers), gold_matrix(docs, model.labels.size())};
}

// Mini-batch training. Batches walk a seeded permutation of the data and
// reshuffle when it runs out, so datasets smaller than a batch repeat.
// Each example's loss is weighted 1/B, giving the batch-mean BCE.
inline TrainResult train(HilatModel& model, const std::vector<ChunkedDocument>& data, const TrainConfig& cfg,
                         const std::vector<ChunkedDocument>* val = nullptr, const LogSink& sink = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training dataset is empty");
  for (const auto& d : data) {
    if (d.labels.size() != model.labels.size()) throw ConfigError("document " + d.id + " has the wrong label count");
  }
  TrainResult result;
  const auto params = model.parameters();
  AdamState adam;
  Rng order_rng = Rng::derive(cfg.seed, 2);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  const std::size_t B = cfg.batch_size;

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    std::vector<std::size_t> batch(B);
    for (std::size_t b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch[b] = order[cursor++];
    }
    for (Parameter* p : params) p->zero_grad();

    std::vector<double> losses(B, 0.0);
    nlohmann::json entry = {{"step", step}};
    try {
      const double w = 1.0 / static_cast<double>(B);
      if (cfg.workers <= 1) {
        for (std::size_t b = 0; b < B; ++b) {
          Rng rng = Rng::derive(cfg.seed, (static_cast<std::uint64_t>(step) << 20) | b);
          losses[b] = detail::example_loss_and_grad(model, data[batch[b]], w, cfg.dropout_p, rng, nullptr);
        }
      } else {
        std::vector<GradSink> sinks(B);
        detail::parallel_for(B, cfg.workers, [&](std::size_t b) {
          Rng rng = Rng::derive(cfg.seed, (static_cast<std::uint64_t>(step) << 20) | b);
          losses[b] = detail::example_loss_and_grad(model, data[batch[b]], w, cfg.dropout_p, rng, &sinks[b]);
        });
        for (auto& s : sinks) {
          for (Parameter* p : params) {
            auto it = s.find(p);
            if (it != s.end()) p->grad += it->second;
          }
        }
      }
      const double lr = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.learning_rate);
      adamw_step(params, adam, lr, cfg.weight_decay);
      double loss = 0.0;
      for (double l : losses) loss += l;
      entry["lr"] = lr;
      entry["loss"] = loss / static_cast<double>(B);
    } catch (const NumericError& e) {
      // Parameters are untouched by the failing step, so they are the last good state.
      result.aborted = true;
      result.abort_reason = "step " + std::to_string(step) + ": " + e.what();
      nlohmann::json abort_entry = {{"step", step}, {"abort", result.abort_reason}};
      result.log.push_back(abort_entry);
      if (sink) sink(abort_entry);
      break;
    }
    result.steps_done = step;
    if (val && !val->empty() && (step % cfg.val_every == 0 || step == cfg.total_steps)) {
      const double f1 = prf1(score(model, *val, cfg.workers), cfg.threshold).f1_micro;
      entry["val_micro_f1"] = f1;
      if (f1 > result.best_val_micro_f1) {
        result.best_val_micro_f1 = f1;
        result.best_step = step;
        result.best_checkpoint = model.to_checkpoint();
      }
    }
    result.log.push_back(entry);
    if (sink) sink(entry);
  }
  for (Parameter* p : params) p->zero_grad();
  result.final_checkpoint = model.to_checkpoint();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "tensor[index]"
  std::map<std::string, std::size_t> per_tensor;
};

// Central differences against the analytic gradient on coordinates sampled
// round-robin across the trainable tensors. rel = |a-n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss_fn,
                                  double eps = 1e-5, std::size_t n_samples = 200, std::uint64_t seed = 0) {
  std::vector<Parameter*> live;
  for (Parameter* p : params)
    if (!p->frozen && p->value.size() > 0) live.push_back(p);
  if (live.empty()) throw UsageError("grad_check: no trainable parameters");
  for (Parameter* p : live) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }
  std::vector<Matrix> analytic;
  for (Parameter* p : live) analytic.push_back(p->grad);

  auto eval = [&]() {
    Tape tape;
    return loss_fn(tape).value()(0, 0);
  };

  std::size_t capacity = 0;
  for (Parameter* p : live) capacity += p->value.size();
  const std::size_t n = std::min(n_samples, capacity);
  Rng rng(seed);
  std::vector<std::set<std::size_t>> used(live.size());
  GradCheckResult res;
  std::size_t t = 0;
  while (res.coordinates < n) {
    const std::size_t k = t++ % live.size();
    Parameter& p = *live[k];
    if (used[k].size() == p.value.size()) continue;
    std::size_t idx = static_cast<std::size_t>(rng.below(p.value.size()));
    while (used[k].count(idx)) idx = (idx + 1) % p.value.size();
    used[k].insert(idx);
    const double orig = p.value[idx];
    p.value[idx] = orig + eps;
    const double fp = eval();
    p.value[idx] = orig - eps;
    const double fm = eval();
    p.value[idx] = orig;
    const double num = (fp - fm) / (2.0 * eps);
    const double ana = analytic[k][idx];
    const double rel = std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-8});
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst = p.name + "[" + std::to_string(idx) + "]";
    }
    ++res.per_tensor[p.name];
    ++res.coordinates;
  }
  for (Parameter* p : live) p->zero_grad();
  return res;
}

// Small seeded model for gradient checks: d_e=4, 3 labels, 2 chunks of
// 8 slots (6 content tokens), the second chunk partly padded.
struct ToyProblem {
  Vocabulary vocab;
  std::unique_ptr<EmbeddingEncoder> encoder;
  HeadParams head;
  HeadConfig head_cfg;
  ChunkedDocument doc;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = encoder->parameters();
    for (Parameter* p : head.all()) out.push_back(p);
    return out;
  }

  Var loss(Tape& tape) { return bce_loss(forward(tape, doc, *encoder, head, head_cfg).probs, doc.labels); }
};

inline ToyProblem make_toy_problem(std::uint64_t seed, std::size_t d_e = 4, std::size_t n_labels = 3,
                                   std::size_t n_chunks = 2, std::size_t content_len = 6) {
  ToyProblem t;
  Rng rng = Rng::derive(seed, 7);
  std::vector<std::string> words;
  for (int i = 0; i < 40; ++i) words.push_back("w" + std::to_string(i));
  t.vocab = Vocabulary(words);
  std::vector<std::string> text;
  const std::size_t n_words = content_len * (n_chunks - 1) + content_len / 2;
  for (std::size_t i = 0; i < n_words; ++i) text.push_back(words[rng.below(words.size())]);
  t.doc = chunk_words("toy", text, t.vocab, n_chunks, content_len);
  t.doc.labels.resize(n_labels);
  for (std::size_t l = 0; l < n_labels; ++l) t.doc.labels[l] = static_cast<double>(l % 2 == 0);
  t.encoder = std::make_unique<EmbeddingEncoder>(t.vocab.size(), d_e, content_len + 2, true, rng);
  // Larger-than-default embeddings keep every gradient well above the
  // finite-difference noise floor.
  for (Parameter* p : {&t.encoder->params().token_embedding, &t.encoder->params().position_embedding}) {
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = rng.uniform(-1.0, 1.0);
  }
  for (std::size_t i = 0; i < d_e; ++i) t.encoder->params().mix_bias.value[i] = rng.uniform(-0.5, 0.5);
  t.head_cfg.d_e = d_e;
  t.head_cfg.n_labels = n_labels;
  t.head_cfg.n_chunks = n_chunks;
  t.head = random_head(t.head_cfg, rng);
  return t;
}

}  // namespace hilat
