// hilat: command-line driver for corpus generation, preprocessing, training,
// evaluation, explanation reports and gradient checks.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hilat/hilat.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string run_dir_name(std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return "runs/" + std::string(buf) + "-seed" + std::to_string(seed);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw hilat::IoError("cannot write " + p.string());
  out << s;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty() || !fs::exists(path)) throw hilat::IoError(std::string(what) + " not found: " + path);
}

// Options shared by preprocess and train.
struct PrepFlags {
  std::string variant;
  std::size_t n_chunks = 10;
  std::size_t content_len = 510;
  std::string section_map;
  std::string deid_pattern;

  void add(CLI::App* app) {
    app->add_option("--variant", variant, "Ablation letters a-j (combinable)");
    app->add_option("--n-chunks", n_chunks, "Chunks per document")->check(CLI::PositiveNumber);
    app->add_option("--content-len", content_len, "Content tokens per chunk")->check(CLI::PositiveNumber);
    app->add_option("--section-map", section_map, "Section-to-chunk map for meaningful chunking");
    app->add_option("--deid-pattern", deid_pattern, "Regex replacing the default [**...**] pattern");
  }

  hilat::PrepConfig prep(hilat::ModelConfig& model) const {
    hilat::PrepConfig p;
    p.n_chunks = n_chunks;
    p.content_len = content_len;
    p.clean.set_deid_pattern(deid_pattern);
    if (!section_map.empty()) p.section_map = hilat::load_section_map(section_map);
    hilat::apply_variant(variant, p, model);
    return p;
  }
};

// ---------------------------------------------------------------------------

struct GenFlags {
  std::string out = "corpus";
  hilat::CorpusSpec spec;
};

int cmd_gen_corpus(const GenFlags& f) {
  const hilat::Corpus c = hilat::generate_corpus(f.spec);
  hilat::write_corpus(c, f.out);
  std::printf("wrote %zu/%zu/%zu documents, %zu labels to %s\n", c.train.size(), c.val.size(), c.test.size(),
              c.labels.size(), f.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct PreprocessFlags {
  std::string data, labels, out = "prepared.jsonl", vocab_out;
  std::size_t min_freq = 1;
  PrepFlags prep;
};

int cmd_preprocess(const PreprocessFlags& f) {
  require_file(f.data, "dataset");
  require_file(f.labels, "label vocabulary");
  const hilat::LabelSet labels = hilat::load_label_set(f.labels);
  const auto docs = hilat::load_dataset(f.data, &labels);
  hilat::ModelConfig mc;
  const hilat::PrepConfig prep = f.prep.prep(mc);
  const hilat::Vocabulary vocab = hilat::build_vocab(docs, prep, f.min_freq);
  std::ofstream out(f.out, std::ios::binary);
  if (!out) throw hilat::IoError("cannot write " + f.out);
  for (const auto& d : docs) {
    const auto cd = hilat::chunk_document(d, vocab, prep, &labels);
    json chunks = json::array();
    for (const auto& ch : cd.chunks) {
      chunks.push_back({{"index", ch.chunk_index}, {"tokens", ch.token_ids}, {"real_slots", ch.real_slots().size()}});
    }
    out << json{{"id", cd.id}, {"labels", cd.labels}, {"words", cd.words}, {"chunks", chunks}}.dump() << "\n";
  }
  if (!f.vocab_out.empty()) hilat::save_vocab(vocab, f.vocab_out);
  std::printf("prepared %zu documents (vocabulary %zu) -> %s\n", docs.size(), vocab.size(), f.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string train, val, labels, descriptions, out_dir, profile = "desk", external_vectors;
  PrepFlags prep;
  std::size_t d_e = 32;
  std::size_t min_freq = 1;
  bool no_mask = false;
  bool no_mixing = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::optional<std::size_t> batch_size, total_steps, warmup_steps, val_every;
  std::optional<double> learning_rate, weight_decay, dropout;
};

int cmd_train(const TrainFlags& f) {
  require_file(f.train, "training set");
  require_file(f.labels, "label vocabulary");
  if (!f.val.empty()) require_file(f.val, "validation set");
  const hilat::LabelSet labels = hilat::load_label_set(f.labels);
  const auto train_docs = hilat::load_dataset(f.train, &labels);
  std::vector<hilat::Document> val_docs;
  if (!f.val.empty()) val_docs = hilat::load_dataset(f.val, &labels);

  hilat::ModelConfig mc;
  mc.d_e = f.d_e;
  mc.min_freq = f.min_freq;
  mc.mask_pads = !f.no_mask;
  mc.mixing = !f.no_mixing;
  mc.external_vectors = f.external_vectors;
  const hilat::PrepConfig prep = f.prep.prep(mc);

  hilat::TrainConfig tc;
  if (f.profile == "paper") {
    tc = hilat::paper_profile();
  } else if (f.profile == "desk") {
    tc = hilat::desk_profile();
  } else {
    throw hilat::ConfigError("unknown profile: " + f.profile + " (expected desk or paper)");
  }
  tc.seed = f.seed;
  tc.workers = f.workers;
  if (f.batch_size) tc.batch_size = *f.batch_size;
  if (f.total_steps) tc.total_steps = *f.total_steps;
  if (f.warmup_steps) tc.warmup_steps = *f.warmup_steps;
  if (f.val_every) tc.val_every = *f.val_every;
  if (f.learning_rate) tc.learning_rate = *f.learning_rate;
  if (f.weight_decay) tc.weight_decay = *f.weight_decay;
  if (f.dropout) tc.dropout_p = *f.dropout;
  if (f.total_steps && !f.warmup_steps && tc.warmup_steps > tc.total_steps) tc.warmup_steps = tc.total_steps / 10;
  tc.validate();

  std::map<std::string, std::string> desc;
  if (!f.descriptions.empty()) {
    require_file(f.descriptions, "label descriptions");
    desc = hilat::load_label_descriptions(f.descriptions);
  }
  hilat::HilatModel model = hilat::HilatModel::create(train_docs, labels, prep, mc, f.seed,
                                                      f.descriptions.empty() ? nullptr : &desc);
  const fs::path dir = f.out_dir.empty() ? fs::path(run_dir_name(f.seed)) : fs::path(f.out_dir);
  fs::create_directories(dir);

  const json effective = {{"command", "train"},       {"profile", f.profile},
                          {"variant", f.prep.variant}, {"train", hilat::to_json(tc)},
                          {"model", hilat::to_json(mc)}, {"prep", hilat::to_json(prep)},
                          {"data", {{"train", f.train}, {"val", f.val}, {"labels", f.labels}}}};
  std::cout << effective.dump() << "\n";
  write_text(dir / "config.json", effective.dump(2) + "\n");

  const auto train_set = model.prepare(train_docs);
  const auto val_set = model.prepare(val_docs);
  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  const auto result = hilat::train(model, train_set, tc, val_set.empty() ? nullptr : &val_set,
                                   [&](const json& e) { log << e.dump() << "\n" << std::flush; });
  hilat::save_checkpoint(result.final_checkpoint, (dir / "model.ckpt").string());
  if (result.best_checkpoint) hilat::save_checkpoint(*result.best_checkpoint, (dir / "best.ckpt").string());
  if (result.aborted) {
    std::cerr << "training aborted: " << result.abort_reason << "; last good checkpoint saved to "
              << (dir / "model.ckpt").string() << "\n";
    return 3;
  }
  std::printf("trained %zu steps; checkpoint %s", result.steps_done, (dir / "model.ckpt").string().c_str());
  if (result.best_checkpoint) std::printf("; best val micro-F1 %.4f at step %zu", result.best_val_micro_f1, result.best_step);
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------

// "doc_id<TAB>p_1<TAB>...<TAB>p_L" with a header of label codes.
void save_predictions(const fs::path& p, const std::vector<hilat::ChunkedDocument>& docs, const hilat::Matrix& probs,
                      const std::vector<std::string>& codes) {
  std::ostringstream out;
  out << "doc_id";
  for (const auto& c : codes) out << "\t" << c;
  out << "\n";
  for (std::size_t i = 0; i < docs.size(); ++i) {
    out << docs[i].id;
    char buf[32];
    for (std::size_t l = 0; l < codes.size(); ++l) {
      std::snprintf(buf, sizeof buf, "\t%.17g", probs(i, l));
      out << buf;
    }
    out << "\n";
  }
  write_text(p, out.str());
}

hilat::Matrix load_predictions(const std::string& path, const std::vector<hilat::ChunkedDocument>& docs,
                               const std::vector<std::string>& codes) {
  std::ifstream in(path);
  if (!in) throw hilat::IoError("cannot open predictions: " + path);
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, cell;
    std::getline(ss, id, '\t');
    std::vector<double> v;
    while (std::getline(ss, cell, '\t')) v.push_back(std::stod(cell));
    if (v.size() != codes.size()) throw hilat::ParseError(path + ": document " + id + " has the wrong column count");
    rows[id] = std::move(v);
  }
  hilat::Matrix m(docs.size(), codes.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto it = rows.find(docs[i].id);
    if (it == rows.end()) throw hilat::ValidationError(path + ": no prediction for document " + docs[i].id);
    for (std::size_t l = 0; l < codes.size(); ++l) m(i, l) = it->second[l];
  }
  return m;
}

struct EvalFlags {
  std::string checkpoint, data, labels, out_dir, compare, art_metric = "f1_micro";
  double threshold = 0.5;
  bool percent = false;
  std::size_t art_iterations = 10000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

int cmd_eval(const EvalFlags& f) {
  require_file(f.checkpoint, "checkpoint");
  require_file(f.data, "dataset");
  hilat::HilatModel model = hilat::HilatModel::from_checkpoint(hilat::load_checkpoint(f.checkpoint));
  if (!f.labels.empty()) {
    require_file(f.labels, "label vocabulary");
    hilat::require_same_labels(model, hilat::load_label_set(f.labels));
  }
  const auto docs = model.prepare(hilat::load_dataset(f.data, &model.labels));
  const hilat::ScoreMatrix sm = hilat::score(model, docs, f.workers);
  const auto report = hilat::evaluate(sm, model.labels.codes(), f.threshold);
  const fs::path dir = f.out_dir.empty() ? fs::path(run_dir_name(f.seed)) : fs::path(f.out_dir);
  fs::create_directories(dir);
  json j = hilat::to_json(report);
  save_predictions(dir / "predictions.tsv", docs, sm.probs, model.labels.codes());
  if (!f.compare.empty()) {
    require_file(f.compare, "comparison predictions");
    const hilat::Matrix other = load_predictions(f.compare, docs, model.labels.codes());
    const double p = hilat::approx_randomization_test(sm.probs, other, sm.gold, hilat::parse_metric(f.art_metric),
                                                      f.art_iterations, f.seed, f.threshold);
    j["significance"] = {{"metric", f.art_metric}, {"iterations", f.art_iterations}, {"p_value", p},
                         {"compared_with", f.compare}};
  }
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  const std::string table = hilat::format_table(report, f.percent);
  write_text(dir / "metrics.txt", table);
  std::cout << table;
  if (j.contains("significance")) std::printf("ART p-value (%s): %.6f\n", f.art_metric.c_str(), j["significance"]["p_value"].get<double>());
  return 0;
}

// ---------------------------------------------------------------------------

struct ExplainFlags {
  std::string checkpoint, data, doc_id, out_dir;
  double threshold = 0.5;
  std::size_t top_k = 0;
};

int cmd_explain(const ExplainFlags& f) {
  require_file(f.checkpoint, "checkpoint");
  require_file(f.data, "dataset");
  hilat::HilatModel model = hilat::HilatModel::from_checkpoint(hilat::load_checkpoint(f.checkpoint));
  const auto docs = hilat::load_dataset(f.data, &model.labels);
  std::vector<const hilat::Document*> chosen;
  for (const auto& d : docs)
    if (f.doc_id.empty() || d.id == f.doc_id) chosen.push_back(&d);
  if (chosen.empty()) throw hilat::IndexError("unknown document id: " + f.doc_id);
  const fs::path dir = f.out_dir.empty() ? fs::path("explain") : fs::path(f.out_dir);
  fs::create_directories(dir);
  for (const hilat::Document* d : chosen) {
    const auto cd = model.prepare(*d);
    hilat::Tape tape;
    hilat::ForwardOptions opt;
    opt.record = true;
    const auto res = model.forward(tape, cd, opt);
    const auto pred = res.prediction(f.threshold);
    std::vector<std::size_t> shown;
    for (std::size_t l = 0; l < pred.probs.size(); ++l)
      if (pred.binary[l]) shown.push_back(l);
    if (f.top_k > 0) {
      std::vector<std::size_t> order(pred.probs.size());
      for (std::size_t l = 0; l < order.size(); ++l) order[l] = l;
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return pred.probs[a] > pred.probs[b]; });
      for (std::size_t i = 0; i < std::min(f.top_k, order.size()); ++i)
        if (std::find(shown.begin(), shown.end(), order[i]) == shown.end()) shown.push_back(order[i]);
      std::sort(shown.begin(), shown.end());
    }
    std::vector<hilat::LabelExplanation> labels;
    for (std::size_t l : shown) {
      labels.push_back({model.labels.code(l), pred.probs[l], hilat::word_attention(cd, *res.record, l)});
    }
    hilat::render_report(cd, labels, (dir / (d->id + ".html")).string(), (dir / (d->id + ".tsv")).string());
    if (labels.empty()) {
      std::printf("%s: no label reached threshold %.2f; wrote empty report\n", d->id.c_str(), f.threshold);
    } else {
      std::printf("%s: %zu label section(s) -> %s\n", d->id.c_str(), labels.size(),
                  (dir / (d->id + ".html")).string().c_str());
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GradCheckFlags {
  std::uint64_t seed = 0;
  std::size_t samples = 240;
  double eps = 1e-5;
  bool mutate_tanh = false;
};

int cmd_grad_check(const GradCheckFlags& f) {
  hilat::ToyProblem toy = hilat::make_toy_problem(f.seed);
  hilat::testing::tanh_backward_fault().store(f.mutate_tanh);
  const auto r = hilat::grad_check(toy.parameters(), [&](hilat::Tape& t) { return toy.loss(t); }, f.eps, f.samples,
                                   f.seed);
  hilat::testing::tanh_backward_fault().store(false);
  const bool pass = r.max_rel_error < 1e-4;
  std::printf("coordinates: %zu\nmax_rel_error: %.3e (at %s)\n%s\n", r.coordinates, r.max_rel_error, r.worst.c_str(),
              pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical label-wise attention for multi-label document coding"};
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "TOML config file; command-line flags override it");
  app.require_subcommand(1);

  GenFlags gen;
  auto* g = app.add_subcommand("gen-corpus", "Generate a synthetic planted-keyword corpus");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--seed", gen.spec.seed, "Random seed");
  g->add_option("--docs", gen.spec.n_docs, "Number of documents");
  g->add_option("--labels", gen.spec.n_labels, "Number of labels");
  g->add_option("--phrases-per-label", gen.spec.phrases_per_label, "Planted phrases per label");
  g->add_option("--min-labels", gen.spec.min_labels, "Minimum labels per document");
  g->add_option("--mean-labels", gen.spec.mean_labels, "Mean labels per document");
  g->add_option("--max-labels", gen.spec.max_labels, "Maximum labels per document (0 = all)");
  g->add_option("--mean-words", gen.spec.mean_words, "Mean document length in words");
  g->add_option("--background-vocab", gen.spec.background_vocab, "Background vocabulary size");
  g->add_option("--noise-tokens", gen.spec.noise_tokens, "Rate of bracket/number noise tokens");
  g->add_option("--label-noise", gen.spec.label_noise, "Probability of flipping each gold label");

  PreprocessFlags pre;
  auto* p = app.add_subcommand("preprocess", "Clean, reorder and chunk a dataset");
  p->add_option("--data", pre.data, "Dataset (JSON lines)")->required();
  p->add_option("--labels", pre.labels, "Label vocabulary file")->required();
  p->add_option("--out", pre.out, "Output JSON lines of chunked documents");
  p->add_option("--vocab-out", pre.vocab_out, "Write the token vocabulary here");
  p->add_option("--min-freq", pre.min_freq, "Minimum token frequency");
  pre.prep.add(p);

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--train", tr.train, "Training set (JSON lines)")->required();
  t->add_option("--val", tr.val, "Validation set (JSON lines)");
  t->add_option("--labels", tr.labels, "Label vocabulary file")->required();
  t->add_option("--descriptions", tr.descriptions, "Label descriptions (code<TAB>text), needed by variant f");
  t->add_option("--out-dir", tr.out_dir, "Run directory (default runs/<timestamp>-seed<seed>)");
  t->add_option("--profile", tr.profile, "Hyperparameter profile: desk or paper");
  t->add_option("--external-vectors", tr.external_vectors, "Frozen precomputed token vectors instead of embeddings");
  t->add_option("--d-e", tr.d_e, "Token representation width")->check(CLI::PositiveNumber);
  t->add_option("--min-freq", tr.min_freq, "Minimum token frequency");
  t->add_flag("--no-mask", tr.no_mask, "Let PAD slots take part in token attention");
  t->add_flag("--no-mixing", tr.no_mixing, "Drop the encoder's mixing layer");
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--workers", tr.workers, "Parallel workers (1 = bit-deterministic)")->check(CLI::PositiveNumber);
  t->add_option("--batch-size", tr.batch_size, "Batch size");
  t->add_option("--total-steps", tr.total_steps, "Optimizer steps");
  t->add_option("--warmup-steps", tr.warmup_steps, "Linear warmup steps");
  t->add_option("--val-every", tr.val_every, "Validation cadence in steps");
  t->add_option("--lr", tr.learning_rate, "Peak learning rate");
  t->add_option("--weight-decay", tr.weight_decay, "Decoupled weight decay");
  t->add_option("--dropout", tr.dropout, "Dropout on token representations");
  tr.prep.add(t);

  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset (JSON lines)")->required();
  e->add_option("--labels", ev.labels, "Label vocabulary to check against the checkpoint");
  e->add_option("--out-dir", ev.out_dir, "Report directory");
  e->add_option("--threshold", ev.threshold, "Decision threshold");
  e->add_flag("--percent", ev.percent, "Print metrics as percentages");
  e->add_option("--compare", ev.compare, "Second predictions file for a significance test");
  e->add_option("--art-metric", ev.art_metric, "Metric for the significance test");
  e->add_option("--art-iterations", ev.art_iterations, "Randomization iterations");
  e->add_option("--seed", ev.seed, "Random seed");
  e->add_option("--workers", ev.workers, "Parallel workers")->check(CLI::PositiveNumber);

  ExplainFlags ex;
  auto* x = app.add_subcommand("explain", "Render attention heatmaps");
  x->add_option("--checkpoint", ex.checkpoint, "Model checkpoint")->required();
  x->add_option("--data", ex.data, "Dataset (JSON lines)")->required();
  x->add_option("--doc-id", ex.doc_id, "Document to explain (default: all)");
  x->add_option("--out-dir", ex.out_dir, "Report directory");
  x->add_option("--threshold", ex.threshold, "Decision threshold");
  x->add_option("--top-k", ex.top_k, "Also render the k most probable labels");

  GradCheckFlags gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference gradient check on a toy model");
  c->add_option("--seed", gc.seed, "Random seed");
  c->add_option("--samples", gc.samples, "Sampled coordinates");
  c->add_option("--eps", gc.eps, "Finite-difference step");
  c->add_flag("--mutate-tanh", gc.mutate_tanh, "Corrupt the tanh backward pass (harness self-test)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return cmd_gen_corpus(gen);
    if (*p) return cmd_preprocess(pre);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*x) return cmd_explain(ex);
    if (*c) return cmd_grad_check(gc);
  } catch (const hilat::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
