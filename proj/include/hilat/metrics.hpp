#pragma once

// Multi-label evaluation: ROC AUC (macro/micro), precision/recall/F1
// (macro/micro), precision@k, and the paired approximate randomization test.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilat/error.hpp"
#include "hilat/rng.hpp"
#include "hilat/tensor.hpp"

namespace hilat {

// probs and gold are n_docs x L; gold entries are 0/1.
struct ScoreMatrix {
  Matrix probs;
  Matrix gold;

  std::size_t docs() const { return probs.rows(); }
  std::size_t labels() const { return probs.cols(); }

  void validate() const {
    if (!probs.same_shape(gold)) {
      throw ShapeError("score matrix: probs " + probs.shape_str() + " vs gold " + gold.shape_str());
    }
  }
};

// Mann-Whitney AUC with midranks; nullopt when the label has no positives or
// no negatives.
inline std::optional<double> roc_auc_label(const std::vector<double>& scores, const std::vector<double>& gold) {
  if (scores.size() != gold.size()) throw ShapeError("roc_auc_label: scores and gold differ in length");
  const std::size_t n = scores.size();
  double n_pos = 0.0;
  for (double g : gold) n_pos += g > 0.5 ? 1.0 : 0.0;
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (gold[order[k]] > 0.5) rank_sum += midrank;
    i = j + 1;
  }
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct AucSummary {
  double macro = 0.0;
  double micro = 0.0;
  std::vector<std::optional<double>> per_label;
  std::vector<std::size_t> skipped;
};

inline AucSummary aggregate_auc(const ScoreMatrix& sm) {
  sm.validate();
  AucSummary out;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < sm.labels(); ++l) {
    auto auc = roc_auc_label(sm.probs.col(l), sm.gold.col(l));
    out.per_label.push_back(auc);
    if (auc) {
      total += *auc;
      ++used;
    } else {
      out.skipped.push_back(l);
    }
  }
  if (used == 0) throw DegenerateError("aggregate_auc: every label lacks positives or negatives");
  out.macro = total / static_cast<double>(used);
  const std::vector<double> s(sm.probs.values().begin(), sm.probs.values().end());
  const std::vector<double> g(sm.gold.values().begin(), sm.gold.values().end());
  auto micro = roc_auc_label(s, g);
  if (!micro) throw DegenerateError("aggregate_auc: flattened scores have a single class");
  out.micro = *micro;
  return out;
}

struct LabelCounts {
  double tp = 0, fp = 0, fn = 0;
};

struct PrfSummary {
  double p_macro = 0, r_macro = 0, f1_macro = 0;
  double p_micro = 0, r_micro = 0, f1_micro = 0;
  std::vector<LabelCounts> counts;
  std::vector<double> p_label, r_label, f1_label;
};

namespace detail {

inline double ratio(double a, double b) { return b > 0.0 ? a / b : 0.0; }
inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace detail

inline PrfSummary prf1(const ScoreMatrix& sm, double threshold = 0.5) {
  sm.validate();
  PrfSummary out;
  out.counts.resize(sm.labels());
  LabelCounts all;
  for (std::size_t i = 0; i < sm.docs(); ++i) {
    for (std::size_t l = 0; l < sm.labels(); ++l) {
      const bool pred = sm.probs(i, l) >= threshold;
      const bool gold = sm.gold(i, l) > 0.5;
      LabelCounts& c = out.counts[l];
      if (pred && gold) c.tp += 1;
      if (pred && !gold) c.fp += 1;
      if (!pred && gold) c.fn += 1;
    }
  }
  for (const auto& c : out.counts) {
    const double p = detail::ratio(c.tp, c.tp + c.fp);
    const double r = detail::ratio(c.tp, c.tp + c.fn);
    out.p_label.push_back(p);
    out.r_label.push_back(r);
    out.f1_label.push_back(detail::f1(p, r));
    all.tp += c.tp;
    all.fp += c.fp;
    all.fn += c.fn;
  }
  const double L = static_cast<double>(std::max<std::size_t>(sm.labels(), 1));
  out.p_macro = std::accumulate(out.p_label.begin(), out.p_label.end(), 0.0) / L;
  out.r_macro = std::accumulate(out.r_label.begin(), out.r_label.end(), 0.0) / L;
  out.f1_macro = std::accumulate(out.f1_label.begin(), out.f1_label.end(), 0.0) / L;
  out.p_micro = detail::ratio(all.tp, all.tp + all.fp);
  out.r_micro = detail::ratio(all.tp, all.tp + all.fn);
  out.f1_micro = detail::f1(out.p_micro, out.r_micro);
  return out;
}

// Mean over documents of |gold among top-k scores| / k. Ties broken by
// ascending label index.
inline double precision_at_k(const ScoreMatrix& sm, std::size_t k) {
  sm.validate();
  if (k == 0 || k > sm.labels()) {
    throw UsageError("precision_at_k: k=" + std::to_string(k) + " with " + std::to_string(sm.labels()) + " labels");
  }
  if (sm.docs() == 0) return 0.0;
  double total = 0.0;
  std::vector<std::size_t> order(sm.labels());
  for (std::size_t i = 0; i < sm.docs(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sm.probs(i, a) > sm.probs(i, b); });
    double hits = 0.0;
    for (std::size_t r = 0; r < k; ++r) hits += sm.gold(i, order[r]) > 0.5 ? 1.0 : 0.0;
    total += hits / static_cast<double>(k);
  }
  return total / static_cast<double>(sm.docs());
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricsReport {
  double auc_macro = 0, auc_micro = 0;
  double p_macro = 0, p_micro = 0, r_macro = 0, r_micro = 0, f1_macro = 0, f1_micro = 0;
  // k -> value; nullopt when k exceeds the label count.
  std::vector<std::pair<std::size_t, std::optional<double>>> p_at;
  std::vector<std::string> label_codes;
  std::vector<std::optional<double>> label_auc;
  std::vector<double> label_p, label_r, label_f1, label_support;
  std::vector<std::string> skipped_labels;
  std::size_t n_docs = 0;
  double threshold = 0.5;
};

inline MetricsReport evaluate(const ScoreMatrix& sm, const std::vector<std::string>& codes, double threshold = 0.5,
                              const std::vector<std::size_t>& ks = {5, 8, 15}) {
  sm.validate();
  if (codes.size() != sm.labels()) throw ShapeError("evaluate: label code count differs from score columns");
  MetricsReport r;
  r.n_docs = sm.docs();
  r.threshold = threshold;
  r.label_codes = codes;
  const AucSummary auc = aggregate_auc(sm);
  r.auc_macro = auc.macro;
  r.auc_micro = auc.micro;
  r.label_auc = auc.per_label;
  for (std::size_t l : auc.skipped) r.skipped_labels.push_back(codes[l]);
  const PrfSummary prf = prf1(sm, threshold);
  r.p_macro = prf.p_macro;
  r.p_micro = prf.p_micro;
  r.r_macro = prf.r_macro;
  r.r_micro = prf.r_micro;
  r.f1_macro = prf.f1_macro;
  r.f1_micro = prf.f1_micro;
  r.label_p = prf.p_label;
  r.label_r = prf.r_label;
  r.label_f1 = prf.f1_label;
  for (const auto& c : prf.counts) r.label_support.push_back(c.tp + c.fn);
  for (std::size_t k : ks) {
    if (k <= sm.labels()) {
      r.p_at.emplace_back(k, precision_at_k(sm, k));
    } else {
      r.p_at.emplace_back(k, std::nullopt);
    }
  }
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["n_docs"] = r.n_docs;
  j["threshold"] = r.threshold;
  j["auc_macro"] = r.auc_macro;
  j["auc_micro"] = r.auc_micro;
  j["p_macro"] = r.p_macro;
  j["p_micro"] = r.p_micro;
  j["r_macro"] = r.r_macro;
  j["r_micro"] = r.r_micro;
  j["f1_macro"] = r.f1_macro;
  j["f1_micro"] = r.f1_micro;
  for (const auto& [k, v] : r.p_at) {
    j["p_at_" + std::to_string(k)] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t l = 0; l < r.label_codes.size(); ++l) {
    labels.push_back({{"label", r.label_codes[l]},
                      {"auc", r.label_auc[l] ? nlohmann::json(*r.label_auc[l]) : nlohmann::json(nullptr)},
                      {"precision", r.label_p[l]},
                      {"recall", r.label_r[l]},
                      {"f1", r.label_f1[l]},
                      {"support", r.label_support[l]}});
  }
  j["per_label"] = labels;
  j["skipped_labels"] = r.skipped_labels;
  return j;
}

// Aligned human-readable table; `percent` prints values x100 with one decimal.
inline std::string format_table(const MetricsReport& r, bool percent = false) {
  auto fmt = [percent](std::optional<double> v) {
    if (!v) return std::string("n/a");
    char buf[32];
    if (percent) {
      std::snprintf(buf, sizeof buf, "%.1f", *v * 100.0);
    } else {
      std::snprintf(buf, sizeof buf, "%.4f", *v);
    }
    return std::string(buf);
  };
  auto line = [](const std::string& name, const std::string& value) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-14s %10s\n", name.c_str(), value.c_str());
    return std::string(buf);
  };
  std::string out = line("metric", "value");
  out += line("auc_macro", fmt(r.auc_macro));
  out += line("auc_micro", fmt(r.auc_micro));
  out += line("p_macro", fmt(r.p_macro));
  out += line("p_micro", fmt(r.p_micro));
  out += line("r_macro", fmt(r.r_macro));
  out += line("r_micro", fmt(r.r_micro));
  out += line("f1_macro", fmt(r.f1_macro));
  out += line("f1_micro", fmt(r.f1_micro));
  for (const auto& [k, v] : r.p_at) out += line("p@" + std::to_string(k), fmt(v));
  out += "\n";
  char hdr[128];
  std::snprintf(hdr, sizeof hdr, "%-12s %8s %8s %8s %8s %8s\n", "label", "auc", "prec", "recall", "f1", "support");
  out += hdr;
  for (std::size_t l = 0; l < r.label_codes.size(); ++l) {
    char row[160];
    std::snprintf(row, sizeof row, "%-12s %8s %8s %8s %8s %8.0f\n", r.label_codes[l].c_str(), fmt(r.label_auc[l]).c_str(),
                  fmt(r.label_p[l]).c_str(), fmt(r.label_r[l]).c_str(), fmt(r.label_f1[l]).c_str(), r.label_support[l]);
    out += row;
  }
  if (!r.skipped_labels.empty()) {
    out += "\nskipped for AUC (single class):";
    for (const auto& c : r.skipped_labels) out += " " + c;
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Approximate randomization test
// ---------------------------------------------------------------------------

enum class Metric { f1_micro, f1_macro, auc_micro, auc_macro, p_micro, r_micro, p_at_5, p_at_8, p_at_15 };

inline Metric parse_metric(const std::string& s) {
  if (s == "f1_micro") return Metric::f1_micro;
  if (s == "f1_macro") return Metric::f1_macro;
  if (s == "auc_micro") return Metric::auc_micro;
  if (s == "auc_macro") return Metric::auc_macro;
  if (s == "p_micro") return Metric::p_micro;
  if (s == "r_micro") return Metric::r_micro;
  if (s == "p_at_5") return Metric::p_at_5;
  if (s == "p_at_8") return Metric::p_at_8;
  if (s == "p_at_15") return Metric::p_at_15;
  throw ConfigError("unknown metric: " + s);
}

inline double metric_value(Metric m, const ScoreMatrix& sm, double threshold = 0.5) {
  switch (m) {
    case Metric::f1_micro:
      return prf1(sm, threshold).f1_micro;
    case Metric::f1_macro:
      return prf1(sm, threshold).f1_macro;
    case Metric::auc_micro:
      return aggregate_auc(sm).micro;
    case Metric::auc_macro:
      return aggregate_auc(sm).macro;
    case Metric::p_micro:
      return prf1(sm, threshold).p_micro;
    case Metric::r_micro:
      return prf1(sm, threshold).r_micro;
    case Metric::p_at_5:
      return precision_at_k(sm, 5);
    case Metric::p_at_8:
      return precision_at_k(sm, 8);
    case Metric::p_at_15:
      return precision_at_k(sm, 15);
  }
  return 0.0;
}

// Swaps whole-document prediction rows of A and B with probability 1/2 per
// document; p = (#{delta_perm >= delta_obs} + 1) / (n_iter + 1). The
// comparison allows 1e-12 slack so exact ties survive summation-order noise.
inline double approx_randomization_test(const Matrix& preds_a, const Matrix& preds_b, const Matrix& gold, Metric metric,
                                        std::size_t n_iter = 10000, std::uint64_t seed = 0, double threshold = 0.5) {
  if (!preds_a.same_shape(preds_b) || !preds_a.same_shape(gold)) {
    throw ShapeError("approx_randomization_test: predictions and gold must share a shape");
  }
  const double observed = std::fabs(metric_value(metric, {preds_a, gold}, threshold) -
                                    metric_value(metric, {preds_b, gold}, threshold));
  Rng rng(seed);
  std::size_t count = 0;
  ScoreMatrix a{preds_a, gold};
  ScoreMatrix b{preds_b, gold};
  const std::size_t L = gold.cols();
  for (std::size_t it = 0; it < n_iter; ++it) {
    for (std::size_t i = 0; i < gold.rows(); ++i) {
      const bool swap = rng.bernoulli(0.5);
      for (std::size_t l = 0; l < L; ++l) {
        a.probs(i, l) = swap ? preds_b(i, l) : preds_a(i, l);
        b.probs(i, l) = swap ? preds_a(i, l) : preds_b(i, l);
      }
    }
    const double delta = std::fabs(metric_value(metric, a, threshold) - metric_value(metric, b, threshold));
    if (delta + 1e-12 >= observed) ++count;
  }
  return (static_cast<double>(count) + 1.0) / (static_cast<double>(n_iter) + 1.0);
}

}  // namespace hilat
