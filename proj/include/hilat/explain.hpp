#pragma once

// Global token attention (token weight scaled by its chunk's weight), word
// aggregation, and static HTML heatmap reports with a TSV sidecar.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hilat/error.hpp"
#include "hilat/model.hpp"
#include "hilat/textprep.hpp"

namespace hilat {

// g = alpha * o for one (chunk, label).
inline std::vector<double> global_token_attention(std::span<const double> alpha, double chunk_weight) {
  std::vector<double> g(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) g[i] = alpha[i] * chunk_weight;
  return g;
}

// Per chunk n: global attention vector for label l (slots wide). Pooling
// variants carry no chunk weights; those are treated as uniform 1/N_c.
inline std::vector<std::vector<double>> global_attention(const AttentionRecord& rec, std::size_t label) {
  const std::size_t n_chunks = rec.token_attention.size();
  std::vector<std::vector<double>> out;
  out.reserve(n_chunks);
  for (std::size_t n = 0; n < n_chunks; ++n) {
    const double o = rec.chunk_attention.empty() ? 1.0 / static_cast<double>(n_chunks) : rec.chunk_attention.at(label).at(n);
    out.push_back(global_token_attention(rec.token_attention[n].row(label), o));
  }
  return out;
}

struct WordWeight {
  std::size_t word_index = 0;
  std::string word;
  double weight = 0.0;
};

struct WordAttention {
  std::size_t label = 0;
  std::vector<WordWeight> words;  // ascending word_index
};

// Sums global attention over each word's spans (CLS/SEP/PAD excluded), then
// normalizes so the document's word weights sum to 1.
inline WordAttention word_attention(const ChunkedDocument& doc, const std::vector<std::vector<double>>& global,
                                    std::size_t label) {
  if (global.size() != doc.chunks.size()) throw ShapeError("word_attention: one global vector per chunk required");
  std::map<std::size_t, double> mass;
  for (std::size_t n = 0; n < doc.chunks.size(); ++n) {
    const auto& chunk = doc.chunks[n];
    for (const auto& span : chunk.word_spans) {
      if (span.end_slot > global[n].size() || span.start_slot >= span.end_slot) {
        throw ShapeError("word_attention: invalid word span");
      }
      double s = 0.0;
      for (std::size_t t = span.start_slot; t < span.end_slot; ++t) s += global[n][t];
      mass[span.word_index] += s;
    }
  }
  if (mass.empty()) throw DegenerateError("word_attention: document " + doc.id + " has no words");
  double total = 0.0;
  for (const auto& [w, m] : mass) total += m;
  WordAttention out;
  out.label = label;
  for (const auto& [w, m] : mass) {
    out.words.push_back({w, w < doc.words.size() ? doc.words[w] : std::string(), total > 0.0 ? m / total : 0.0});
  }
  if (total <= 0.0) {
    // Every word got zero attention (possible only with underflow); fall back to uniform.
    for (auto& ww : out.words) ww.weight = 1.0 / static_cast<double>(out.words.size());
  }
  return out;
}

inline WordAttention word_attention(const ChunkedDocument& doc, const AttentionRecord& rec, std::size_t label) {
  return word_attention(doc, global_attention(rec, label), label);
}

// Indices of the k highest-weighted words (ties by ascending word index).
inline std::vector<WordWeight> top_words(const WordAttention& wa, std::size_t k) {
  std::vector<WordWeight> v = wa.words;
  std::stable_sort(v.begin(), v.end(), [](const WordWeight& a, const WordWeight& b) { return a.weight > b.weight; });
  if (v.size() > k) v.resize(k);
  return v;
}

struct LabelExplanation {
  std::string code;
  double probability = 0.0;
  WordAttention attention;
};

namespace detail {

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out.push_back(c);
    }
  }
  return out;
}

}  // namespace detail

inline std::string render_html(const std::string& doc_id, const std::vector<std::string>& words,
                               const std::vector<LabelExplanation>& labels) {
  std::string h;
  h += "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>";
  h += detail::html_escape(doc_id);
  h += "</title>\n<style>\nbody{font-family:sans-serif;max-width:60em;margin:2em auto;line-height:1.7}\n"
       "section{border-top:1px solid #ccc;padding-top:.5em}\n"
       "span.w{padding:0 .1em;border-radius:2px}\n</style>\n</head>\n<body>\n";
  h += "<h1>" + detail::html_escape(doc_id) + "</h1>\n";
  if (labels.empty()) h += "<p>No label reached the prediction threshold.</p>\n";
  for (const auto& le : labels) {
    char prob[32];
    std::snprintf(prob, sizeof prob, "%.4f", le.probability);
    h += "<section class=\"label\" data-label=\"" + detail::html_escape(le.code) + "\">\n<h2>" +
         detail::html_escape(le.code) + " <small>p=" + prob + "</small></h2>\n<p>";
    double max_w = 0.0;
    for (const auto& w : le.attention.words) max_w = std::max(max_w, w.weight);
    std::vector<double> weight(words.size(), 0.0);
    for (const auto& w : le.attention.words)
      if (w.word_index < weight.size()) weight[w.word_index] = w.weight;
    for (std::size_t i = 0; i < words.size(); ++i) {
      const double alpha = max_w > 0.0 ? weight[i] / max_w : 0.0;
      char style[64];
      std::snprintf(style, sizeof style, "background:rgba(220,40,40,%.3f)", alpha);
      h += "<span class=\"w\" style=\"" + std::string(style) + "\">" + detail::html_escape(words[i]) + "</span> ";
    }
    h += "</p>\n</section>\n";
  }
  h += "</body>\n</html>\n";
  return h;
}

// Sidecar rows: label_code, word_index, word, weight. Weights use six decimal
// places in scientific notation so per-label sums stay within 1e-6.
inline std::string render_sidecar(const std::vector<LabelExplanation>& labels) {
  std::string out = "label_code\tword_index\tword\tweight\n";
  for (const auto& le : labels) {
    for (const auto& w : le.attention.words) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.6e", w.weight);
      out += le.code + "\t" + std::to_string(w.word_index) + "\t" + w.word + "\t" + buf + "\n";
    }
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("failed writing " + path);
}

// Writes <stem>.html and <stem>.tsv.
inline void render_report(const ChunkedDocument& doc, const std::vector<LabelExplanation>& labels,
                          const std::string& html_path, const std::string& sidecar_path) {
  write_file(html_path, render_html(doc.id, doc.words, labels));
  write_file(sidecar_path, render_sidecar(labels));
}

struct SidecarRow {
  std::string label;
  std::size_t word_index = 0;
  std::string word;
  double weight = 0.0;
};

inline std::vector<SidecarRow> parse_sidecar(std::istream& in) {
  std::vector<SidecarRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 4) throw ParseError("sidecar: expected 4 fields, got " + std::to_string(f.size()));
    rows.push_back({f[0], std::stoul(f[1]), f[2], std::stod(f[3])});
  }
  return rows;
}

}  // namespace hilat
