#pragma once

// Seeded synthetic corpora with planted label keyword phrases. Documents carry
// clinical-style section headers, with the diagnosis section last so that
// section reordering has something to do.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilat/error.hpp"
#include "hilat/rng.hpp"
#include "hilat/textprep.hpp"

namespace hilat {

struct CorpusSpec {
  std::size_t n_docs = 200;
  std::size_t n_labels = 10;
  std::size_t phrases_per_label = 1;
  std::size_t min_labels = 2;
  double mean_labels = 4.0;
  std::size_t max_labels = 0;  // 0 = n_labels
  std::size_t mean_words = 2000;
  std::size_t background_vocab = 2000;
  double noise_tokens = 0.02;     // rate of de-id brackets, numbers and rules in the text
  double label_noise = 0.0;       // probability of flipping each gold label
  double diagnosis_share = 0.5;   // chance a phrase also lands in the diagnosis section
  std::uint64_t seed = 0;
  // Optional fixed phrases, one list per label; generated when empty.
  std::vector<std::vector<std::string>> keywords;

  void validate() const {
    if (n_docs < 3) throw ConfigError("corpus spec: n_docs must be at least 3");
    if (n_labels == 0) throw ConfigError("corpus spec: n_labels must be positive");
    if (min_labels > n_labels) throw ConfigError("corpus spec: min_labels exceeds n_labels");
    const std::size_t cap = max_labels == 0 ? n_labels : max_labels;
    if (cap < min_labels || cap > n_labels) throw ConfigError("corpus spec: max_labels out of range");
    if (mean_labels < static_cast<double>(min_labels) || mean_labels > static_cast<double>(cap)) {
      throw ConfigError("corpus spec: mean_labels must lie within [min_labels, max_labels]");
    }
    if (phrases_per_label == 0) throw ConfigError("corpus spec: phrases_per_label must be positive");
    if (mean_words < 20) throw ConfigError("corpus spec: mean_words must be at least 20");
    if (background_vocab < 50) throw ConfigError("corpus spec: background_vocab must be at least 50");
    for (double r : {noise_tokens, label_noise, diagnosis_share}) {
      if (r < 0.0 || r > 1.0) throw ConfigError("corpus spec: rates must lie in [0, 1]");
    }
    if (!keywords.empty()) {
      if (keywords.size() != n_labels) throw ConfigError("corpus spec: keyword lists must match n_labels");
      std::map<std::string, std::size_t> owner;
      for (std::size_t l = 0; l < keywords.size(); ++l) {
        if (keywords[l].empty()) throw ConfigError("corpus spec: label " + std::to_string(l) + " has no phrase");
        for (const auto& p : keywords[l]) {
          auto [it, fresh] = owner.emplace(p, l);
          if (!fresh) {
            throw ConfigError("corpus spec: phrase '" + p + "' is shared by labels " + std::to_string(it->second) +
                              " and " + std::to_string(l));
          }
        }
      }
    }
  }
};

struct Corpus {
  std::vector<Document> train, val, test;
  LabelSet labels;
  std::map<std::string, std::vector<std::string>> keywords;  // code -> phrases
  std::map<std::string, std::string> descriptions;           // code -> text
};

namespace detail {

inline const std::vector<std::string>& synth_sections() {
  static const std::vector<std::string> v = {"Chief Complaint",
                                             "History of Present Illness",
                                             "Past Medical History",
                                             "Social History",
                                             "Family History",
                                             "Allergies",
                                             "Medications on Admission",
                                             "Physical Exam",
                                             "Pertinent Results",
                                             "Brief Hospital Course",
                                             "Discharge Medications",
                                             "Discharge Instructions",
                                             "Discharge Diagnosis"};
  return v;
}

// Lowercase alphabetic pseudo-words built from consonant-vowel syllables.
class WordMaker {
 public:
  explicit WordMaker(Rng& rng) : rng_(rng) {}

  std::string fresh(std::size_t min_syll, std::size_t max_syll) {
    static const char* cons = "bcdfghjklmnprstvz";
    static const char* vows = "aeiou";
    for (int attempt = 0; attempt < 100000; ++attempt) {
      const std::size_t n = min_syll + rng_.below(max_syll - min_syll + 1);
      std::string w;
      for (std::size_t i = 0; i < n; ++i) {
        w.push_back(cons[rng_.below(17)]);
        w.push_back(vows[rng_.below(5)]);
        if (rng_.bernoulli(0.3)) w.push_back(cons[rng_.below(17)]);
      }
      if (stop_words().count(w) || !used_.insert(w).second) continue;
      return w;
    }
    throw ConfigError("corpus spec: could not generate enough distinct words");
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

inline std::string noise_token(Rng& rng) {
  switch (rng.below(4)) {
    case 0:
      return "[**" + std::to_string(2100 + rng.below(80)) + "-" + std::to_string(1 + rng.below(12)) + "-" +
             std::to_string(1 + rng.below(28)) + "**]";
    case 1:
      return std::to_string(rng.below(500));
    case 2:
      return "==";
    default:
      return std::to_string(rng.below(100)) + "." + std::to_string(rng.below(10));
  }
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  detail::WordMaker maker(rng);
  const std::size_t L = spec.n_labels;
  const std::size_t cap = spec.max_labels == 0 ? L : spec.max_labels;

  std::vector<std::vector<std::vector<std::string>>> phrases(L);  // label -> phrase -> words
  if (spec.keywords.empty()) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t k = 0; k < spec.phrases_per_label; ++k) {
        std::vector<std::string> words(2 + rng.below(2));
        for (auto& w : words) w = maker.fresh(3, 4);
        phrases[l].push_back(words);
      }
    }
  } else {
    for (std::size_t l = 0; l < L; ++l)
      for (const auto& p : spec.keywords[l]) phrases[l].push_back(detail::split_ws(p));
  }
  std::vector<std::string> background(spec.background_vocab);
  for (auto& w : background) w = maker.fresh(1, 3);

  Corpus c;
  std::vector<std::string> codes;
  for (std::size_t l = 0; l < L; ++l) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu.%zu", 100 + 37 * l % 900, l % 10);
    codes.push_back(buf);
  }
  c.labels = LabelSet(codes);
  for (std::size_t l = 0; l < L; ++l) {
    std::string desc;
    for (const auto& p : phrases[l]) {
      std::string joined;
      for (const auto& w : p) joined += (joined.empty() ? "" : " ") + w;
      c.keywords[codes[l]].push_back(joined);
      desc += (desc.empty() ? "" : ", ") + joined;
    }
    c.descriptions[codes[l]] = desc + ", unspecified";
  }

  // Label count: min + Binomial(cap - min, p) with mean `mean_labels`.
  const double p_extra = cap > spec.min_labels ? (spec.mean_labels - static_cast<double>(spec.min_labels)) /
                                                     static_cast<double>(cap - spec.min_labels)
                                               : 0.0;
  const auto& sections = detail::synth_sections();
  const std::size_t diag = sections.size() - 1;
  std::vector<Document> docs;
  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    std::size_t k = spec.min_labels;
    for (std::size_t i = spec.min_labels; i < cap; ++i) k += rng.bernoulli(p_extra) ? 1 : 0;
    std::vector<std::size_t> pool(L);
    for (std::size_t l = 0; l < L; ++l) pool[l] = l;
    rng.shuffle(pool);
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());

    const double scale = 0.5 + rng.uniform();
    const auto n_words = static_cast<std::size_t>(std::llround(scale * static_cast<double>(spec.mean_words)));
    // Sections are lists of units (a word or a whole phrase) so a later
    // insertion never splits an earlier phrase.
    std::vector<std::vector<std::vector<std::string>>> body(sections.size());
    for (std::size_t i = 0; i < n_words; ++i) {
      // The diagnosis section is kept short, like a real diagnosis list.
      const std::size_t s = rng.bernoulli(0.02) ? diag : rng.below(diag);
      body[s].push_back({rng.bernoulli(spec.noise_tokens) ? detail::noise_token(rng)
                                                          : background[rng.below(background.size())]});
    }
    for (std::size_t l : chosen) {
      for (const auto& phrase : phrases[l]) {
        const std::size_t times = 1 + rng.below(2);
        for (std::size_t t = 0; t < times; ++t) {
          const std::size_t s = (t == 0 && rng.bernoulli(spec.diagnosis_share)) ? diag : rng.below(sections.size());
          auto& sec = body[s];
          const std::size_t at = rng.below(sec.size() + 1);
          sec.insert(sec.begin() + static_cast<std::ptrdiff_t>(at), phrase);
        }
      }
    }
    std::string text = "Admission Date: [**2101-1-1**] Discharge Date: [**2101-1-9**]\n";
    for (std::size_t s = 0; s < sections.size(); ++s) {
      if (body[s].empty()) continue;
      text += sections[s] + ":\n";
      std::vector<std::string> words;
      for (const auto& unit : body[s]) words.insert(words.end(), unit.begin(), unit.end());
      for (std::size_t i = 0; i < words.size(); ++i) {
        text += words[i];
        text += (i + 1) % 12 == 0 || i + 1 == words.size() ? "\n" : " ";
      }
      text += "\n";
    }
    std::vector<bool> gold(L, false);
    for (std::size_t l : chosen) gold[l] = true;
    for (std::size_t l = 0; l < L; ++l)
      if (spec.label_noise > 0.0 && rng.bernoulli(spec.label_noise)) gold[l] = !gold[l];
    Document doc;
    char id[32];
    std::snprintf(id, sizeof id, "doc%05zu", d);
    doc.id = id;
    doc.text = std::move(text);
    for (std::size_t l = 0; l < L; ++l)
      if (gold[l]) doc.labels.push_back(codes[l]);
    docs.push_back(std::move(doc));
  }
  const std::size_t n_train = spec.n_docs * 70 / 100;
  const std::size_t n_val = spec.n_docs * 15 / 100;
  c.train.assign(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.val.assign(docs.begin() + static_cast<std::ptrdiff_t>(n_train),
               docs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  c.test.assign(docs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), docs.end());
  return c;
}

// train/val/test.jsonl, labels.txt, keywords.json, label_descriptions.tsv.
inline void write_corpus(const Corpus& c, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  save_dataset(c.train, (base / "train.jsonl").string());
  save_dataset(c.val, (base / "val.jsonl").string());
  save_dataset(c.test, (base / "test.jsonl").string());
  save_label_set(c.labels, (base / "labels.txt").string());
  {
    std::ofstream out(base / "keywords.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (base / "keywords.json").string());
    out << nlohmann::json(c.keywords).dump(2) << "\n";
  }
  std::ofstream out(base / "label_descriptions.tsv", std::ios::binary);
  if (!out) throw IoError("cannot write " + (base / "label_descriptions.tsv").string());
  for (const auto& code : c.labels.codes()) out << code << "\t" << c.descriptions.at(code) << "\n";
}

inline std::map<std::string, std::vector<std::string>> load_keywords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open keyword map: " + path);
  try {
    return nlohmann::json::parse(in).get<std::map<std::string, std::vector<std::string>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("keyword map " + path + ": " + e.what());
  }
}

}  // namespace hilat
