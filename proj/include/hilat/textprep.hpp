#pragma once

// Document cleaning, section reordering, vocabulary building, and chunking
// into fixed-length token windows.
//
// Chunk layout: slot 0 holds CLS, slots 1..content_len hold content tokens
// (PAD-filled), slot content_len+1 holds SEP.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilat/error.hpp"

namespace hilat {

struct Document {
  std::string id;
  std::string text;
  std::vector<std::string> labels;
};

// Ordered label codes; line number in the label file = label index.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> codes) : codes_(std::move(codes)) {
    for (std::size_t i = 0; i < codes_.size(); ++i) {
      if (!index_.emplace(codes_[i], i).second) throw ValidationError("duplicate label code: " + codes_[i]);
    }
  }

  std::size_t size() const { return codes_.size(); }
  const std::vector<std::string>& codes() const { return codes_; }
  const std::string& code(std::size_t i) const { return codes_.at(i); }

  std::optional<std::size_t> find(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<double> encode(const std::vector<std::string>& labels) const {
    std::vector<double> y(codes_.size(), 0.0);
    for (const auto& l : labels) {
      auto idx = find(l);
      if (!idx) throw ValidationError("unknown label: " + l);
      y[*idx] = 1.0;
    }
    return y;
  }

  friend bool operator==(const LabelSet& a, const LabelSet& b) { return a.codes_ == b.codes_; }

 private:
  std::vector<std::string> codes_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline LabelSet load_label_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label vocabulary: " + path);
  std::vector<std::string> codes;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (line.empty()) continue;
    codes.push_back(line);
  }
  return LabelSet(std::move(codes));
}

inline void save_label_set(const LabelSet& labels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write label vocabulary: " + path);
  for (const auto& c : labels.codes()) out << c << '\n';
}

// JSON-lines dataset: {"id": str, "text": str, "labels": [str]} per line.
// Labels are validated when a label set is given.
inline std::vector<Document> parse_dataset(std::istream& in, const LabelSet* labels = nullptr) {
  std::vector<Document> docs;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + "expected a JSON object");
    for (const char* key : {"id", "text", "labels"}) {
      if (!j.contains(key)) throw ParseError(where + "missing \"" + key + "\"");
    }
    if (!j["id"].is_string() || !j["text"].is_string() || !j["labels"].is_array()) {
      throw ParseError(where + "field types must be id:string, text:string, labels:array");
    }
    Document d;
    d.id = j["id"].get<std::string>();
    d.text = j["text"].get<std::string>();
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) throw ParseError(where + "labels must be strings");
      d.labels.push_back(l.get<std::string>());
    }
    if (!seen.insert(d.id).second) throw ValidationError(where + "duplicate document id " + d.id);
    if (labels) {
      for (const auto& l : d.labels) {
        if (!labels->find(l)) throw ValidationError(where + "unknown label " + l);
      }
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<Document> load_dataset(const std::string& path, const LabelSet* labels = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  return parse_dataset(in, labels);
}

inline void save_dataset(const std::vector<Document>& docs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset: " + path);
  for (const auto& d : docs) {
    nlohmann::json j = {{"id", d.id}, {"text", d.text}, {"labels", d.labels}};
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

inline const std::unordered_set<std::string>& stop_words() {
  static const std::unordered_set<std::string> words = {
      "a",        "about",   "above",   "after",   "again",    "against", "all",     "am",      "an",
      "and",      "any",     "are",     "as",      "at",       "be",      "because", "been",    "before",
      "being",    "below",   "between", "both",    "but",      "by",      "can",     "could",   "did",
      "do",       "does",    "doing",   "down",    "during",   "each",    "few",     "for",     "from",
      "further",  "had",     "has",     "have",    "having",   "he",      "her",     "here",    "hers",
      "herself",  "him",     "himself", "his",     "how",      "i",       "if",      "in",      "into",
      "is",       "it",      "its",     "itself",  "just",     "me",      "more",    "most",    "my",
      "myself",   "no",      "nor",     "not",     "now",      "of",      "off",     "on",      "once",
      "only",     "or",      "other",   "ought",   "our",      "ours",    "ourselves", "out",   "over",
      "own",      "same",    "she",     "should",  "so",       "some",    "such",    "than",    "that",
      "the",      "their",   "theirs",  "them",    "themselves", "then",  "there",   "these",   "they",
      "this",     "those",   "through", "to",      "too",      "under",   "until",   "up",      "very",
      "was",      "we",      "were",    "what",    "when",     "where",   "which",   "while",   "who",
      "whom",     "why",     "will",    "with",    "would",    "you",     "your",    "yours",   "yourself",
      "yourselves", "also",  "may",     "might",   "must",     "shall",   "upon",    "via",     "within",
      "without",  "yet",     "ever",    "every",   "either",   "neither", "whether", "whose",   "among",
      "around",   "along",   "already", "although", "always", "another", "anyone",  "anything", "became",
      "become",   "behind",  "beside",  "besides", "beyond",   "cannot",  "else",    "enough",  "etc",
      "even",     "however", "less",    "many",    "much",     "never",   "often",   "perhaps", "rather",
      "since",    "still",   "though",  "thus",    "together", "toward",  "towards", "unless",  "whereas"};
  return words;
}

struct CleanOptions {
  bool keep_nonalpha = false;     // ablation a
  bool remove_stopwords = false;  // ablation b
  // Replaces the default "[**...**]" de-identification pattern when set.
  std::optional<std::regex> deid_pattern;
  std::string deid_source;  // pattern text, kept for checkpoints

  void set_deid_pattern(const std::string& pattern) {
    if (pattern.empty()) {
      deid_pattern.reset();
    } else {
      try {
        deid_pattern.emplace(pattern);
      } catch (const std::regex_error& e) {
        throw ConfigError("bad de-identification pattern: " + std::string(e.what()));
      }
    }
    deid_source = pattern;
  }
};

namespace detail {

inline std::string remove_all(std::string s, std::string_view needle) {
  std::string out;
  out.reserve(s.size());
  std::size_t pos = 0;
  while (true) {
    const std::size_t hit = s.find(needle, pos);
    if (hit == std::string::npos) break;
    out.append(s, pos, hit - pos);
    pos = hit + needle.size();
  }
  out.append(s, pos, std::string::npos);
  return out;
}

inline std::string remove_deid_brackets(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = s.find("[**", pos);
    if (open == std::string::npos) break;
    const std::size_t close = s.find("**]", open + 3);
    if (close == std::string::npos) break;
    out.append(s, pos, open - pos);
    out.push_back(' ');
    pos = close + 3;
  }
  out.append(s, pos, std::string::npos);
  return out;
}

inline bool has_alpha(std::string_view w) {
  return std::any_of(w.begin(), w.end(), [](unsigned char c) { return std::isalpha(c) != 0; });
}

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

inline std::string clean_text(std::string_view raw, const CleanOptions& opt = {}) {
  std::string s = detail::lower(std::string(raw));
  // Removing one pattern can splice together another ("-==-"), so iterate.
  while (true) {
    std::string next = opt.deid_pattern ? std::regex_replace(s, *opt.deid_pattern, " ")
                                        : detail::remove_deid_brackets(s);
    next = detail::remove_all(std::move(next), "==");
    next = detail::remove_all(std::move(next), "--");
    next = detail::remove_all(std::move(next), "__");
    if (next == s) break;
    s = std::move(next);
  }
  std::string out;
  for (const auto& w : detail::split_ws(s)) {
    if (!opt.keep_nonalpha && !detail::has_alpha(w)) continue;
    if (opt.remove_stopwords && stop_words().count(w)) continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

inline std::string clean_text(std::string_view raw, bool keep_nonalpha, bool remove_stopwords) {
  CleanOptions opt;
  opt.keep_nonalpha = keep_nonalpha;
  opt.remove_stopwords = remove_stopwords;
  return clean_text(raw, opt);
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

struct Section {
  std::string header;  // lowercased header name; empty for the preamble
  std::string text;    // verbatim, including the header line
};

// A header is a line starting with 1-6 letter-only words followed by ':'.
inline std::optional<std::string> section_header(std::string_view line) {
  static const std::regex re(R"(^\s*([A-Za-z]+(?: [A-Za-z]+){0,5})\s*:)");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(line.begin(), line.end(), m, re)) return std::nullopt;
  return detail::lower(m[1].str());
}

inline std::vector<Section> split_sections(std::string_view text) {
  std::vector<Section> out;
  Section cur;
  bool started = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl + 1;
    const std::string_view line = text.substr(pos, end - pos);
    if (auto h = section_header(line)) {
      if (started || !cur.text.empty()) out.push_back(std::move(cur));
      cur = Section{*h, {}};
      started = true;
    }
    cur.text.append(line);
    pos = end;
  }
  if (started || !cur.text.empty()) out.push_back(std::move(cur));
  return out;
}

inline const std::vector<std::string>& default_front_sections() {
  static const std::vector<std::string> v = {"discharge diagnosis", "discharge diagnoses", "discharge disposition",
                                             "discharge condition", "discharge conditions"};
  return v;
}

// Moves sections whose header matches `front` (case-insensitive) to the
// beginning, in `front` order; everything else keeps its relative order.
inline std::string reorder_sections(std::string_view text, const std::vector<std::string>& front) {
  const auto sections = split_sections(text);
  std::vector<bool> moved(sections.size(), false);
  std::string head;
  for (const auto& name : front) {
    const std::string key = detail::lower(detail::trim(name));
    for (std::size_t i = 0; i < sections.size(); ++i) {
      if (!moved[i] && !sections[i].header.empty() && sections[i].header == key) {
        moved[i] = true;
        head += sections[i].text;
        if (head.empty() || head.back() != '\n') head.push_back('\n');
      }
    }
  }
  if (head.empty()) return std::string(text);
  std::string rest;
  for (std::size_t i = 0; i < sections.size(); ++i)
    if (!moved[i]) rest += sections[i].text;
  return head + rest;
}

// header -> chunk index for meaningful chunking; "*" sets the fallback.
struct SectionMap {
  std::map<std::string, std::size_t> groups;
  std::size_t fallback = 0;

  std::size_t chunk_for(const std::string& header) const {
    auto it = groups.find(header);
    return it == groups.end() ? fallback : it->second;
  }
};

// Lines "header name = index"; '#' starts a comment; "* = index" sets the
// fallback group for the preamble and unmapped sections.
inline SectionMap parse_section_map(std::istream& in) {
  SectionMap m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.rfind('=');
    if (eq == std::string::npos) throw ParseError("section map line " + std::to_string(lineno) + ": missing '='");
    const std::string key = detail::lower(detail::trim(line.substr(0, eq)));
    const std::string val = detail::trim(line.substr(eq + 1));
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(val, &used);
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::exception&) {
      throw ParseError("section map line " + std::to_string(lineno) + ": bad chunk index '" + val + "'");
    }
    if (key == "*") {
      m.fallback = idx;
    } else {
      m.groups[key] = idx;
    }
  }
  return m;
}

inline SectionMap load_section_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open section map: " + path);
  return parse_section_map(in);
}

// Stand-in grouping of discharge-summary sections into ten chunks.
inline const char* default_section_map_text() {
  return R"(# header = chunk index (non-canonical default grouping)
discharge diagnosis = 0
discharge diagnoses = 0
discharge disposition = 0
discharge condition = 0
discharge conditions = 0
chief complaint = 1
history of present illness = 1
past medical history = 2
social history = 2
family history = 2
medications on admission = 3
allergies = 3
physical exam = 4
pertinent results = 5
brief hospital course = 6
discharge medications = 7
discharge instructions = 8
followup instructions = 8
* = 9
)";
}

inline SectionMap default_section_map() {
  std::istringstream in(default_section_map_text());
  return parse_section_map(in);
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization
// ---------------------------------------------------------------------------

using TokenId = std::uint32_t;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kReserved = 4;

  Vocabulary() {
    for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(t);
  }

  // Tokens in id order, excluding the reserved ones.
  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

  std::vector<std::string> content_tokens() const { return {tokens_.begin() + kReserved, tokens_.end()}; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& t) {
    if (ids_.count(t)) throw ValidationError("duplicate vocabulary token: " + t);
    ids_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Splits words longer than `threshold` characters into two pieces (the second
// prefixed "##"); threshold 0 keeps one token per word.
inline std::vector<std::string> word_pieces(const std::string& word, std::size_t threshold) {
  if (threshold == 0 || word.size() <= threshold) return {word};
  const std::size_t half = word.size() / 2;
  return {word.substr(0, half), "##" + word.substr(half)};
}

inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq,
                              std::size_t subword_threshold = 0) {
  if (min_freq < 1) throw UsageError("build_vocab: min_freq must be >= 1");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& text : corpus)
    for (const auto& w : detail::split_ws(text))
      for (const auto& p : word_pieces(w, subword_threshold)) ++freq[p];
  std::vector<std::pair<std::string, std::size_t>> items;
  for (auto& [tok, n] : freq)
    if (n >= min_freq) items.emplace_back(tok, n);
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(items.size());
  for (auto& it : items) tokens.push_back(std::move(it.first));
  return Vocabulary(tokens);
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary: " + path);
  for (const auto& t : v.content_tokens()) out << t << '\n';
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

struct WordSpan {
  std::size_t word_index = 0;
  std::size_t start_slot = 0;  // inclusive
  std::size_t end_slot = 0;    // exclusive

  friend bool operator==(const WordSpan&, const WordSpan&) = default;
};

struct TokenChunk {
  std::vector<TokenId> token_ids;
  std::vector<bool> pad_mask;  // true = real token (content, CLS or SEP)
  std::vector<WordSpan> word_spans;
  std::size_t chunk_index = 0;

  std::size_t slots() const { return token_ids.size(); }

  std::vector<std::size_t> real_slots() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pad_mask.size(); ++i)
      if (pad_mask[i]) out.push_back(i);
    return out;
  }

  friend bool operator==(const TokenChunk&, const TokenChunk&) = default;
};

struct ChunkedDocument {
  std::string id;
  std::vector<TokenChunk> chunks;
  std::vector<double> labels;      // binary vector over the label set
  std::vector<std::string> words;  // cleaned words referenced by word_spans
};

enum class ChunkStrategy { sequential, meaningful };

inline ChunkStrategy parse_chunk_strategy(const std::string& s) {
  if (s == "sequential") return ChunkStrategy::sequential;
  if (s == "meaningful") return ChunkStrategy::meaningful;
  throw ConfigError("unknown chunking strategy: " + s);
}

inline const char* to_string(ChunkStrategy s) {
  return s == ChunkStrategy::sequential ? "sequential" : "meaningful";
}

struct PrepConfig {
  CleanOptions clean;
  bool reorder = true;  // ablation c turns this off
  std::vector<std::string> front_sections = default_front_sections();
  std::size_t n_chunks = 10;
  std::size_t content_len = 510;
  ChunkStrategy strategy = ChunkStrategy::sequential;  // ablation d: meaningful
  SectionMap section_map = default_section_map();
  std::size_t subword_threshold = 0;  // test-only multi-token words

  std::size_t slots() const { return content_len + 2; }
};

namespace detail {

inline TokenChunk empty_chunk(std::size_t content_len, std::size_t index) {
  TokenChunk c;
  c.token_ids.assign(content_len + 2, Vocabulary::kPad);
  c.pad_mask.assign(content_len + 2, false);
  c.token_ids.front() = Vocabulary::kCls;
  c.token_ids.back() = Vocabulary::kSep;
  c.pad_mask.front() = true;
  c.pad_mask.back() = true;
  c.chunk_index = index;
  return c;
}

// Appends word pieces to `chunk` starting at content offset `*filled`,
// stopping at content_len. Returns false once the chunk is full.
inline bool append_word(TokenChunk& chunk, std::size_t& filled, std::size_t content_len, std::size_t word_index,
                        const std::vector<TokenId>& ids) {
  std::size_t k = 0;
  while (k < ids.size() && filled < content_len) {
    const std::size_t start = filled + 1;
    std::size_t n = 0;
    while (k < ids.size() && filled < content_len) {
      chunk.token_ids[filled + 1] = ids[k++];
      chunk.pad_mask[filled + 1] = true;
      ++filled;
      ++n;
    }
    chunk.word_spans.push_back({word_index, start, start + n});
  }
  return k == ids.size();
}

}  // namespace detail

// Sequential chunking of an already-cleaned word sequence: consecutive
// content_len windows, PAD tail, truncation past n_chunks*content_len.
inline ChunkedDocument chunk_words(const std::string& id, const std::vector<std::string>& words, const Vocabulary& vocab,
                                   std::size_t n_chunks, std::size_t content_len, std::size_t subword_threshold = 0) {
  if (n_chunks == 0 || content_len == 0) throw ConfigError("chunking needs n_chunks > 0 and content_len > 0");
  ChunkedDocument doc;
  doc.id = id;
  for (std::size_t n = 0; n < n_chunks; ++n) doc.chunks.push_back(detail::empty_chunk(content_len, n));
  std::size_t chunk = 0, filled = 0;
  for (std::size_t w = 0; w < words.size() && chunk < n_chunks; ++w) {
    std::vector<TokenId> ids;
    for (const auto& p : word_pieces(words[w], subword_threshold)) ids.push_back(vocab.id(p));
    std::size_t k = 0;
    // A word may straddle a chunk boundary; it then has one span per chunk.
    while (k < ids.size() && chunk < n_chunks) {
      std::vector<TokenId> rest(ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end());
      const std::size_t before = filled;
      detail::append_word(doc.chunks[chunk], filled, content_len, w, rest);
      k += filled - before;
      if (filled == content_len) {
        ++chunk;
        filled = 0;
      }
    }
    if (k > 0) doc.words.resize(w + 1);
  }
  for (std::size_t w = 0; w < doc.words.size(); ++w) doc.words[w] = words[w];
  return doc;
}

// Full pipeline for one document: optional reordering, cleaning, then
// sequential or section-grouped chunking.
inline ChunkedDocument chunk_document(const Document& d, const Vocabulary& vocab, const PrepConfig& cfg,
                                      const LabelSet* labels = nullptr) {
  ChunkedDocument out;
  if (cfg.strategy == ChunkStrategy::sequential) {
    const std::string text = cfg.reorder ? reorder_sections(d.text, cfg.front_sections) : d.text;
    out = chunk_words(d.id, detail::split_ws(clean_text(text, cfg.clean)), vocab, cfg.n_chunks, cfg.content_len,
                      cfg.subword_threshold);
  } else {
    out.id = d.id;
    std::vector<std::vector<std::string>> groups(cfg.n_chunks);
    for (const auto& s : split_sections(d.text)) {
      const std::size_t g = cfg.section_map.chunk_for(s.header);
      if (g >= cfg.n_chunks) {
        throw ConfigError("section map sends '" + s.header + "' to chunk " + std::to_string(g) + " but n_chunks=" +
                          std::to_string(cfg.n_chunks));
      }
      for (auto& w : detail::split_ws(clean_text(s.text, cfg.clean))) groups[g].push_back(std::move(w));
    }
    for (std::size_t n = 0; n < cfg.n_chunks; ++n) {
      TokenChunk c = detail::empty_chunk(cfg.content_len, n);
      std::size_t filled = 0;
      for (const auto& w : groups[n]) {
        std::vector<TokenId> ids;
        for (const auto& p : word_pieces(w, cfg.subword_threshold)) ids.push_back(vocab.id(p));
        if (filled == cfg.content_len) break;
        out.words.push_back(w);
        detail::append_word(c, filled, cfg.content_len, out.words.size() - 1, ids);
      }
      out.chunks.push_back(std::move(c));
    }
  }
  if (labels) out.labels = labels->encode(d.labels);
  return out;
}

// Cleaned text used for vocabulary building, matching chunk_document.
inline std::string prepared_text(const Document& d, const PrepConfig& cfg) {
  if (cfg.strategy == ChunkStrategy::meaningful) return clean_text(d.text, cfg.clean);
  return clean_text(cfg.reorder ? reorder_sections(d.text, cfg.front_sections) : d.text, cfg.clean);
}

inline Vocabulary build_vocab(const std::vector<Document>& docs, const PrepConfig& cfg, std::size_t min_freq) {
  std::vector<std::string> corpus;
  corpus.reserve(docs.size());
  for (const auto& d : docs) corpus.push_back(prepared_text(d, cfg));
  return build_vocab(corpus, min_freq, cfg.subword_threshold);
}

}  // namespace hilat
