#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "hilat/synthgen.hpp"
#include "test_util.hpp"

using namespace hilat;

namespace {

bool contains_phrase(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  if (phrase.empty() || words.size() < phrase.size()) return false;
  for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i)
    if (std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  return false;
}

// Labels predicted by exact phrase matching on the cleaned text.
std::vector<std::string> keyword_oracle(const Document& d, const Corpus& c) {
  const auto words = detail::split_ws(clean_text(d.text));
  std::vector<std::string> out;
  for (const auto& code : c.labels.codes())
    for (const auto& p : c.keywords.at(code))
      if (contains_phrase(words, detail::split_ws(p))) {
        out.push_back(code);
        break;
      }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CorpusSpec small_spec(std::uint64_t seed) {
  CorpusSpec s;
  s.seed = seed;
  s.mean_words = 300;
  return s;
}

}  // namespace

TEST(Synthgen, SplitSizes) {
  const Corpus c = generate_corpus(small_spec(1));
  EXPECT_EQ(c.train.size(), 140u);
  EXPECT_EQ(c.val.size(), 30u);
  EXPECT_EQ(c.test.size(), 30u);
  EXPECT_EQ(c.labels.size(), 10u);
}

TEST(Synthgen, KeywordOracleIsPerfectWithoutNoise) {
  for (std::uint64_t seed : {1, 2, 3}) {
    CorpusSpec spec = small_spec(seed);
    spec.phrases_per_label = 1 + seed % 2;
    const Corpus c = generate_corpus(spec);
    for (const auto* split : {&c.train, &c.val, &c.test})
      for (const auto& d : *split) ASSERT_EQ(keyword_oracle(d, c), d.labels) << d.id;
  }
}

TEST(Synthgen, LabelNoiseBreaksTheOracle) {
  CorpusSpec spec = small_spec(4);
  spec.label_noise = 0.2;
  const Corpus c = generate_corpus(spec);
  std::size_t mismatched = 0;
  for (const auto& d : c.train) mismatched += keyword_oracle(d, c) != d.labels;
  EXPECT_GT(mismatched, 50u);
}

TEST(Synthgen, LabelCountsWithinBounds) {
  CorpusSpec spec = small_spec(5);
  spec.min_labels = 2;
  spec.max_labels = 6;
  spec.mean_labels = 4.0;
  const Corpus c = generate_corpus(spec);
  double total = 0;
  std::size_t n = 0;
  for (const auto* split : {&c.train, &c.val, &c.test})
    for (const auto& d : *split) {
      ASSERT_GE(d.labels.size(), 2u);
      ASSERT_LE(d.labels.size(), 6u);
      total += static_cast<double>(d.labels.size());
      ++n;
    }
  EXPECT_NEAR(total / static_cast<double>(n), 4.0, 0.4);
}

TEST(Synthgen, DiagnosisSectionComesLastAndReorderMovesIt) {
  const Corpus c = generate_corpus(small_spec(6));
  const Document& d = c.train.front();
  const auto sections = split_sections(d.text);
  ASSERT_GE(sections.size(), 3u);
  EXPECT_EQ(sections.back().header, "discharge diagnosis");
  const auto reordered = split_sections(reorder_sections(d.text, default_front_sections()));
  EXPECT_EQ(reordered.front().header, "discharge diagnosis");
}

TEST(Synthgen, SameSeedByteIdenticalFiles) {
  const auto a = hilat_test::scratch_dir("synth_a"), b = hilat_test::scratch_dir("synth_b"),
             other = hilat_test::scratch_dir("synth_c");
  write_corpus(generate_corpus(small_spec(7)), a.string());
  write_corpus(generate_corpus(small_spec(7)), b.string());
  write_corpus(generate_corpus(small_spec(8)), other.string());
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "labels.txt", "keywords.json",
                        "label_descriptions.tsv"}) {
    ASSERT_TRUE(std::filesystem::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_NE(slurp(a / "train.jsonl"), slurp(other / "train.jsonl"));
}

TEST(Synthgen, FilesLoadBack) {
  const auto dir = hilat_test::scratch_dir("synth_load");
  const Corpus c = generate_corpus(small_spec(9));
  write_corpus(c, dir.string());
  const LabelSet labels = load_label_set((dir / "labels.txt").string());
  EXPECT_EQ(labels, c.labels);
  const auto train = load_dataset((dir / "train.jsonl").string(), &labels);
  ASSERT_EQ(train.size(), c.train.size());
  EXPECT_EQ(train[3].text, c.train[3].text);
  EXPECT_EQ(load_keywords((dir / "keywords.json").string()), c.keywords);
  std::ifstream desc(dir / "label_descriptions.tsv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(desc, line)) {
    const auto tab = line.find('\t');
    ASSERT_NE(tab, std::string::npos);
    EXPECT_EQ(c.descriptions.at(line.substr(0, tab)), line.substr(tab + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 10u);
}

TEST(Synthgen, PhrasesAreDisjointAndSpecErrors) {
  const Corpus c = generate_corpus(small_spec(10));
  std::set<std::string> words;
  std::size_t total = 0;
  for (const auto& [code, phrases] : c.keywords)
    for (const auto& p : phrases)
      for (const auto& w : detail::split_ws(p)) {
        words.insert(w);
        ++total;
      }
  EXPECT_EQ(words.size(), total);

  CorpusSpec shared = small_spec(1);
  shared.n_labels = 2;
  shared.min_labels = 1;
  shared.mean_labels = 1.5;
  shared.keywords = {{"red fox"}, {"blue jay", "red fox"}};
  EXPECT_THROW(generate_corpus(shared), ConfigError);
  shared.keywords = {{"red fox"}, {"blue jay"}};
  const Corpus ok = generate_corpus(shared);
  EXPECT_EQ(ok.keywords.at(ok.labels.code(1)), (std::vector<std::string>{"blue jay"}));

  CorpusSpec bad = small_spec(1);
  bad.min_labels = 11;
  EXPECT_THROW(generate_corpus(bad), ConfigError);
  bad = small_spec(1);
  bad.mean_labels = 1.0;
  EXPECT_THROW(generate_corpus(bad), ConfigError);
  bad = small_spec(1);
  bad.n_docs = 2;
  EXPECT_THROW(generate_corpus(bad), ConfigError);
}
