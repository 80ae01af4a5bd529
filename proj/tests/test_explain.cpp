#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "hilat/explain.hpp"
#include "test_util.hpp"

using namespace hilat;

namespace {

std::vector<std::vector<double>> random_global(const ChunkedDocument& doc, Rng& rng) {
  std::vector<std::vector<double>> g;
  for (const auto& c : doc.chunks) {
    std::vector<double> v(c.slots());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = c.pad_mask[j] ? rng.uniform() : 0.0;
    g.push_back(v);
  }
  return g;
}

double total_weight(const WordAttention& wa) {
  double s = 0;
  for (const auto& w : wa.words) s += w.weight;
  return s;
}

}  // namespace

TEST(GlobalAttention, ScalesTokenWeights) {
  const std::vector<double> alpha = {0.5, 0.3, 0.2, 0.0};
  const auto g = global_token_attention(alpha, 0.1);
  EXPECT_DOUBLE_EQ(g[0], 0.05);
  EXPECT_DOUBLE_EQ(g[1], 0.03);
  EXPECT_DOUBLE_EQ(g[2], 0.02);
  EXPECT_EQ(g[3], 0.0);
  for (double x : global_token_attention(alpha, 0.0)) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(global_token_attention(alpha, 1.0), alpha);
}

TEST(WordAttentionTest, SingleMultiTokenWordGetsEverything) {
  Vocabulary v(std::vector<std::string>{"ab", "##cd"});
  const ChunkedDocument doc = chunk_words("d", {"abcd"}, v, 1, 4, 2);
  std::vector<std::vector<double>> g = {{0.0, 0.03, 0.01, 0.0, 0.0, 0.0}};
  const WordAttention wa = word_attention(doc, g, 0);
  ASSERT_EQ(wa.words.size(), 1u);
  EXPECT_DOUBLE_EQ(wa.words[0].weight, 1.0);
  EXPECT_EQ(wa.words[0].word, "abcd");
}

TEST(WordAttentionTest, TwoWordsNormalize) {
  Vocabulary v(std::vector<std::string>{"x", "y"});
  const ChunkedDocument doc = chunk_words("d", {"x", "y"}, v, 1, 2);
  std::vector<std::vector<double>> g = {{0.1, 0.2, 0.6, 0.1}};
  const WordAttention wa = word_attention(doc, g, 0);
  ASSERT_EQ(wa.words.size(), 2u);
  EXPECT_DOUBLE_EQ(wa.words[0].weight, 0.25);
  EXPECT_DOUBLE_EQ(wa.words[1].weight, 0.75);
}

TEST(WordAttentionTest, EmptyDocumentIsDegenerate) {
  Vocabulary v;
  const ChunkedDocument doc = chunk_words("d", {}, v, 2, 3);
  std::vector<std::vector<double>> g(2, std::vector<double>(5, 0.2));
  EXPECT_THROW(word_attention(doc, g, 0), DegenerateError);
  EXPECT_THROW(word_attention(doc, std::vector<std::vector<double>>(1), 0), ShapeError);
}

TEST(WordAttentionTest, SubwordModeMatchesSlotWalkOracle) {
  Rng rng(1);
  Vocabulary v;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_chunks = 1 + rng.below(3), content = 1 + rng.below(7);
    std::vector<std::string> words(1 + rng.below(14));
    for (auto& w : words) w = std::string(1 + rng.below(6), static_cast<char>('a' + rng.below(26)));
    const ChunkedDocument doc = chunk_words("d", words, v, n_chunks, content, 3);
    const auto g = random_global(doc, rng);
    // Walk content slots in order, handing them to words by piece count.
    std::vector<double> mass(words.size(), 0.0);
    std::size_t w = 0, left = word_pieces(words[0], 3).size();
    for (std::size_t n = 0; n < n_chunks; ++n) {
      for (std::size_t j = 1; j <= content; ++j) {
        if (!doc.chunks[n].pad_mask[j]) continue;
        while (left == 0) left = word_pieces(words[++w], 3).size();
        mass[w] += g[n][j];
        --left;
      }
    }
    const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    const WordAttention wa = word_attention(doc, g, 0);
    ASSERT_NEAR(total_weight(wa), 1.0, 1e-12);
    for (const auto& ww : wa.words) {
      ASSERT_NEAR(ww.weight, mass[ww.word_index] / total, 1e-12);
      ASSERT_GE(ww.weight, 0.0);
    }
  }
}

TEST(WordAttentionTest, WhitespaceModeIsNormalizedContentSlots) {
  Rng rng(2);
  Vocabulary v;
  std::vector<std::string> words(9, "w");
  const ChunkedDocument doc = chunk_words("d", words, v, 2, 5);
  const auto g = random_global(doc, rng);
  std::vector<double> flat;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 1; j <= 5; ++j)
      if (doc.chunks[n].pad_mask[j]) flat.push_back(g[n][j]);
  const double total = std::accumulate(flat.begin(), flat.end(), 0.0);
  const WordAttention wa = word_attention(doc, g, 0);
  ASSERT_EQ(wa.words.size(), flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_NEAR(wa.words[i].weight, flat[i] / total, 1e-15);
}

TEST(WordAttentionTest, FromForwardRecordSumsToOne) {
  Rng rng(3);
  std::vector<std::string> vocab_words;
  for (int i = 0; i < 20; ++i) vocab_words.push_back("v" + std::to_string(i));
  const Vocabulary v(vocab_words);
  EmbeddingEncoder enc(v.size(), 4, 8, true, rng);
  for (DocRepr repr : {DocRepr::chunk_attention, DocRepr::mean_pool}) {
    HeadConfig cfg;
    cfg.d_e = 4;
    cfg.n_labels = 3;
    cfg.n_chunks = 3;
    cfg.repr = repr;
    HeadParams head = random_head(cfg, rng);
    std::vector<std::string> text;
    for (int i = 0; i < 13; ++i) text.push_back(vocab_words[rng.below(20)]);
    const ChunkedDocument doc = chunk_words("d", text, v, 3, 6);
    Tape t;
    ForwardOptions opt;
    opt.record = true;
    const auto res = forward(t, doc, enc, head, cfg, opt);
    for (std::size_t l = 0; l < 3; ++l) {
      const auto g = global_attention(*res.record, l);
      double s = 0;
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t j = 0; j < g[n].size(); ++j) {
          if (!doc.chunks[n].pad_mask[j]) {
            EXPECT_EQ(g[n][j], 0.0);
          }
          s += g[n][j];
        }
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_NEAR(total_weight(word_attention(doc, *res.record, l)), 1.0, 1e-12);
    }
  }
}

TEST(TopWords, DescendingWithIndexTieBreak) {
  WordAttention wa;
  wa.words = {{0, "a", 0.2}, {1, "b", 0.4}, {2, "c", 0.2}, {3, "d", 0.2}};
  const auto top = top_words(wa, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].word_index, 1u);
  EXPECT_EQ(top[1].word_index, 0u);
  EXPECT_EQ(top[2].word_index, 2u);
  EXPECT_EQ(top_words(wa, 10).size(), 4u);
}

namespace {

std::vector<LabelExplanation> sample_labels(Rng& rng, std::size_t n_labels, std::size_t n_words) {
  std::vector<LabelExplanation> out;
  for (std::size_t l = 0; l < n_labels; ++l) {
    LabelExplanation le;
    le.code = "L<" + std::to_string(l) + ">";
    le.probability = 0.5 + 0.1 * static_cast<double>(l);
    le.attention.label = l;
    double total = 0;
    for (std::size_t i = 0; i < n_words; ++i) {
      const double w = rng.uniform() * (rng.bernoulli(0.1) ? 1e-9 : 1.0);
      le.attention.words.push_back({i, "w" + std::to_string(i), w});
      total += w;
    }
    for (auto& w : le.attention.words) w.weight /= total;
    out.push_back(le);
  }
  return out;
}

}  // namespace

TEST(Report, OneSectionPerLabelAndEscaping) {
  Rng rng(4);
  const auto labels = sample_labels(rng, 1, 5);
  const std::vector<std::string> words = {"w0", "w1", "<b>", "w3", "a&b"};
  const std::string html = render_html("doc\"1", words, labels);
  std::size_t sections = 0;
  for (std::size_t p = html.find("<section"); p != std::string::npos; p = html.find("<section", p + 1)) ++sections;
  EXPECT_EQ(sections, 1u);
  EXPECT_NE(html.find("L&lt;0&gt;"), std::string::npos);
  EXPECT_NE(html.find("&lt;b&gt;"), std::string::npos);
  EXPECT_NE(html.find("a&amp;b"), std::string::npos);
  EXPECT_NE(html.find("rgba(220,40,40,1.000)"), std::string::npos);
  EXPECT_EQ(render_html("doc\"1", words, labels), html);
  const std::string empty = render_html("x", words, {});
  EXPECT_NE(empty.find("No label reached the prediction threshold."), std::string::npos);
  EXPECT_EQ(empty.find("<section"), std::string::npos);
}

TEST(Report, SidecarResumsAndArgmaxMatches) {
  Rng rng(5);
  const auto labels = sample_labels(rng, 3, 400);
  std::istringstream in(render_sidecar(labels));
  const auto rows = parse_sidecar(in);
  ASSERT_EQ(rows.size(), 1200u);
  std::map<std::string, double> sums;
  std::map<std::string, std::pair<double, std::size_t>> best;
  for (const auto& r : rows) {
    sums[r.label] += r.weight;
    auto& b = best[r.label];
    if (r.weight > b.first) b = {r.weight, r.word_index};
  }
  for (const auto& le : labels) {
    EXPECT_NEAR(sums[le.code], 1.0, 1e-6) << le.code;
    EXPECT_EQ(best[le.code].second, top_words(le.attention, 1).front().word_index);
  }
}

TEST(Report, FilesWrittenAndUnwritablePathFails) {
  Rng rng(6);
  Vocabulary v;
  const ChunkedDocument doc = chunk_words("d7", {"a", "b", "c"}, v, 1, 4);
  const auto labels = sample_labels(rng, 2, 3);
  const auto dir = hilat_test::scratch_dir("report");
  render_report(doc, labels, (dir / "d7.html").string(), (dir / "d7.tsv").string());
  EXPECT_TRUE(std::filesystem::exists(dir / "d7.html"));
  EXPECT_TRUE(std::filesystem::exists(dir / "d7.tsv"));
  EXPECT_THROW(render_report(doc, labels, (dir / "missing" / "x.html").string(), (dir / "x.tsv").string()), IoError);
}
