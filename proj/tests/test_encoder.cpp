#include <gtest/gtest.h>

#include <cmath>

#include "hilat/checkpoint.hpp"
#include "hilat/encoder.hpp"
#include "test_util.hpp"

using namespace hilat;

namespace {

TokenChunk chunk_of(const std::vector<TokenId>& content, std::size_t content_len, std::size_t index = 0) {
  TokenChunk c = detail::empty_chunk(content_len, index);
  for (std::size_t i = 0; i < content.size(); ++i) {
    c.token_ids[i + 1] = content[i];
    c.pad_mask[i + 1] = true;
  }
  return c;
}

Matrix encode(ChunkEncoder& enc, const TokenChunk& c, std::string_view id = "d") {
  Tape t;
  return encode_chunk(t, enc, id, c).value();
}

}  // namespace

TEST(EmbeddingEncoder, AllPadChunkWithoutMixingIsPositionOnly) {
  Rng rng(1);
  EmbeddingEncoder enc(10, 3, 6, false, rng);
  const TokenChunk c = detail::empty_chunk(4, 0);
  const Matrix h = encode(enc, c);
  const auto& p = enc.params();
  for (std::size_t j = 1; j < 5; ++j)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(h(k, j), p.position_embedding.value(j, k));
}

TEST(EmbeddingEncoder, HandOracleForEmbedPlusPosition) {
  EncoderParams p;
  p.token_embedding = Parameter("tok", Matrix::from_rows({{0, 0}, {1, 2}, {3, 4}, {5, 6}, {7, 8}}));
  p.position_embedding = Parameter("pos", Matrix::from_rows({{0.1, 0.2}, {0.3, 0.4}, {0.5, 0.6}}));
  p.mix_weight = Parameter("w", Matrix::from_rows({{1, 0}, {0, -1}}));
  p.mix_bias = Parameter("b", Matrix::from_rows({{0.5}, {0}}));
  p.mixing = false;
  EmbeddingEncoder enc(p);
  const TokenChunk c = chunk_of({4}, 1);
  const Matrix h = encode(enc, c);
  // slot 0 = CLS (id 2), slot 1 = id 4, slot 2 = SEP (id 3)
  EXPECT_EQ(h, Matrix::from_rows({{3.1, 7.3, 5.5}, {4.2, 8.4, 6.6}}));

  p.mixing = true;
  EmbeddingEncoder mixed(p);
  const Matrix m = encode(mixed, c);
  EXPECT_DOUBLE_EQ(m(0, 1), std::tanh(7.3 + 0.5));
  EXPECT_DOUBLE_EQ(m(1, 1), std::tanh(-8.4));
}

TEST(EmbeddingEncoder, DeterministicForSameSeed) {
  Rng r1(9), r2(9);
  EmbeddingEncoder a(20, 4, 8, true, r1), b(20, 4, 8, true, r2);
  const TokenChunk c = chunk_of({5, 6, 7}, 6);
  EXPECT_EQ(encode(a, c), encode(b, c));
}

TEST(EmbeddingEncoder, SelectedColumnsMatchFullEncoding) {
  Rng rng(2);
  EmbeddingEncoder enc(20, 4, 8, true, rng);
  const TokenChunk c = chunk_of({5, 6, 7}, 6);
  const Matrix full = encode(enc, c);
  Tape t;
  const Matrix sub = enc.encode_columns(t, "d", c, {0, 3, 7}).value();
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(sub(k, 0), full(k, 0));
    EXPECT_EQ(sub(k, 1), full(k, 3));
    EXPECT_EQ(sub(k, 2), full(k, 7));
  }
}

TEST(EmbeddingEncoder, OutOfRangeIdAndSlotCount) {
  Rng rng(3);
  EmbeddingEncoder enc(6, 2, 4, true, rng);
  EXPECT_THROW(encode(enc, chunk_of({6}, 2)), IndexError);
  EXPECT_THROW(encode(enc, chunk_of({5}, 3)), ShapeError);
}

TEST(EmbeddingEncoder, FreezeModes) {
  Rng rng(4);
  EmbeddingEncoder enc(6, 2, 4, true, rng);
  enc.set_frozen(FreezeMode::all);
  for (auto* p : enc.parameters()) EXPECT_TRUE(p->frozen) << p->name;
  enc.set_frozen(FreezeMode::all_but_last);
  EXPECT_TRUE(enc.params().token_embedding.frozen);
  EXPECT_TRUE(enc.params().position_embedding.frozen);
  EXPECT_FALSE(enc.params().mix_weight.frozen);
  EXPECT_FALSE(enc.params().mix_bias.frozen);
  enc.set_frozen(FreezeMode::none);
  for (auto* p : enc.parameters()) EXPECT_FALSE(p->frozen) << p->name;
  EXPECT_THROW(parse_freeze_mode("some"), ConfigError);
}

TEST(EmbeddingEncoder, AbsentTokensGetZeroGradient) {
  Rng rng(5);
  EmbeddingEncoder enc(10, 3, 5, true, rng);
  const TokenChunk c = chunk_of({7, 7, 4}, 3);
  {
    Tape t;
    t.backward(sum(encode_chunk(t, enc, "d", c)));
  }
  const Matrix& g = enc.params().token_embedding.grad;
  for (std::size_t id = 0; id < 10; ++id) {
    const bool present = id == 2 || id == 3 || id == 4 || id == 7;
    double norm = 0;
    for (std::size_t k = 0; k < 3; ++k) norm += std::fabs(g(id, k));
    if (present) {
      EXPECT_GT(norm, 0.0) << id;
    } else {
      EXPECT_EQ(norm, 0.0) << id;
    }
  }
}

TEST(EmbeddingEncoder, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  EmbeddingEncoder enc(8, 3, 5, true, rng);
  const TokenChunk c = chunk_of({5, 6, 5}, 3);
  const Matrix target = hilat_test::random_matrix(3, 5, rng);
  auto f = [&](Tape& t) { return sum(mul(encode_chunk(t, enc, "d", c), t.constant(target))); };
  EXPECT_LT(hilat_test::max_fd_error(enc.parameters(), f), 1e-6);
}

TEST(EmbeddingEncoder, DropoutOnlyWhenTraining) {
  Rng rng(7);
  EmbeddingEncoder enc(8, 3, 5, true, rng);
  const TokenChunk c = chunk_of({5, 6, 5}, 3);
  Rng drop(1);
  Tape t1, t2;
  const Matrix eval = encode_chunk(t1, enc, "d", c, {0.5, false, &drop}).value();
  EXPECT_EQ(eval, encode(enc, c));
  const Matrix train = encode_chunk(t2, enc, "d", c, {0.5, true, &drop}).value();
  for (std::size_t i = 0; i < train.size(); ++i) EXPECT_TRUE(train[i] == 0.0 || train[i] == 2.0 * eval[i]);
  Tape t3;
  EXPECT_THROW(encode_chunk(t3, enc, "d", c, {0.5, true, nullptr}), UsageError);
}

TEST(ExternalVectors, RoundTripThroughFile) {
  Rng rng(8);
  VectorStore store(3, 512);
  const Matrix h0 = hilat_test::random_matrix(3, 512, rng), h1 = hilat_test::random_matrix(3, 512, rng);
  store.put("doc1", 0, h0);
  store.put("doc1", 1, h1);
  const auto dir = hilat_test::scratch_dir("extvec");
  const std::string path = (dir / "v.ckpt").string();
  save_external_vectors(store, path);
  const Matrix back = load_external_vectors(path, "doc1", 1, 3);
  ASSERT_EQ(back.rows(), 3u);
  ASSERT_EQ(back.cols(), 512u);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(h1[i])));
  EXPECT_THROW(load_external_vectors(path, "doc2", 0, 3), IndexError);
  EXPECT_THROW(load_external_vectors(path, "doc1", 0, 4), FormatError);
}

TEST(ExternalVectors, WrongColumnCountIsFormatError) {
  VectorStore store(3, 512);
  EXPECT_THROW(store.put("d", 0, Matrix(3, 511)), FormatError);
  // A file whose tensor disagrees with its own header.
  Checkpoint ck;
  ck.meta = {{"kind", "external_vectors"}, {"d_e", 3}, {"slots", 512}};
  ck.tensors.emplace_back("d#0", Matrix(3, 511));
  const auto dir = hilat_test::scratch_dir("extvec_bad");
  save_checkpoint(ck, (dir / "v.ckpt").string());
  EXPECT_THROW(load_external_vectors((dir / "v.ckpt").string(), "d", 0, 3), FormatError);
}

TEST(ExternalVectors, EncoderServesFrozenColumns) {
  auto store = std::make_shared<VectorStore>(2, 4);
  store->put("x", 1, Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}}));
  ExternalVectorEncoder enc(store);
  EXPECT_TRUE(enc.parameters().empty());
  const TokenChunk c = chunk_of({9}, 2, 1);
  Tape t;
  const Var h = enc.encode_columns(t, "x", c, {1, 3});
  EXPECT_EQ(h.value(), Matrix::from_rows({{2, 4}, {6, 8}}));
  EXPECT_FALSE(h.requires_grad());
}
