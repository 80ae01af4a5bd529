#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "hilat/train.hpp"
#include "test_util.hpp"

using namespace hilat;

namespace {

// Keyword corpus: label A iff "alpha" occurs, label B iff "beta" occurs.
std::vector<Document> keyword_docs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::string> filler = {"note", "stable", "pain", "fever", "rest", "home", "walk", "meal"};
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n; ++i) {
    Document d;
    d.id = "k" + std::to_string(i);
    const bool a = rng.bernoulli(0.5), b = rng.bernoulli(0.5);
    std::vector<std::string> words;
    for (int k = 0; k < 14; ++k) words.push_back(filler[rng.below(filler.size())]);
    if (a) words[rng.below(words.size())] = "alpha";
    if (b) words[rng.below(words.size())] = "beta";
    for (const auto& w : words) d.text += w + " ";
    if (a) d.labels.push_back("A");
    if (b) d.labels.push_back("B");
    docs.push_back(d);
  }
  return docs;
}

PrepConfig small_prep() {
  PrepConfig p;
  p.n_chunks = 2;
  p.content_len = 8;
  return p;
}

ModelConfig small_model() {
  ModelConfig m;
  m.d_e = 16;
  return m;
}

TrainConfig quick_train(std::size_t steps) {
  TrainConfig t = desk_profile();
  t.batch_size = 4;
  t.total_steps = steps;
  t.warmup_steps = steps / 10;
  t.val_every = 5;
  t.seed = 3;
  return t;
}

HilatModel small_model_for(const std::vector<Document>& docs, std::uint64_t seed = 1) {
  return HilatModel::create(docs, LabelSet(std::vector<std::string>{"A", "B"}), small_prep(), small_model(), seed);
}

}  // namespace

TEST(AdamW, ZeroGradientOnlyDecays) {
  Parameter p("p", Matrix::from_rows({{2.0, -4.0}}));
  AdamState st;
  adamw_step({&p}, st, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(p.value[1], -4.0 * (1 - 0.05));
  Parameter q("q", Matrix::from_rows({{3.0}}));
  AdamState st2;
  adamw_step({&q}, st2, 0.1, 0.0);
  EXPECT_EQ(q.value[0], 3.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // After bias correction the first update is lr * g / (|g| + eps).
  Parameter p("p", Matrix::from_rows({{1.0, 1.0}}));
  p.grad = Matrix::from_rows({{0.3, -2.0}});
  AdamState st;
  adamw_step({&p}, st, 0.01, 0.0);
  EXPECT_NEAR(p.value[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[1], 1.0 + 0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(AdamW, QuadraticMatchesScalarRecursion) {
  // f(x) = (x - 3)^2 / 2 per coordinate; oracle runs the textbook recursion.
  Parameter p("p", Matrix::from_rows({{0.0, 10.0}}));
  AdamState st;
  std::vector<double> x = {0.0, 10.0}, m = {0, 0}, v = {0, 0};
  const double lr = 0.05, wd = 0.01;
  for (int t = 1; t <= 500; ++t) {
    for (std::size_t i = 0; i < 2; ++i) p.grad[i] = p.value[i] - 3.0;
    adamw_step({&p}, st, lr, wd);
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = x[i] - 3.0;
      x[i] *= 1.0 - lr * wd;
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(p.value[i], x[i], 1e-12);
    EXPECT_NEAR(p.value[i], 3.0, 0.2);
  }
}

TEST(AdamW, FrozenSkippedAndNanAbortsBeforeAnyUpdate) {
  Parameter a("a", Matrix::from_rows({{1.0}})), b("b", Matrix::from_rows({{1.0}})), f("f", Matrix::from_rows({{1.0}}));
  f.frozen = true;
  a.grad[0] = 1.0;
  f.grad[0] = 1.0;
  b.grad[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  EXPECT_THROW(adamw_step({&a, &b, &f}, st, 0.1, 0.1), NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(st.t, 0u);
  b.grad[0] = 0.0;
  adamw_step({&a, &b, &f}, st, 0.1, 0.1);
  EXPECT_EQ(f.value[0], 1.0);
  EXPECT_NE(a.value[0], 1.0);
}

TEST(Schedule, WarmupThenLinearDecay) {
  EXPECT_DOUBLE_EQ(lr_schedule(5, 10, 100, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(lr_schedule(10, 10, 100, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(lr_schedule(55, 10, 100, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(lr_schedule(100, 10, 100, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(1, 0, 100, 2.0), 2.0 * 99 / 100);
  EXPECT_DOUBLE_EQ(lr_schedule(500, 500, 2500, 5e-5), 5e-5);
  EXPECT_THROW(lr_schedule(0, 10, 100, 1.0), UsageError);
  EXPECT_THROW(lr_schedule(101, 10, 100, 1.0), UsageError);
  EXPECT_THROW(lr_schedule(5, 200, 100, 1.0), UsageError);
}

TEST(Schedule, NeverExceedsBaseAndIsPeakedAtWarmup) {
  double prev = 0.0;
  for (std::size_t s = 1; s <= 50; ++s) {
    const double lr = lr_schedule(s, 20, 50, 0.3);
    EXPECT_LE(lr, 0.3 + 1e-15);
    if (s <= 20) {
      EXPECT_GT(lr, prev);
    } else {
      EXPECT_LT(lr, prev);
    }
    prev = lr;
  }
}

TEST(Profiles, PaperDefaults) {
  const TrainConfig p = paper_profile();
  EXPECT_EQ(p.batch_size, 16u);
  EXPECT_DOUBLE_EQ(p.learning_rate, 5e-5);
  EXPECT_DOUBLE_EQ(p.weight_decay, 0.1);
  EXPECT_EQ(p.total_steps, 2500u);
  EXPECT_EQ(p.warmup_steps, 500u);
  EXPECT_DOUBLE_EQ(p.dropout_p, 0.1);
  EXPECT_NO_THROW(p.validate());
  TrainConfig bad = p;
  bad.warmup_steps = 3000;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = p;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Training, ZeroStepsLeavesInitialization) {
  const auto docs = keyword_docs(12, 1);
  HilatModel m = small_model_for(docs);
  const std::string before = serialize_checkpoint(m.to_checkpoint());
  TrainConfig cfg = quick_train(0);
  const auto data = m.prepare(docs);
  const TrainResult r = train(m, data, cfg);
  EXPECT_EQ(r.steps_done, 0u);
  EXPECT_EQ(serialize_checkpoint(r.final_checkpoint), before);
}

TEST(Training, EmptyDatasetIsConfigError) {
  const auto docs = keyword_docs(4, 1);
  HilatModel m = small_model_for(docs);
  EXPECT_THROW(train(m, {}, quick_train(5)), ConfigError);
}

TEST(Training, SameSeedSameCheckpoint) {
  const auto docs = keyword_docs(20, 2);
  auto run = [&] {
    HilatModel m = small_model_for(docs, 5);
    const auto data = m.prepare(docs);
    return serialize_checkpoint(train(m, data, quick_train(12)).final_checkpoint);
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, WorkerCountDoesNotChangeTheResult) {
  const auto docs = keyword_docs(20, 3);
  auto run = [&](std::size_t workers) {
    HilatModel m = small_model_for(docs, 5);
    const auto data = m.prepare(docs);
    TrainConfig cfg = quick_train(6);
    cfg.workers = workers;
    train(m, data, cfg);
    std::vector<Matrix> values;
    for (Parameter* p : m.parameters()) values.push_back(p->value);
    return values;
  };
  const auto one = run(1), three = run(3);
  ASSERT_EQ(one.size(), three.size());
  for (std::size_t k = 0; k < one.size(); ++k)
    for (std::size_t i = 0; i < one[k].size(); ++i) ASSERT_NEAR(one[k][i], three[k][i], 1e-9);
}

TEST(Training, LossDecreasesAndKeywordsAreLearned) {
  const auto docs = keyword_docs(40, 4);
  HilatModel m = small_model_for(docs, 2);
  const auto data = m.prepare(docs);
  std::vector<double> losses;
  const TrainResult r = train(m, data, quick_train(120), &data, [&](const nlohmann::json& e) {
    if (e.contains("loss")) losses.push_back(e["loss"].get<double>());
  });
  ASSERT_EQ(losses.size(), 120u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  EXPECT_LT(tail, 0.5 * head);
  EXPECT_FALSE(r.aborted);
  ASSERT_TRUE(r.best_checkpoint);
  EXPECT_GT(r.best_val_micro_f1, 0.9);
  EXPECT_EQ(r.log.size(), 120u);
}

TEST(Training, NonFiniteInputAbortsWithLastGoodState) {
  // External vectors let one document carry a NaN straight into the forward pass.
  const auto docs = keyword_docs(6, 5);
  PrepConfig prep = small_prep();
  VectorStore store(3, prep.slots());
  Rng rng(1);
  for (const auto& d : docs)
    for (std::size_t n = 0; n < prep.n_chunks; ++n) store.put(d.id, n, hilat_test::random_matrix(3, prep.slots(), rng));
  Matrix bad = hilat_test::random_matrix(3, prep.slots(), rng);
  bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  store.put(docs[4].id, 1, bad);
  const auto dir = hilat_test::scratch_dir("nan_abort");
  save_external_vectors(store, (dir / "v.ckpt").string());
  ModelConfig mc;
  mc.d_e = 3;
  mc.external_vectors = (dir / "v.ckpt").string();
  HilatModel m = HilatModel::create(docs, LabelSet(std::vector<std::string>{"A", "B"}), prep, mc, 1);
  const auto data = m.prepare(docs);
  TrainConfig cfg = quick_train(40);
  cfg.batch_size = 2;
  std::vector<std::string> snapshots;
  const TrainResult r = train(m, data, cfg, nullptr, [&](const nlohmann::json& e) {
    if (!e.contains("abort")) snapshots.push_back(serialize_checkpoint(m.to_checkpoint()));
  });
  ASSERT_TRUE(r.aborted);
  EXPECT_NE(r.abort_reason.find("non-finite"), std::string::npos) << r.abort_reason;
  EXPECT_EQ(snapshots.size(), r.steps_done);
  ASSERT_GT(r.steps_done, 0u);
  EXPECT_EQ(serialize_checkpoint(r.final_checkpoint), snapshots.back());
  for (const auto& [name, t] : r.final_checkpoint.tensors) EXPECT_TRUE(t.all_finite()) << name;
  EXPECT_TRUE(r.log.back().contains("abort"));
}

TEST(GradCheck, LinearSigmoidIsExact) {
  Rng rng(3);
  Parameter w("w", hilat_test::random_matrix(5, 1, rng));
  const Matrix x = hilat_test::random_matrix(5, 1, rng);
  auto loss = [&](Tape& t) { return bce_loss(sigmoid(sum(mul(t.param(w), t.constant(x)))), {1.0}); };
  const GradCheckResult r = grad_check({&w}, loss, 1e-5, 5);
  EXPECT_EQ(r.coordinates, 5u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ToyModelPassesAndMutationFails) {
  ToyProblem toy = make_toy_problem(0);
  auto loss = [&](Tape& t) { return toy.loss(t); };
  const GradCheckResult ok = grad_check(toy.parameters(), loss, 1e-5, 240);
  EXPECT_GE(ok.coordinates, 200u);
  EXPECT_LT(ok.max_rel_error, 1e-4) << ok.worst;
  EXPECT_EQ(ok.per_tensor.size(), toy.parameters().size());

  hilat::testing::tanh_backward_fault() = true;
  const GradCheckResult bad = grad_check(toy.parameters(), loss, 1e-5, 240);
  hilat::testing::tanh_backward_fault() = false;
  EXPECT_GT(bad.max_rel_error, 1e-2);
}

TEST(GradCheck, FrozenTensorsAreSkipped) {
  ToyProblem toy = make_toy_problem(1);
  toy.encoder->set_frozen(FreezeMode::all);
  auto loss = [&](Tape& t) { return toy.loss(t); };
  const GradCheckResult r = grad_check(toy.parameters(), loss, 1e-5, 50);
  for (const auto& [name, n] : r.per_tensor) EXPECT_EQ(name.rfind("head.", 0), 0u) << name;
}

TEST(Variants, LettersMapToSettings) {
  PrepConfig p;
  ModelConfig m;
  apply_variant("abcd", p, m);
  EXPECT_TRUE(p.clean.keep_nonalpha);
  EXPECT_TRUE(p.clean.remove_stopwords);
  EXPECT_FALSE(p.reorder);
  EXPECT_EQ(p.strategy, ChunkStrategy::meaningful);
  apply_variant("efg", p, m);
  EXPECT_EQ(m.freeze, FreezeMode::all_but_last);
  EXPECT_EQ(m.init, InitScheme::label_embedding);
  EXPECT_TRUE(m.multihead);
  for (auto [letter, repr] : {std::pair{"h", DocRepr::mean_pool}, {"i", DocRepr::max_pool}, {"j", DocRepr::flat_concat}}) {
    ModelConfig mm;
    apply_variant(letter, p, mm);
    EXPECT_EQ(mm.repr, repr);
  }
  EXPECT_THROW(apply_variant("k", p, m), ConfigError);
}

TEST(Configs, JsonRoundTrip) {
  PrepConfig p;
  ModelConfig m;
  apply_variant("abdg", p, m);
  p.clean.set_deid_pattern("<[^>]+>");
  p.content_len = 17;
  const PrepConfig p2 = prep_from_json(to_json(p));
  EXPECT_EQ(to_json(p2), to_json(p));
  EXPECT_EQ(p2.clean.deid_source, "<[^>]+>");
  const ModelConfig m2 = model_config_from_json(to_json(m));
  EXPECT_EQ(to_json(m2), to_json(m));
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"d_e", "x"}}), FormatError);
}

TEST(Descriptions, ParseTsv) {
  std::istringstream in("A\tfirst thing\n\nB\tsecond\tpart\n");
  const auto d = parse_label_descriptions(in);
  EXPECT_EQ(d.at("A"), "first thing");
  EXPECT_EQ(d.at("B"), "second\tpart");
  std::istringstream bad("A first\n");
  EXPECT_THROW(parse_label_descriptions(bad), ParseError);
}

TEST(Model, LabelEmbeddingNeedsEveryDescription) {
  const auto docs = keyword_docs(6, 6);
  ModelConfig mc = small_model();
  mc.init = InitScheme::label_embedding;
  const LabelSet ls(std::vector<std::string>{"A", "B"});
  EXPECT_THROW(HilatModel::create(docs, ls, small_prep(), mc, 1), ConfigError);
  std::map<std::string, std::string> desc = {{"A", "alpha"}};
  EXPECT_THROW(HilatModel::create(docs, ls, small_prep(), mc, 1, &desc), ConfigError);
  desc["B"] = "beta note";
  HilatModel m = HilatModel::create(docs, ls, small_prep(), mc, 1, &desc);
  const Matrix U = label_embedding_matrix(*m.encoder, {m.description_chunk("alpha"), m.description_chunk("beta note")});
  EXPECT_EQ(m.head.U.value, U);
}

TEST(Model, PredictionIndependentOfWorkers) {
  const auto docs = keyword_docs(9, 7);
  HilatModel m = small_model_for(docs);
  const auto data = m.prepare(docs);
  EXPECT_EQ(predict(m, data, 1), predict(m, data, 4));
  require_same_labels(m, LabelSet(std::vector<std::string>{"A", "B"}));
  EXPECT_THROW(require_same_labels(m, LabelSet(std::vector<std::string>{"B", "A"})), ValidationError);
}
