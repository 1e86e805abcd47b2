#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "gsid/grad_check.hpp"
#include "gsid/gsidtrain.hpp"

using namespace gsid;

namespace {

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden_size = 16;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.attention_heads = 2;
  c.feed_forward_size = 32;
  c.max_text_len = 10;
  c.num_steps = 2;
  c.codebook_size = 4;
  c.seed = 21;
  return c;
}

TrainingData toy_data() {
  TrainingData d;
  d.item_ids = {"a", "b", "c"};
  d.items = {{10, 11, 12, 13}, {14, 15, 16}, {17, 18, 19, 10}};
  d.queries = {{{10, 12}, {11, 13}}, {{15}}, {{18, 19}, {17}}};
  d.query_weights = {{1, 1}, {1}, {1, 1}};
  return d;
}

double direct_contrastive(const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& d,
                          const std::vector<std::size_t>& item, bool mask) {
  double total = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    double pos = 0.0, denom = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (mask && j != i && item[j] == item[i]) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < q[i].size(); ++k) s += q[i][k] * d[j][k];
      denom += std::exp(s);
      if (j == i) pos = s;
    }
    total += -(pos - std::log(denom));
  }
  return total / static_cast<double>(q.size());
}

Tensor to_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor({rows.size(), rows[0].size()}, v);
}

}  // namespace

TEST(Contrastive, SinglePairIsZero) {
  Tape tape;
  Var q = tape.constant(Tensor({1, 2}, {0.3, -1.2}));
  Var d = tape.constant(Tensor({1, 2}, {2.0, 0.5}));
  EXPECT_EQ(contrastive_loss(q, d, std::vector<std::size_t>{0}).item(), 0.0);
}

TEST(Contrastive, ThreePairHandOracle) {
  const std::vector<std::vector<double>> q{{0.5, -0.2}, {0.1, 0.9}, {-0.7, 0.3}};
  const std::vector<std::vector<double>> d{{0.4, 0.1}, {-0.3, 0.8}, {-0.5, -0.6}};
  const std::vector<std::size_t> items{0, 1, 2};
  Tape tape;
  Var loss = contrastive_loss(tape.constant(to_tensor(q)), tape.constant(to_tensor(d)), items);
  EXPECT_NEAR(loss.item(), direct_contrastive(q, d, items, true), 1e-12);
}

TEST(Contrastive, SameItemPositivesLeaveTheDenominator) {
  // Rows 0 and 1 are two queries of the same item.
  const std::vector<std::vector<double>> q{{1.0, 0.2}, {0.8, 0.1}, {-0.4, 0.9}};
  const std::vector<std::vector<double>> d{{0.9, 0.3}, {0.9, 0.3}, {-0.2, 1.1}};
  const std::vector<std::size_t> items{7, 7, 9};
  Tape tape;
  Var qm = tape.constant(to_tensor(q)), dm = tape.constant(to_tensor(d));
  const double masked = contrastive_loss(qm, dm, items, true).item();
  const double unmasked = contrastive_loss(qm, dm, items, false).item();
  EXPECT_NEAR(masked, direct_contrastive(q, d, items, true), 1e-12);
  EXPECT_NEAR(unmasked, direct_contrastive(q, d, items, false), 1e-12);
  EXPECT_LT(masked, unmasked);
  const Tensor mask = contrastive_mask(items);
  EXPECT_EQ(mask.at(0, 1), -1e9);
  EXPECT_EQ(mask.at(1, 0), -1e9);
  EXPECT_EQ(mask.at(0, 2), 0.0);
  EXPECT_EQ(mask.at(0, 0), 0.0);
}

TEST(Alignment, IdenticalQueryAndItemGiveZeroKl) {
  TrainingData d = toy_data();
  d.queries = {{d.items[0]}, {d.items[1]}, {d.items[2]}};
  Model model(small_config(24));
  FrozenAssignments frozen;
  frozen.step = 2;
  frozen.ids = {SemanticId{{1}}, SemanticId{{0}}, SemanticId{{3}}};
  Tape tape;
  std::vector<TrainSample> pairs{{0, 0}, {1, 0}, {2, 0}};
  auto f = gsid_forward(tape, model, d, pairs, 2, frozen, 1.0);
  EXPECT_NEAR(alignment_loss(f).kl.item(), 0.0, 1e-12);
}

TEST(Commitment, OneHotUniformAndDirectSum) {
  Tape tape;
  FrozenAssignments frozen;
  frozen.step = 2;
  frozen.ids = {SemanticId{{2}}, SemanticId{{0}}};
  GsidForward f;
  f.step = 2;
  f.items = {0, 1};

  // Near one-hot on the targets (frozen code at t=1, argmax at t=2).
  f.d_logits = {tape.constant(Tensor({2, 3}, {-800, -800, 0, 0, -900, -900})),
                tape.constant(Tensor({2, 3}, {0, -700, -700, -700, -700, 0}))};
  EXPECT_NEAR(commitment_loss(f, frozen).loss.item(), 0.0, 1e-12);

  f.d_logits = {tape.constant(Tensor::matrix(2, 3, 0.4)), tape.constant(Tensor::matrix(2, 3, -1.0))};
  EXPECT_NEAR(commitment_loss(f, frozen).loss.item(), 2 * std::log(3.0), 1e-12);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> raw(2, std::vector<double>(6));
  for (auto& r : raw)
    for (double& v : r) v = n(rng);
  f.d_logits = {tape.constant(Tensor({2, 3}, raw[0])), tape.constant(Tensor({2, 3}, raw[1]))};
  auto c = commitment_loss(f, frozen);
  double expected = 0.0;
  for (std::size_t u = 0; u < 2; ++u) {
    for (std::size_t t = 0; t < 2; ++t) {
      std::vector<double> row(raw[u].begin() + 3 * t, raw[u].begin() + 3 * t + 3);
      std::size_t target = t == 0 ? static_cast<std::size_t>(frozen.ids[u].codes[0])
                                  : static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      double z = 0.0;
      for (double v : row) z += std::exp(v);
      expected += -(row[target] - std::log(z));
    }
  }
  EXPECT_NEAR(c.loss.item(), expected / 2.0, 1e-12);
  EXPECT_EQ(c.codes.size(), 2u);
}

TEST(Commitment, MissingFrozenAssignmentIsAnError) {
  FrozenAssignments frozen;
  frozen.step = 2;
  frozen.ids = {SemanticId{{1}}, SemanticId{}};
  EXPECT_THROW((void)frozen.at(1), InvalidInput);
  EXPECT_THROW((void)frozen.at(5), InvalidInput);
}

TEST(BalancedAssignment, ZeroIterationsIsArgmax) {
  std::vector<std::vector<double>> s{{0.1, 2.0, -1.0}, {3.0, 3.0, 0.0}, {-5.0, -4.0, -4.5}};
  EXPECT_EQ(balanced_assignment(s, 1.0, 0), (std::vector<int>{1, 0, 1}));
  EXPECT_TRUE(balanced_assignment({}, 1.0, 3).empty());
  EXPECT_THROW(balanced_assignment(s, 0.0, 1), InvalidInput);
}

TEST(BalancedAssignment, SplitsAShareDominantCode) {
  // both rows prefer code 0; the second is nearly indifferent so it moves
  EXPECT_EQ(balanced_assignment({{10.0, 9.0}, {10.0, 0.0}}, 1.0, 3), (std::vector<int>{1, 0}));
}

TEST(BalancedAssignment, MatchesLogDomainOracle) {
  std::vector<std::vector<double>> s{{-3.208, -5.297, -0.993}, {1.682, 4.544, 0.439}, {-2.211, -3.139, 2.995},
                                     {6.539, 1.091, -4.933},   {-3.833, 6.4, 0.812},   {-6.929, -0.335, -4.653}};
  EXPECT_EQ(balanced_assignment(s, 5.0, 3), (std::vector<int>{2, 1, 2, 0, 1, 1}));
  EXPECT_EQ(balanced_assignment(s, 0.5, 50), (std::vector<int>{2, 0, 2, 0, 1, 1}));
}

TEST(EmaUpdate, GeometricLimit) {
  std::mt19937_64 rng(4);
  Codebook cb(1, 3, 2);
  cb.randomize(rng);
  const std::vector<std::vector<double>> v{{0.5, -2.0}};
  for (int i = 0; i < 1500; ++i) ema_codebook_update(cb, v, std::vector<int>{1}, 0.99);
  EXPECT_NEAR(cb.row(1)[0], 0.5, 1e-3);
  EXPECT_NEAR(cb.row(1)[1], -2.0, 1e-3);
  EXPECT_LT(cb.row_identity_error(), 1e-12);
}

TEST(MultiQuery, ForcedRepetitionAndDistinctness) {
  std::mt19937_64 rng(5);
  EXPECT_EQ(multi_query_sample(1, 2, rng), (std::vector<std::size_t>{0, 0}));
  for (int i = 0; i < 200; ++i) {
    auto s = multi_query_sample(10, 3, rng);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 3u);
  }
  const std::vector<double> w{1, 1, 100};
  auto s = multi_query_sample(3, 2, rng, w);
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 2u);
  EXPECT_THROW(multi_query_sample(0, 2, rng), InvalidInput);
}

TEST(PrefixBatches, StepOneIsPlainSlices) {
  std::mt19937_64 rng(6);
  std::vector<ItemSamples> items;
  for (std::size_t i = 0; i < 10; ++i) items.push_back({i, {0, 1}});
  auto batches = build_prefix_batches(FrozenAssignments::empty(10), items, 1, 8, 6, rng);
  std::size_t pairs = 0;
  for (const auto& b : batches) {
    ASSERT_EQ(b.groups.size(), 1u);
    EXPECT_LE(b.size(), 6u);
    pairs += b.size();
  }
  EXPECT_EQ(pairs, 20u);
}

TEST(PrefixBatches, SmallClassesMergeIntoResidual) {
  std::mt19937_64 rng(7);
  FrozenAssignments frozen;
  frozen.step = 2;
  frozen.ids = {SemanticId{{5}}, SemanticId{{5}}, SemanticId{{7}}};
  std::vector<ItemSamples> items{{0, {0}}, {1, {0}}, {2, {0}}};
  auto batches = build_prefix_batches(frozen, items, 2, 8, 64, rng);
  ASSERT_EQ(batches.size(), 1u);
  std::map<bool, std::vector<SampleGroup>> by_kind;
  for (const auto& g : batches[0].groups) by_kind[g.residual].push_back(g);
  ASSERT_EQ(by_kind[false].size(), 1u);
  EXPECT_EQ(by_kind[false][0].prefix, (SemanticId{{5}}));
  EXPECT_EQ(by_kind[false][0].samples.size(), 2u);
  ASSERT_EQ(by_kind[true].size(), 1u);
  ASSERT_EQ(by_kind[true][0].samples.size(), 1u);
  EXPECT_EQ(by_kind[true][0].samples[0].item, 2u);
}

TEST(PrefixBatches, GroupsShareTheirPrefix) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> code(0, 3);
  FrozenAssignments frozen;
  frozen.step = 3;
  std::vector<ItemSamples> items;
  for (std::size_t i = 0; i < 300; ++i) {
    frozen.ids.push_back(SemanticId{{code(rng), code(rng)}});
    items.push_back({i, {0, 1}});
  }
  auto batches = build_prefix_batches(frozen, items, 3, 8, 64, rng);
  std::size_t seen = 0;
  for (const auto& b : batches) {
    EXPECT_LE(b.size(), 64u);
    for (const auto& g : b.groups) {
      seen += g.samples.size();
      if (g.residual) continue;
      EXPECT_GE(g.samples.size(), 4u);
      for (const auto& s : g.samples) EXPECT_EQ(frozen.ids[s.item], g.prefix);
    }
    // No same-item pair can be a negative: every duplicate is masked.
    std::vector<std::size_t> rows;
    for (const auto& s : b.flat()) rows.push_back(s.item);
    const Tensor mask = contrastive_mask(rows);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows.size(); ++j)
        if (i != j && rows[i] == rows[j]) ASSERT_EQ(mask.at(i, j), -1e9);
  }
  EXPECT_EQ(seen, 600u);
}

class GsidGradient : public ::testing::Test {
 protected:
  GsidGradient() : model(small_config(24)), data(toy_data()) {
    frozen.step = 2;
    frozen.ids = {SemanticId{{1}}, SemanticId{{2}}, SemanticId{{1}}};
  }
  Var forward_loss(Tape& t, bool align) {
    std::vector<TrainSample> pairs{{0, 0}, {0, 1}, {1, 0}, {2, 1}};
    auto f = gsid_forward(t, model, data, pairs, 2, frozen, 1.0);
    return align ? alignment_loss(f).total : commitment_loss(f, frozen).loss;
  }
  Model model;
  TrainingData data;
  FrozenAssignments frozen;
};

TEST_F(GsidGradient, AlignmentPassesFiniteDifferences) {
  auto params = model.parameters();
  auto r = grad_check([&](Tape& t) { return forward_loss(t, true); }, params,
                      {.eps = 1e-5, .tol = 1e-3, .abs_floor = 1e-6, .max_per_parameter = 6});
  EXPECT_TRUE(r.passed) << r.worst_parameter << "[" << r.worst_index << "] rel=" << r.max_relative_error;
}

TEST_F(GsidGradient, CommitmentPassesFiniteDifferences) {
  auto params = model.parameters();
  auto r = grad_check([&](Tape& t) { return forward_loss(t, false); }, params,
                      {.eps = 1e-5, .tol = 1e-3, .abs_floor = 1e-6, .max_per_parameter = 6});
  EXPECT_TRUE(r.passed) << r.worst_parameter << "[" << r.worst_index << "] rel=" << r.max_relative_error;
}

TEST_F(GsidGradient, CodebooksReceiveNoGradient) {
  Tape tape;
  Var loss = ops::add(forward_loss(tape, true), forward_loss(tape, false));
  tape.backward(loss);
  ASSERT_EQ(model.codebook_probes().size(), 2u);
  for (const auto& probe : model.codebook_probes()) {
    ASSERT_EQ(probe.grad.size(), 4u * 16u);
    for (double g : probe.grad) EXPECT_EQ(g, 0.0);
  }
  // The transformer itself does receive gradient.
  double norm = 0.0;
  for (double g : model.weights().code_start.grad) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(TrainStep, FreezeInvariantAndUsage) {
  SynthOptions so;
  so.depth = 2;
  so.branching = 3;
  so.items_per_leaf = 6;
  Corpus corpus = synth_corpus(so);
  std::vector<std::string> texts;
  for (const auto& it : corpus.items) texts.push_back(it.text);
  for (const auto& p : corpus.pairs) texts.push_back(p.query);
  Vocab vocab = Vocab::build(texts);
  ModelConfig mc = small_config(vocab.size());
  mc.encoder_layers = mc.decoder_layers = 1;
  mc.max_text_len = 16;
  Model model(mc);
  TrainingData data = make_training_data(corpus, corpus.pairs, vocab, mc.max_text_len);

  GsidTrainOptions opt;
  opt.epochs_per_step = 2;
  opt.warmup_batches = 2;
  opt.batch_size = 16;
  opt.group_size = 4;
  Optimizer o1(OptimizerOptions{.learning_rate = 1e-3, .clip_norm = 1.0});
  std::size_t logged = 0;
  auto r1 = train_step_T(model, o1, data, FrozenAssignments::empty(data.size()), opt,
                         [&](const GsidBatchLog&) { ++logged; });
  EXPECT_EQ(logged, r1.metrics.batches);
  EXPECT_EQ(r1.next.step, 2u);
  EXPECT_GT(r1.metrics.code_usage_entropy, 0.0);
  EXPECT_LT(model.codebook(1).row_identity_error(), 1e-9);
  EXPECT_EQ(model.trained_steps(), 1u);

  const auto step1 = r1.next.ids;
  const Codebook cb1 = model.codebook(1);
  Optimizer o2(OptimizerOptions{.learning_rate = 1e-3, .clip_norm = 1.0});
  auto r2 = train_step_T(model, o2, data, r1.next, opt);
  EXPECT_EQ(r2.next.step, 3u);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ASSERT_EQ(r2.next.ids[i].size(), 2u);
    EXPECT_EQ(r2.next.ids[i].codes[0], step1[i].codes[0]);
  }
  // Step-2 training never touches the step-1 codebook.
  EXPECT_EQ(model.codebook(1).embeddings().values, cb1.embeddings().values);
  EXPECT_EQ(model.codebook(1).ema_counts(), cb1.ema_counts());
  EXPECT_LT(model.codebook(2).row_identity_error(), 1e-9);
  EXPECT_EQ(model.trained_steps(), 2u);
  EXPECT_FALSE(r2.metrics.to_json().dump().empty());
}

TEST(TrainStep, DivergenceRollsBackAndThrows) {
  TrainingData data = toy_data();
  Model model(small_config(24));
  const Codebook before = model.codebook(1);
  model.weights().lm_bias.value.values[0] = 1.0;  // untouched by GSID losses
  model.weights().code_start.value.values[0] = std::numeric_limits<double>::infinity();
  const auto start = model.weights().token_embedding.value.values;
  Optimizer opt{OptimizerOptions{}};
  GsidTrainOptions o;
  o.warmup_batches = 0;
  EXPECT_THROW(train_step_T(model, opt, data, FrozenAssignments::empty(data.size()), o), DivergenceError);
  EXPECT_EQ(model.weights().token_embedding.value.values, start);
  EXPECT_EQ(model.codebook(1).embeddings().values, before.embeddings().values);
  EXPECT_EQ(model.trained_steps(), 0u);
}
