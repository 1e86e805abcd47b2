#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "gsid/grad_check.hpp"
#include "gsid/pretrain.hpp"

using namespace gsid;

namespace {

// Pearson chi-square against a uniform expectation.
double chi_square(const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  const double e = total / static_cast<double>(counts.size());
  double x = 0.0;
  for (double c : counts) x += (c - e) * (c - e) / e;
  return x;
}

// Upper 0.999 quantiles of chi-square for small degrees of freedom.
double chi_square_crit(std::size_t dof) {
  static const double q[] = {0, 10.83, 13.82, 16.27, 18.47, 20.52, 22.46, 24.32, 26.12, 27.88, 29.59};
  return q[dof];
}

const std::vector<int> kItem{20, 21, 22, 23, 24, 25, 26, 27};

bool is_sentinel(int t) { return t >= Vocab::first_sentinel && t < Vocab::first_sentinel + Vocab::num_sentinels; }

ModelConfig tiny_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden_size = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.attention_heads = 2;
  c.feed_forward_size = 16;
  c.max_text_len = 12;
  c.num_steps = 2;
  c.codebook_size = 3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(QueryGeneration, SingleQueryIsForced) {
  std::mt19937_64 rng(1);
  auto ex = build_query_generation(kItem, {{40, 41}}, rng);
  ASSERT_TRUE(ex);
  EXPECT_EQ(ex->target, (std::vector<int>{40, 41}));
  EXPECT_EQ(ex->input.front(), Vocab::task_query_generation);
  EXPECT_TRUE(std::equal(kItem.begin(), kItem.end(), ex->input.begin() + 1));
}

TEST(QueryGeneration, UniformOverQueries) {
  std::mt19937_64 rng(2);
  const std::vector<std::vector<int>> qs{{40}, {41}, {42}, {43}, {44}};
  std::vector<double> counts(5, 0.0);
  for (int i = 0; i < 10000; ++i) counts[build_query_generation(kItem, qs, rng)->target[0] - 40] += 1.0;
  const double sigma = std::sqrt(10000 * 0.2 * 0.8);
  for (double c : counts) EXPECT_LT(std::abs(c - 2000.0), 3 * sigma);
  EXPECT_LT(chi_square(counts), chi_square_crit(4));
}

TEST(QueryGeneration, NoQueriesSkipped) {
  std::mt19937_64 rng(3);
  EXPECT_FALSE(build_query_generation(kItem, {}, rng));
  EXPECT_FALSE(build_query_generation(kItem, {{}}, rng));
}

TEST(ItemCloze, SpanCountsLengthsAndNoOverlap) {
  std::mt19937_64 rng(4);
  std::map<std::size_t, int> span_counts;
  for (int i = 0; i < 10000; ++i) {
    auto ex = build_item_cloze(kItem, rng);
    const auto& spans = ex.masked_spans;
    ASSERT_GE(spans.size(), 1u);
    ASSERT_LE(spans.size(), 3u);
    ++span_counts[spans.size()];
    std::vector<bool> covered(kItem.size(), false);
    for (auto [start, len] : spans) {
      ASSERT_GE(len, 1u);
      ASSERT_LE(len, 3u);
      for (std::size_t p = start; p < start + len; ++p) {
        ASSERT_LT(p, kItem.size());
        ASSERT_FALSE(covered[p]) << "overlapping spans";
        covered[p] = true;
      }
    }
    // Sentinels are distinct and appear in order.
    int next = Vocab::first_sentinel;
    for (int t : ex.input)
      if (is_sentinel(t)) ASSERT_EQ(t, next++);
    ASSERT_EQ(static_cast<std::size_t>(next - Vocab::first_sentinel), spans.size());
    ASSERT_EQ(ex.target, kItem);
  }
  EXPECT_EQ(span_counts.size(), 3u);
}

TEST(ItemCloze, ZeroSpansIsIdentity) {
  std::mt19937_64 rng(5);
  ClozeOptions o;
  o.force_spans = 0;
  auto ex = build_item_cloze(kItem, rng, o);
  EXPECT_EQ(std::vector<int>(ex.input.begin() + 1, ex.input.end()), kItem);
}

TEST(ItemCloze, ShortTextFallsBackToOneToken) {
  std::mt19937_64 rng(6);
  const std::vector<int> shorty{30, 31, 32};
  for (int i = 0; i < 100; ++i) {
    auto ex = build_item_cloze(shorty, rng);
    ASSERT_EQ(ex.masked_spans.size(), 1u);
    EXPECT_EQ(ex.masked_spans[0].second, 1u);
  }
}

TEST(ItemCloze, DemaskingReproducesOriginal) {
  std::mt19937_64 rng(7);
  for (auto mode : {ClozeTarget::full_text, ClozeTarget::spans}) {
    ClozeOptions o;
    o.target = mode;
    for (int i = 0; i < 2000; ++i) {
      auto ex = build_item_cloze(kItem, rng, o);
      ASSERT_EQ(unmask_cloze(ex, mode), kItem);
    }
  }
}

TEST(ItemCloze, SpansTargetPairsSentinels) {
  std::mt19937_64 rng(8);
  ClozeOptions o;
  o.target = ClozeTarget::spans;
  auto ex = build_item_cloze(kItem, rng, o);
  std::vector<int> in_sent, out_sent;
  for (int t : ex.input)
    if (is_sentinel(t)) in_sent.push_back(t);
  for (int t : ex.target)
    if (is_sentinel(t)) out_sent.push_back(t);
  EXPECT_EQ(in_sent, out_sent);
}

TEST(SuffixCompletion, PartitionAndUniformSplit) {
  std::mt19937_64 rng(9);
  const std::vector<int> q{50, 51};
  std::vector<double> counts(kItem.size() - 1, 0.0);
  for (int i = 0; i < 10000; ++i) {
    auto ex = build_suffix_completion(kItem, q, rng);
    ASSERT_TRUE(ex);
    const std::size_t s = ex->split_point;
    ASSERT_GE(s, 1u);
    ASSERT_LE(s, kItem.size() - 1);
    counts[s - 1] += 1.0;
    std::vector<int> prefix(ex->input.begin() + 1 + static_cast<std::ptrdiff_t>(q.size()), ex->input.end());
    prefix.insert(prefix.end(), ex->target.begin(), ex->target.end());
    ASSERT_EQ(prefix, kItem);
    ASSERT_EQ(ex->input[0], Vocab::task_suffix_completion);
  }
  EXPECT_LT(chi_square(counts), chi_square_crit(counts.size() - 1));
}

TEST(SuffixCompletion, ForcedAndSkipped) {
  std::mt19937_64 rng(10);
  auto ex = build_suffix_completion(std::vector<int>{30, 31}, std::vector<int>{50}, rng);
  ASSERT_TRUE(ex);
  EXPECT_EQ(ex->split_point, 1u);
  EXPECT_EQ(ex->target, (std::vector<int>{31}));
  EXPECT_FALSE(build_suffix_completion(std::vector<int>{30}, std::vector<int>{50}, rng));
}

TEST(TaskSampling, UniformOverThreeTasks) {
  std::mt19937_64 rng(11);
  std::vector<double> counts(3, 0.0);
  for (int i = 0; i < 30000; ++i) counts[static_cast<std::size_t>(sample_task(rng))] += 1.0;
  const double sigma = std::sqrt(30000.0 * (1.0 / 3) * (2.0 / 3));
  for (double c : counts) EXPECT_LT(std::abs(c - 10000.0), 3 * sigma);
  EXPECT_LT(chi_square(counts), chi_square_crit(2));
}

TEST(PretrainLoss, GradientMatchesFiniteDifferences) {
  Model model(tiny_config(30));
  std::mt19937_64 rng(12);
  std::vector<PretrainExample> batch;
  PretrainSource src{{12, 13, 14, 15, 16}, {{20, 21}, {22}}};
  for (auto task : kPretrainTasks) batch.push_back(*make_example(src, task, rng));
  auto params = model.parameters();
  auto report = grad_check([&](Tape& t) { return pretrain_loss(t, model, batch); }, params,
                           {.eps = 1e-5, .tol = 1e-3, .abs_floor = 1e-6, .max_per_parameter = 8});
  EXPECT_TRUE(report.passed) << report.worst_parameter << "[" << report.worst_index
                             << "] rel=" << report.max_relative_error;
}

TEST(PretrainStep, MemorizedBatchLossGoesToZero) {
  Model model(tiny_config(30));
  OptimizerOptions oo;
  oo.learning_rate = 1e-2;
  Optimizer opt(oo);
  std::mt19937_64 rng(13);
  PretrainSource src{{12, 13, 14, 15, 16}, {{20, 21}}};
  std::vector<PretrainExample> batch(4, *make_example(src, PretrainTask::query_generation, rng));
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 300; ++i) {
    auto r = pretrain_step(model, opt, batch);
    if (i == 0) first = r.loss;
    last = r.loss;
  }
  EXPECT_GT(first, 1.0);
  EXPECT_LT(last, 0.02);
}

TEST(PretrainStep, NonFiniteLossSkipsUpdate) {
  Model model(tiny_config(30));
  Optimizer opt{OptimizerOptions{}};
  model.weights().lm_bias.value.values[3] = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(14);
  PretrainSource src{{12, 13, 14}, {{20}}};
  std::vector<PretrainExample> batch{*make_example(src, PretrainTask::query_generation, rng)};
  const auto before = model.weights().token_embedding.value.values;
  auto r = pretrain_step(model, opt, batch);
  EXPECT_FALSE(std::isfinite(r.loss));
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(model.weights().token_embedding.value.values, before);
}

// Smoke property: 200 synthetic items, desk-scale default model, loss of the
// last epoch at most half the initial loss within 30 epochs.
TEST(Pretrainer, SmokeLossHalvesOn200Items) {
  SynthOptions so;
  so.depth = 2;
  so.branching = 5;
  so.items_per_leaf = 8;
  Corpus corpus = synth_corpus(so);
  ASSERT_EQ(corpus.items.size(), 200u);
  std::vector<std::string> texts;
  for (const auto& it : corpus.items) texts.push_back(it.text);
  for (const auto& p : corpus.pairs) texts.push_back(p.query);
  Vocab vocab = Vocab::build(texts);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  Model model(mc);
  std::vector<PretrainSource> sources(corpus.items.size());
  const auto by_item = corpus.pairs_by_item();
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    sources[i].item = vocab.encode(corpus.items[i].text, mc.max_text_len - 1);
    for (std::size_t p : by_item[i]) sources[i].queries.push_back(vocab.encode(corpus.pairs[p].query, 8));
  }
  PretrainOptions po;
  po.epochs = 30;
  Optimizer opt(OptimizerOptions{.learning_rate = po.learning_rate, .clip_norm = po.clip_norm});
  auto summary = Pretrainer(po).run(model, opt, sources);
  ASSERT_EQ(summary.epoch_losses.size(), 30u);
  const double ratio = summary.epoch_losses.back() / summary.initial_loss;
  RecordProperty("loss_ratio", std::to_string(ratio));
  EXPECT_LE(ratio, 0.5) << "initial " << summary.initial_loss << " final " << summary.epoch_losses.back();
  const double n = static_cast<double>(summary.task_counts[0] + summary.task_counts[1] + summary.task_counts[2]);
  for (auto c : summary.task_counts) EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / 3.0, 0.03);
}
