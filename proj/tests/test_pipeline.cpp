#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "gsid/pipeline.hpp"

using namespace gsid;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gsid_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

json tiny(const fs::path& out) {
  return json{{"out_dir", out.string()},
              {"synth", {{"branching", 3}, {"items_per_leaf", 4}}},
              {"model", {{"hidden_size", 16}, {"feed_forward_size", 32}, {"codebook_size", 4}}},
              {"pretrain", {{"epochs", 2}}},
              {"gsid", {{"epochs_per_step", 1}, {"warmup_batches", 2}, {"batch_size", 16}}},
              {"eval", {{"i2i_pairs", 20}}}};
}

json with(json base, const json& extra) {
  base.merge_patch(extra);
  return base;
}

}  // namespace

TEST(RunConfig, DefaultsResolve) {
  RunConfig c = resolve_config();
  EXPECT_EQ(c.model.num_steps, 2u);
  EXPECT_EQ(c.model.codebook_size, 16u);
  EXPECT_EQ(c.ks, (std::vector<std::size_t>{1, 10, 100}));
  EXPECT_EQ(c.corpus_dir, fs::path("run") / "corpus");
}

TEST(RunConfig, PaperScalePreset) {
  RunConfig c = resolve_config(paper_scale_overrides());
  EXPECT_EQ(c.model.num_steps, 4u);
  EXPECT_EQ(c.model.codebook_size, 128u);
  EXPECT_EQ(c.gsid.warmup_batches, 500u);
  EXPECT_DOUBLE_EQ(c.gsid.ema_decay, 0.99);
  EXPECT_EQ(c.gsid.loss.commit_target, CommitTarget::argmax);
}

TEST(RunConfig, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(resolve_config(json{{"nope", 1}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"gsid", {{"gama", 0.9}}}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"model", {{"hidden_size", "big"}}}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"model", {{"hidden_size", 1.5}}}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"gsid", {{"kl_gradient", "sideways"}}}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"eval", {{"levels", {3}}}}}), ConfigError);
  // integers are accepted where a float is expected
  EXPECT_DOUBLE_EQ(resolve_config(json{{"gsid", {{"temperature", 2}}}}).gsid.loss.temperature, 2.0);
}

TEST(RunConfig, Assignments) {
  EXPECT_EQ(override_from_assignment("gsid.temperature=2.5"), (json{{"gsid", {{"temperature", 2.5}}}}));
  EXPECT_EQ(override_from_assignment("data.tokenizer=character"), (json{{"data", {{"tokenizer", "character"}}}}));
  EXPECT_EQ(override_from_assignment("eval.ks=[1,5]"), (json{{"eval", {{"ks", {1, 5}}}}}));
  EXPECT_THROW(override_from_assignment("novalue"), ConfigError);
}

TEST(RunConfig, SeedsDeriveFromMaster) {
  RunConfig a = resolve_config(json{{"seed", 1}});
  RunConfig b = resolve_config(json{{"seed", 2}});
  std::set<std::uint64_t> seeds{a.synth.seed, a.model.seed, a.pretrain.seed, a.gsid.seed, a.split_seed()};
  EXPECT_EQ(seeds.size(), 5u);
  EXPECT_NE(a.synth.seed, b.synth.seed);
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(resolve_config(json{{"out_dir", "x"}}).hash(), resolve_config(json{{"out_dir", "y"}}).hash());
}

TEST(Synth, DefaultCorpusPassesIntegrityAndMatchesTree) {
  const auto out = scratch("synth");
  RunConfig c = resolve_config(json{{"out_dir", out.string()}});
  cmd_synth(c);
  auto loaded = load_pairs(c.corpus_dir);
  EXPECT_EQ(loaded.corpus.items.size(), 8u * 8u * 25u);
  EXPECT_EQ(loaded.corpus.pairs.size(), 3u * 1600u);
  EXPECT_EQ(loaded.report.malformed, 0u);
  EXPECT_EQ(loaded.report.rejected_pairs, 0u);
  const auto first = hash_file(c.corpus_dir / "items.jsonl");
  cmd_synth(c);
  EXPECT_EQ(hash_file(c.corpus_dir / "items.jsonl"), first);
  json manifest = json::parse(read_file(RunPaths{out}.manifest("synth")));
  EXPECT_EQ(manifest["config_hash"], c.hash());
  EXPECT_EQ(manifest["outputs"].size(), 2u);
}

TEST(Pretrain, ResumeMatchesUninterruptedRun) {
  const auto a = scratch("resume_a"), b = scratch("resume_b");
  RunConfig full = resolve_config(with(tiny(a), json{{"pretrain", {{"epochs", 3}}}}));
  cmd_synth(full);
  cmd_pretrain(full);

  RunConfig part = resolve_config(with(tiny(b), json{{"pretrain", {{"epochs", 1}}}}));
  cmd_synth(part);
  cmd_pretrain(part);
  const auto step_after_one = load_checkpoint(RunPaths{b}.pretrain_checkpoint()).optimizer->step;
  RunConfig rest = resolve_config(with(tiny(b), json{{"pretrain", {{"epochs", 3}}}}));
  cmd_pretrain(rest);
  Checkpoint resumed = load_checkpoint(RunPaths{b}.pretrain_checkpoint());
  EXPECT_GT(resumed.optimizer->step, step_after_one);
  EXPECT_EQ(resumed.meta["epoch"], 3);
  EXPECT_EQ(model_hash(resumed.model), model_hash(load_checkpoint(RunPaths{a}.pretrain_checkpoint()).model));
  EXPECT_EQ(read_file(RunPaths{a}.pretrain_log()), read_file(RunPaths{b}.pretrain_log()));

  // the logged step counter never goes backwards
  std::istringstream log(read_file(RunPaths{b}.pretrain_log()));
  long prev = 0;
  for (std::string line; std::getline(log, line);) {
    if (line[0] == '#') continue;
    std::istringstream f(line);
    long epoch = 0, step = 0;
    f >> epoch >> step;
    EXPECT_GT(step, prev);
    prev = step;
  }

  // a changed config must not silently resume
  RunConfig other = resolve_config(with(tiny(b), json{{"pretrain", {{"learning_rate", 0.5}}}}));
  EXPECT_THROW(cmd_pretrain(other), ConfigError);
}

TEST(Pretrain, TaskMixIsBalanced) {
  const auto out = scratch("mix");
  RunConfig c = resolve_config(with(tiny(out), json{{"synth", {{"branching", 8}, {"items_per_leaf", 10}}},
                                                            {"pretrain", {{"epochs", 3}}}}));
  cmd_synth(c);
  const auto s = cmd_pretrain(c);
  const double n = static_cast<double>(s.task_counts[0] + s.task_counts[1] + s.task_counts[2]);
  for (auto count : s.task_counts) EXPECT_NEAR(count / n, 1.0 / 3.0, 0.03);
}

TEST(Train, PersistsFrozenPrefixesAndUsage) {
  const auto out = scratch("train");
  RunConfig c = resolve_config(tiny(out));
  cmd_synth(c);
  cmd_pretrain(c);
  auto outcome = cmd_train(c);
  ASSERT_EQ(outcome.steps.size(), 2u);
  for (const auto& m : outcome.steps) EXPECT_GT(m.code_usage_entropy, 0.0);
  const auto s1 = read_assignments(RunPaths{out}.assignments(1));
  const auto s2 = read_assignments(RunPaths{out}.assignments(2));
  ASSERT_EQ(s1.size(), s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_EQ(s1[i].first, s2[i].first);
    ASSERT_EQ(s1[i].second.size(), 1u);
    ASSERT_EQ(s2[i].second.size(), 2u);
    EXPECT_EQ(s1[i].second.codes[0], s2[i].second.codes[0]);
  }
  std::istringstream lines(read_file(RunPaths{out}.train_metrics()));
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line);) n += json::parse(line).contains("code_usage_entropy");
  EXPECT_EQ(n, 2u);

  // a pretrain checkpoint from a different vocabulary is refused
  RunConfig other = resolve_config(with(tiny(out), json{{"data", {{"vocab_min_frequency", 2}}}}));
  EXPECT_THROW(cmd_train(other), ConfigError);
}

TEST(Retrieve, SingleItemCorpusInBothModes) {
  const auto out = scratch("single");
  const auto corpus = out / "data";
  Corpus one;
  one.items.push_back({"only", "red wool scarf", std::string("apparel"), {}});
  for (const char* q : {"red scarf", "wool scarf", "scarf"}) one.pairs.push_back({q, "only", 1.0, "click"});
  write_corpus(one, corpus);
  RunConfig c = resolve_config(with(tiny(out), json{{"data", {{"dir", corpus.string()}}},
                                                            {"model", {{"codebook_size", 2}}},
                                                            {"eval", {{"baseline", false}}}}));
  cmd_pretrain(c);
  cmd_train(c);
  cmd_index(c);
  for (auto mode : {RetrieveMode::generative, RetrieveMode::dense}) {
    auto lists = cmd_retrieve(c, RetrieveRequest{mode, {"red scarf", "unseen words"}, 10, 2});
    ASSERT_EQ(lists.size(), 2u);
    for (const auto& l : lists) {
      ASSERT_EQ(l.items.size(), 1u);
      EXPECT_EQ(l.items[0].id, "only");
    }
  }
}

TEST(Eval, ReportSchemaRangesAndDeterminism) {
  json reports[2];
  std::string assignments[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = scratch("eval" + std::to_string(run));
    RunConfig c = resolve_config(tiny(out));
    cmd_synth(c);
    cmd_pretrain(c);
    cmd_train(c);
    cmd_index(c);
    reports[run] = cmd_eval(c);
    assignments[run] = read_file(RunPaths{out}.assignments(2));
    EXPECT_EQ(json::parse(read_file(RunPaths{out}.eval_metrics())), reports[run]);
  }
  EXPECT_EQ(reports[0].dump(), reports[1].dump());
  EXPECT_EQ(assignments[0], assignments[1]);

  const json& r = reports[0];
  for (std::size_t k : {1, 10, 100}) {
    for (const char* name : {"dense_recall", "generative_recall", "random_recall"}) {
      ASSERT_TRUE(find_metric(r, name, k)) << name << "@" << k;
    }
  }
  for (const char* name : {"dense_mrr", "generative_mrr"}) ASSERT_TRUE(find_metric(r, name, 100u)) << name;
  for (std::size_t level : {1, 2}) {
    ASSERT_TRUE(find_metric(r, "q2i_code_acc", std::nullopt, level));
    ASSERT_TRUE(find_metric(r, "i2i_code_acc", std::nullopt, level));
  }
  for (const char* name : {"ami_path", "kmeans_ami_path"}) ASSERT_TRUE(find_metric(r, name, std::nullopt, 1u)) << name;
  for (const auto& m : r["metrics"]) {
    const double v = m["value"];
    const std::string name = m["name"];
    if (name.find("ami") != std::string::npos) {
      EXPECT_LE(v, 1.0 + 1e-12) << name;
      EXPECT_GE(v, -1.0) << name;
    } else {
      EXPECT_GE(v, 0.0) << name;
      EXPECT_LE(v, 1.0) << name;
    }
    EXPECT_GT(m["count"].get<std::size_t>(), 0u) << name;
  }
  EXPECT_LE(*find_metric(r, "q2i_code_acc", std::nullopt, 2u), *find_metric(r, "q2i_code_acc", std::nullopt, 1u));
}
