#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "gsid/checkpoint.hpp"
#include "gsid/data.hpp"
#include "gsid/errors.hpp"
#include "gsid/eval.hpp"
#include "gsid/gsidtrain.hpp"
#include "gsid/hash.hpp"
#include "gsid/index.hpp"
#include "gsid/pretrain.hpp"

namespace gsid {

// ---------------------------------------------------------------------------
// Run configuration

// Desk-scale defaults: a 1600-item synthetic corpus with M=2, K=16.
// These are the settings the end-to-end checks run with.
inline json default_config() {
  return json{
      {"seed", 7},
      {"out_dir", "run"},
      {"data",
       {{"dir", ""},  // empty: the synthetic corpus under out_dir/corpus
        {"max_len", 16},
        {"tokenizer", "word"},
        {"vocab_max_size", 0},
        {"vocab_min_frequency", 1},
        {"heldout_fraction", 1.0}}},
      {"synth",
       {{"depth", 2},
        {"branching", 8},
        {"vocab_per_node", 24},
        {"tokens_per_node", 4},
        {"shared_vocab", 16},
        {"shared_tokens", 1},
        {"items_per_leaf", 25},
        {"min_queries", 3},
        {"max_queries", 3},
        {"min_query_len", 2},
        {"max_query_len", 5},
        {"query_noise", 0.1}}},
      {"model",
       {{"hidden_size", 128},
        {"encoder_layers", 1},
        {"decoder_layers", 1},
        {"attention_heads", 2},
        {"feed_forward_size", 256},
        {"num_steps", 2},
        {"codebook_size", 16},
        {"dropout", 0.0}}},
      {"pretrain",
       {{"epochs", 20},
        {"batch_size", 16},
        {"learning_rate", 1e-3},
        {"clip_norm", 1.0},
        {"cloze_target", "full_text"},
        {"min_spans", 1},
        {"max_spans", 3},
        {"min_span_len", 1},
        {"max_span_len", 3}}},
      {"gsid",
       {{"epochs_per_step", 10},
        {"warmup_batches", 50},
        {"group_size", 8},
        {"batch_size", 64},
        {"queries_per_item", 2},
        {"weighted_queries", false},
        {"ema_decay", 0.99},
        {"dead_code_threshold", 0.05},
        {"donor_pool", 512},
        {"learning_rate", 1e-3},
        {"clip_norm", 1.0},
        {"temperature", 30.0},
        {"contrastive_temperature", 1.0},
        {"symmetric_contrastive", false},
        {"mask_same_item", true},
        {"kl_gradient", "both"},
        {"align_weight", 1.0},
        {"commit_weight", 1.0},
        {"commit_target", "balanced"},
        {"sinkhorn_epsilon", 5.0},
        {"sinkhorn_iterations", 3}}},
      {"eval",
       {{"ks", {1, 10, 100}},
        {"mrr_k", 100},
        {"levels", {1, 2}},
        {"beam_width", 8},
        {"cutoff", 100},
        {"i2i_pairs", 1000},
        {"baseline", true}}},
  };
}

// Overrides that restore the published model scale: 4 steps, codebook size
// 128, 500 warm-up batches. Far too slow for a laptop.
inline json paper_scale_overrides() {
  return json{{"model", {{"num_steps", 4}, {"codebook_size", 128}, {"hidden_size", 768}, {"encoder_layers", 12},
                         {"decoder_layers", 12}, {"attention_heads", 12}, {"feed_forward_size", 3072}}},
              {"gsid", {{"warmup_batches", 500}, {"temperature", 1.0}, {"commit_target", "argmax"}}}};
}

namespace detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

inline void merge_into(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError("config: " + (path.empty() ? "document" : path) + " must be an object");
  for (const auto& [key, value] : over.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key " + where);
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, where);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config: wrong type for " + where);
      slot = value;
    }
  }
}

}  // namespace detail

// Layers `overrides` onto the defaults; any key not in the defaults, or of
// a different JSON type, is rejected.
inline json merge_config(json base, const json& overrides) {
  detail::merge_into(base, overrides, "");
  return base;
}

// "a.b.c=value" with value parsed as JSON, falling back to a plain string.
inline json override_from_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  json value;
  const std::string raw = assignment.substr(eq + 1);
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  std::vector<std::string> keys;
  std::string key;
  for (char c : assignment.substr(0, eq)) {
    if (c == '.') {
      keys.push_back(key);
      key.clear();
    } else {
      key += c;
    }
  }
  keys.push_back(key);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) value = json{{*it, value}};
  return value;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  Fnv1a h;
  h.update(tag);
  h.update(std::to_string(seed));
  return h.value();
}

struct RunConfig {
  json doc;  // resolved document
  std::filesystem::path out_dir;
  std::uint64_t seed = 7;

  std::filesystem::path corpus_dir;
  std::size_t max_len = 16;
  TokenizerMode tokenizer = TokenizerMode::word;
  std::size_t vocab_max_size = 0;
  std::size_t vocab_min_frequency = 1;
  double heldout_fraction = 1.0;

  SynthOptions synth;
  ModelConfig model;  // vocab_size is filled in once the vocabulary exists
  PretrainOptions pretrain;
  GsidTrainOptions gsid;
  double gsid_learning_rate = 1e-3;
  double gsid_clip_norm = 1.0;

  std::vector<std::size_t> ks;
  std::size_t mrr_k = 100;
  std::vector<std::size_t> levels;
  std::size_t beam_width = 8;
  std::size_t cutoff = 100;
  std::size_t i2i_pairs = 1000;
  bool baseline = true;

  // Hash of everything except out_dir, so relocated runs compare equal.
  [[nodiscard]] std::string hash() const {
    json j = doc;
    j.erase("out_dir");
    return hash_string(j.dump());
  }

  [[nodiscard]] std::uint64_t split_seed() const { return derive_seed(seed, "split"); }
  [[nodiscard]] std::uint64_t i2i_seed() const { return derive_seed(seed, "i2i"); }
  [[nodiscard]] std::uint64_t kmeans_seed() const { return derive_seed(seed, "kmeans"); }
};

inline RunConfig resolve_config(const json& overrides = json::object()) {
  RunConfig c;
  c.doc = merge_config(default_config(), overrides);
  const json& d = c.doc;
  try {
    c.seed = d.at("seed").get<std::uint64_t>();
    c.out_dir = d.at("out_dir").get<std::string>();
    if (c.out_dir.empty()) throw ConfigError("config: out_dir must not be empty");

    const json& data = d.at("data");
    const auto dir = data.at("dir").get<std::string>();
    c.corpus_dir = dir.empty() ? c.out_dir / "corpus" : std::filesystem::path(dir);
    c.max_len = data.at("max_len").get<std::size_t>();
    try {
      c.tokenizer = tokenizer_mode_from_string(data.at("tokenizer").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: data.tokenizer: ") + e.what());
    }
    c.vocab_max_size = data.at("vocab_max_size").get<std::size_t>();
    c.vocab_min_frequency = data.at("vocab_min_frequency").get<std::size_t>();
    c.heldout_fraction = data.at("heldout_fraction").get<double>();
    if (c.heldout_fraction < 0.0 || c.heldout_fraction > 1.0) throw ConfigError("config: data.heldout_fraction outside [0,1]");

    const json& s = d.at("synth");
    c.synth.depth = s.at("depth");
    c.synth.branching = s.at("branching");
    c.synth.vocab_per_node = s.at("vocab_per_node");
    c.synth.tokens_per_node = s.at("tokens_per_node");
    c.synth.shared_vocab = s.at("shared_vocab");
    c.synth.shared_tokens = s.at("shared_tokens");
    c.synth.items_per_leaf = s.at("items_per_leaf");
    c.synth.min_queries = s.at("min_queries");
    c.synth.max_queries = s.at("max_queries");
    c.synth.min_query_len = s.at("min_query_len");
    c.synth.max_query_len = s.at("max_query_len");
    c.synth.query_noise = s.at("query_noise");
    c.synth.seed = derive_seed(c.seed, "synth");

    const json& m = d.at("model");
    c.model.vocab_size = 1;
    c.model.hidden_size = m.at("hidden_size");
    c.model.encoder_layers = m.at("encoder_layers");
    c.model.decoder_layers = m.at("decoder_layers");
    c.model.attention_heads = m.at("attention_heads");
    c.model.feed_forward_size = m.at("feed_forward_size");
    c.model.max_text_len = c.max_len;
    c.model.num_steps = m.at("num_steps");
    c.model.codebook_size = m.at("codebook_size");
    c.model.dropout = m.at("dropout");
    c.model.seed = derive_seed(c.seed, "model");
    c.model.validate();

    const json& p = d.at("pretrain");
    c.pretrain.epochs = p.at("epochs");
    c.pretrain.batch_size = p.at("batch_size");
    c.pretrain.learning_rate = p.at("learning_rate");
    c.pretrain.clip_norm = p.at("clip_norm");
    const auto cloze = p.at("cloze_target").get<std::string>();
    if (cloze == "full_text") {
      c.pretrain.cloze.target = ClozeTarget::full_text;
    } else if (cloze == "spans") {
      c.pretrain.cloze.target = ClozeTarget::spans;
    } else {
      throw ConfigError("config: pretrain.cloze_target must be full_text or spans");
    }
    c.pretrain.cloze.min_spans = p.at("min_spans");
    c.pretrain.cloze.max_spans = p.at("max_spans");
    c.pretrain.cloze.min_span_len = p.at("min_span_len");
    c.pretrain.cloze.max_span_len = p.at("max_span_len");
    c.pretrain.seed = derive_seed(c.seed, "pretrain");
    if (c.pretrain.batch_size < 1) throw ConfigError("config: pretrain.batch_size must be >= 1");

    const json& g = d.at("gsid");
    c.gsid.epochs_per_step = g.at("epochs_per_step");
    c.gsid.warmup_batches = g.at("warmup_batches");
    c.gsid.group_size = g.at("group_size");
    c.gsid.batch_size = g.at("batch_size");
    c.gsid.queries_per_item = g.at("queries_per_item");
    c.gsid.weighted_queries = g.at("weighted_queries");
    c.gsid.ema_decay = g.at("ema_decay");
    c.gsid.dead_code_threshold = g.at("dead_code_threshold");
    c.gsid.donor_pool = g.at("donor_pool");
    c.gsid_learning_rate = g.at("learning_rate");
    c.gsid_clip_norm = g.at("clip_norm");
    auto& lo = c.gsid.loss;
    lo.temperature = g.at("temperature");
    lo.contrastive_temperature = g.at("contrastive_temperature");
    lo.symmetric_contrastive = g.at("symmetric_contrastive");
    lo.mask_same_item = g.at("mask_same_item");
    const auto kl = g.at("kl_gradient").get<std::string>();
    if (kl == "both") {
      lo.kl_gradient = KlGradient::both;
    } else if (kl == "stop_item") {
      lo.kl_gradient = KlGradient::stop_item;
    } else {
      throw ConfigError("config: gsid.kl_gradient must be both or stop_item");
    }
    lo.align_weight = g.at("align_weight");
    lo.commit_weight = g.at("commit_weight");
    const auto target = g.at("commit_target").get<std::string>();
    if (target == "argmax") {
      lo.commit_target = CommitTarget::argmax;
    } else if (target == "balanced") {
      lo.commit_target = CommitTarget::balanced;
    } else {
      throw ConfigError("config: gsid.commit_target must be argmax or balanced");
    }
    lo.sinkhorn_epsilon = g.at("sinkhorn_epsilon");
    lo.sinkhorn_iterations = g.at("sinkhorn_iterations");
    c.gsid.seed = derive_seed(c.seed, "gsid");
    if (!(lo.temperature > 0.0) || !(lo.contrastive_temperature > 0.0)) {
      throw ConfigError("config: temperatures must be positive");
    }
    if (!(lo.sinkhorn_epsilon > 0.0)) throw ConfigError("config: gsid.sinkhorn_epsilon must be positive");

    const json& e = d.at("eval");
    c.ks = e.at("ks").get<std::vector<std::size_t>>();
    c.mrr_k = e.at("mrr_k");
    c.levels = e.at("levels").get<std::vector<std::size_t>>();
    c.beam_width = e.at("beam_width");
    c.cutoff = e.at("cutoff");
    c.i2i_pairs = e.at("i2i_pairs");
    c.baseline = e.at("baseline");
    if (c.beam_width < 1) throw ConfigError("config: eval.beam_width must be >= 1");
    for (std::size_t l : c.levels) {
      if (l < 1 || l > c.model.num_steps) throw ConfigError("config: eval.levels must lie in [1, num_steps]");
    }
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Artifacts

struct RunPaths {
  std::filesystem::path root;

  [[nodiscard]] std::filesystem::path pretrain_checkpoint() const { return root / "pretrain.ckpt"; }
  [[nodiscard]] std::filesystem::path pretrain_log() const { return root / "pretrain_loss.log"; }
  [[nodiscard]] std::filesystem::path model() const { return root / "model.ckpt"; }
  [[nodiscard]] std::filesystem::path assignments(std::size_t step) const {
    return root / "assignments" / ("step" + std::to_string(step) + ".tsv");
  }
  [[nodiscard]] std::filesystem::path train_metrics() const { return root / "metrics.jsonl"; }
  [[nodiscard]] std::filesystem::path index() const { return root / "index.tsv"; }
  [[nodiscard]] std::filesystem::path retrieved() const { return root / "retrieved.jsonl"; }
  [[nodiscard]] std::filesystem::path eval_metrics() const { return root / "metrics.json"; }
  [[nodiscard]] std::filesystem::path manifest(const std::string& command) const {
    return root / (command + ".manifest.json");
  }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

inline std::filesystem::path require(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing " + what + ": " + path.string());
  return path;
}

}  // namespace detail

// Resolved config plus content hashes of what a command read and wrote.
inline void write_manifest(const RunConfig& cfg, const std::string& command,
                           const std::vector<std::filesystem::path>& inputs,
                           const std::vector<std::filesystem::path>& outputs) {
  auto hashes = [](const std::vector<std::filesystem::path>& paths) {
    json j = json::object();
    for (const auto& p : paths) j[p.generic_string()] = hash_file(p);
    return j;
  };
  json m{{"command", command},
         {"config", cfg.doc},
         {"config_hash", cfg.hash()},
         {"inputs", hashes(inputs)},
         {"outputs", hashes(outputs)}};
  detail::write_text(RunPaths{cfg.out_dir}.manifest(command), m.dump(2) + "\n");
}

// Corpus, split, vocabulary and tokenized training data, rebuilt the same
// way by every command.
struct PreparedData {
  Corpus corpus;
  PairSplit split;
  Vocab vocab;
  TrainingData train;
  std::vector<std::filesystem::path> inputs;
};

inline PreparedData prepare_data(const RunConfig& cfg) {
  detail::require(cfg.corpus_dir / "items.jsonl", "corpus (run synth first)");
  detail::require(cfg.corpus_dir / "pairs.jsonl", "corpus (run synth first)");
  PreparedData p;
  auto loaded = load_pairs(cfg.corpus_dir);
  for (const auto& w : loaded.report.warnings) spdlog::warn("{}", w);
  p.corpus = std::move(loaded.corpus);
  if (p.corpus.items.empty()) throw ConfigError("corpus has no items: " + cfg.corpus_dir.string());
  p.split = split_heldout(p.corpus, cfg.heldout_fraction, cfg.split_seed());
  std::vector<std::string> texts;
  for (const auto& it : p.corpus.items) texts.push_back(it.text);
  for (const auto& q : p.split.train) texts.push_back(q.query);
  p.vocab = Vocab::build(texts, cfg.vocab_max_size, cfg.vocab_min_frequency, cfg.tokenizer);
  p.train = make_training_data(p.corpus, p.split.train, p.vocab, cfg.max_len);
  p.inputs = {cfg.corpus_dir / "items.jsonl", cfg.corpus_dir / "pairs.jsonl"};
  return p;
}

inline Checkpoint load_matching_checkpoint(const std::filesystem::path& path, const Vocab& vocab) {
  Checkpoint c = load_checkpoint(detail::require(path, "checkpoint"));
  if (c.vocab.hash() != vocab.hash()) {
    throw ConfigError("checkpoint " + path.string() + " was trained on a different vocabulary (" + c.vocab.hash() +
                      " vs " + vocab.hash() + ")");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Commands

inline Corpus cmd_synth(const RunConfig& cfg) {
  SynthOptions o = cfg.synth;
  Corpus corpus;
  try {
    corpus = synth_corpus(o);
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  write_corpus(corpus, cfg.corpus_dir);
  write_manifest(cfg, "synth", {}, {cfg.corpus_dir / "items.jsonl", cfg.corpus_dir / "pairs.jsonl"});
  spdlog::info("synth: {} items, {} pairs -> {}", corpus.items.size(), corpus.pairs.size(), cfg.corpus_dir.string());
  return corpus;
}

// Pre-training config fingerprint a checkpoint must match to be resumed.
inline std::string pretrain_fingerprint(const RunConfig& cfg, const Vocab& vocab) {
  json j = cfg.doc;
  j.erase("out_dir");
  j["pretrain"].erase("epochs");
  j.erase("gsid");
  j.erase("eval");
  j["vocab_hash"] = vocab.hash();
  return hash_string(j.dump());
}

// One checkpoint per finished epoch; an existing checkpoint with the same
// fingerprint is resumed from its recorded epoch.
inline PretrainSummary cmd_pretrain(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  PreparedData data = prepare_data(cfg);
  const std::string fingerprint = pretrain_fingerprint(cfg, data.vocab);
  ModelConfig mc = cfg.model;
  mc.vocab_size = data.vocab.size();

  Checkpoint ck{Model(mc), data.vocab, std::nullopt, json::object()};
  Optimizer optimizer(OptimizerOptions{.learning_rate = cfg.pretrain.learning_rate, .clip_norm = cfg.pretrain.clip_norm});
  std::size_t start = 0;
  std::vector<std::string> log_lines;
  if (std::filesystem::exists(paths.pretrain_checkpoint())) {
    Checkpoint prev = load_matching_checkpoint(paths.pretrain_checkpoint(), data.vocab);
    if (prev.meta.value("fingerprint", "") != fingerprint) {
      throw ConfigError("existing " + paths.pretrain_checkpoint().string() + " was made with a different config");
    }
    start = prev.meta.at("epoch").get<std::size_t>();
    ck = std::move(prev);
    if (ck.optimizer) optimizer = Optimizer(*ck.optimizer);
    if (std::filesystem::exists(paths.pretrain_log())) {
      std::istringstream in(read_file(paths.pretrain_log()));
      for (std::string line; std::getline(in, line);) {
        if (line.empty() || line[0] == '#') continue;
        if (std::stoul(line.substr(0, line.find(' '))) < start) log_lines.push_back(line);
      }
    }
    spdlog::info("pretrain: resuming after epoch {} (step {})", start, optimizer.state().step);
  }

  std::vector<PretrainSource> sources;
  for (std::size_t i = 0; i < data.train.size(); ++i) sources.push_back({data.train.items[i], data.train.queries[i]});
  PretrainSummary total;
  bool first = true;
  auto flush_log = [&] {
    std::string text = "# epoch step loss query_generation item_cloze suffix_completion\n";
    for (const auto& l : log_lines) text += l + "\n";
    detail::write_text(paths.pretrain_log(), text);
  };
  for (std::size_t epoch = start; epoch < cfg.pretrain.epochs; ++epoch) {
    PretrainOptions po = cfg.pretrain;
    po.epochs = epoch + 1;
    auto s = Pretrainer(po).run(ck.model, optimizer, sources, epoch, [&](const PretrainProgress& p) {
      std::ostringstream line;
      line << p.epoch << ' ' << p.step << ' ' << std::setprecision(17) << p.loss << ' ' << p.task_counts[0] << ' '
           << p.task_counts[1] << ' ' << p.task_counts[2];
      log_lines.push_back(line.str());
    });
    if (first) total.initial_loss = s.initial_loss;
    first = false;
    total.epoch_losses.push_back(s.epoch_losses.back());
    for (std::size_t t = 0; t < 3; ++t) total.task_counts[t] += s.task_counts[t];
    total.skipped_examples += s.skipped_examples;
    total.skipped_steps += s.skipped_steps;
    ck.optimizer = optimizer.state();
    ck.meta = json{{"stage", "pretrain"}, {"epoch", epoch + 1}, {"fingerprint", fingerprint}};
    save_checkpoint(paths.pretrain_checkpoint(), ck);
    flush_log();
    spdlog::info("pretrain: epoch {} loss {:.4f}", epoch + 1, s.epoch_losses.back());
  }
  if (!std::filesystem::exists(paths.pretrain_checkpoint())) {
    ck.meta = json{{"stage", "pretrain"}, {"epoch", 0}, {"fingerprint", fingerprint}};
    save_checkpoint(paths.pretrain_checkpoint(), ck);
  }
  flush_log();
  write_manifest(cfg, "pretrain", data.inputs, {paths.pretrain_checkpoint(), paths.pretrain_log()});
  return total;
}

struct TrainOutcome {
  std::vector<GsidStepMetrics> steps;
  FrozenAssignments final_assignments;
};

// Parses a step file back into codes, in file order.
inline std::vector<std::pair<std::string, SemanticId>> read_assignments(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, SemanticId>> out;
  std::istringstream in(read_file(path));
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("assignments: malformed line in " + path.string());
    SemanticId id;
    const std::string codes = line.substr(tab + 1);
    if (codes != "-") {
      std::istringstream cs(codes);
      for (std::string part; std::getline(cs, part, '-');) id.codes.push_back(std::stoi(part));
    }
    out.emplace_back(line.substr(0, tab), id);
  }
  return out;
}

// Runs steps 1..M from a pre-trained checkpoint (default: this run's).
inline TrainOutcome cmd_train(const RunConfig& cfg, std::optional<std::filesystem::path> from = std::nullopt) {
  const RunPaths paths{cfg.out_dir};
  PreparedData data = prepare_data(cfg);
  const auto source = from.value_or(paths.pretrain_checkpoint());
  Checkpoint ck = load_matching_checkpoint(source, data.vocab);
  if (ck.model.config().num_steps != cfg.model.num_steps || ck.model.config().codebook_size != cfg.model.codebook_size ||
      ck.model.config().hidden_size != cfg.model.hidden_size) {
    throw ConfigError("checkpoint model shape does not match config");
  }
  if (ck.model.trained_steps() != 0) throw ConfigError("train expects a pre-trained checkpoint with no GSID steps");
  const std::string source_hash = hash_file(source);
  Optimizer optimizer(OptimizerOptions{.learning_rate = cfg.gsid_learning_rate, .clip_norm = cfg.gsid_clip_norm});

  TrainOutcome outcome;
  FrozenAssignments frozen = FrozenAssignments::empty(data.train.size());
  frozen.checkpoint_hash = source_hash;
  std::string metrics_text;
  std::vector<std::filesystem::path> outputs;
  for (std::size_t step = 1; step <= cfg.model.num_steps; ++step) {
    GsidStepResult r = train_step_T(ck.model, optimizer, data.train, frozen, cfg.gsid);
    for (std::size_t i = 0; i < frozen.ids.size(); ++i) {
      const auto& before = frozen.ids[i].codes;
      const auto& after = r.next.ids[i].codes;
      if (!std::equal(before.begin(), before.end(), after.begin())) {
        throw std::runtime_error("frozen prefix changed for item " + data.train.item_ids[i]);
      }
    }
    frozen = std::move(r.next);
    frozen.checkpoint_hash = source_hash;
    FrozenAssignments shown = frozen;
    shown.step = step;
    detail::write_text(paths.assignments(step), assignments_to_tsv(shown, data.train.item_ids));
    outputs.push_back(paths.assignments(step));
    metrics_text += r.metrics.to_json().dump() + "\n";
    detail::write_text(paths.train_metrics(), metrics_text);
    spdlog::info("train: step {} codes used {} entropy {:.3f}", step, r.metrics.codes_used,
                 r.metrics.code_usage_entropy);
    outcome.steps.push_back(r.metrics);
  }
  ck.optimizer = optimizer.state();
  ck.meta = json{{"stage", "gsid"}, {"from", source_hash}};
  save_checkpoint(paths.model(), ck);
  outputs.push_back(paths.train_metrics());
  outputs.push_back(paths.model());
  auto inputs = data.inputs;
  inputs.push_back(source);
  write_manifest(cfg, "train", inputs, outputs);
  outcome.final_assignments = std::move(frozen);
  return outcome;
}

inline Checkpoint load_trained(const RunConfig& cfg, const PreparedData& data,
                               std::optional<std::filesystem::path> from = std::nullopt) {
  Checkpoint ck = load_matching_checkpoint(from.value_or(RunPaths{cfg.out_dir}.model()), data.vocab);
  if (ck.model.trained_steps() == 0) throw ConfigError("checkpoint has no trained GSID steps (run train first)");
  return ck;
}

inline CodeIndex cmd_index(const RunConfig& cfg, std::optional<std::filesystem::path> from = std::nullopt) {
  const RunPaths paths{cfg.out_dir};
  PreparedData data = prepare_data(cfg);
  Checkpoint ck = load_trained(cfg, data, from);
  CodeIndex index = assign_all_ids(ck.model, data.train.item_ids, data.train.items, ck.model.trained_steps(),
                                   model_hash(ck.model));
  index.save(paths.index());
  auto inputs = data.inputs;
  inputs.push_back(from.value_or(paths.model()));
  write_manifest(cfg, "index", inputs, {paths.index()});
  return index;
}

enum class RetrieveMode { generative, dense };

struct RetrieveRequest {
  RetrieveMode mode = RetrieveMode::generative;
  std::vector<std::string> queries;
  std::size_t k = 10;      // dense
  std::size_t width = 0;   // generative; 0 takes eval.beam_width
};

inline std::vector<RankedList> cmd_retrieve(const RunConfig& cfg, const RetrieveRequest& req,
                                            std::optional<std::filesystem::path> from = std::nullopt) {
  const RunPaths paths{cfg.out_dir};
  PreparedData data = prepare_data(cfg);
  Checkpoint ck = load_trained(cfg, data, from);
  const std::size_t depth = ck.model.trained_steps();
  std::vector<RankedList> out;
  std::vector<std::filesystem::path> inputs = data.inputs;
  inputs.push_back(from.value_or(paths.model()));
  if (req.mode == RetrieveMode::generative) {
    const CodeIndex index = CodeIndex::load(detail::require(paths.index(), "index (run index first)"),
                                            model_hash(ck.model));
    inputs.push_back(paths.index());
    const std::size_t width = req.width ? req.width : cfg.beam_width;
    for (std::size_t q = 0; q < req.queries.size(); ++q) {
      out.push_back(generative_retrieve(ck.model, index, data.vocab.encode(req.queries[q], cfg.max_len), width,
                                        req.k, "q" + std::to_string(q), cfg.gsid.loss.temperature));
    }
  } else {
    const DenseIndex dense = build_dense_index(ck.model, data.train.item_ids, data.train.items, depth);
    for (std::size_t q = 0; q < req.queries.size(); ++q) {
      out.push_back(dense_retrieve(ck.model, dense, data.vocab.encode(req.queries[q], cfg.max_len), req.k,
                                   "q" + std::to_string(q)));
    }
  }
  std::string text;
  for (std::size_t q = 0; q < out.size(); ++q) {
    json items = json::array();
    for (const auto& it : out[q].items) items.push_back({{"item_id", it.id}, {"score", it.score}});
    text += json{{"query_id", out[q].query_id}, {"query", req.queries[q]}, {"items", items}}.dump() + "\n";
  }
  detail::write_text(paths.retrieved(), text);
  write_manifest(cfg, "retrieve", inputs, {paths.retrieved()});
  return out;
}

// Held-out q2i retrieval (dense and generative), AMI of step-1 codes against
// known labels, l1/l2 code consistency for q2i and synthetic i2i pairs, and
// the hierarchical k-means baseline on pre-trained encoder embeddings.
inline json cmd_eval(const RunConfig& cfg, std::optional<std::filesystem::path> from = std::nullopt) {
  const RunPaths paths{cfg.out_dir};
  PreparedData data = prepare_data(cfg);
  Checkpoint ck = load_trained(cfg, data, from);
  const Model& model = ck.model;
  const std::size_t depth = model.trained_steps();
  std::vector<std::filesystem::path> inputs = data.inputs;
  inputs.push_back(from.value_or(paths.model()));

  CodeIndex index;
  if (std::filesystem::exists(paths.index())) {
    index = CodeIndex::load(paths.index(), model_hash(model));
    inputs.push_back(paths.index());
  } else {
    index = assign_all_ids(model, data.train.item_ids, data.train.items, depth, model_hash(model));
  }
  const DenseIndex dense = build_dense_index(model, data.train.item_ids, data.train.items, depth);

  std::vector<MetricRecord> records;
  const auto& test = data.split.test;
  std::size_t max_k = cfg.mrr_k;
  for (std::size_t k : cfg.ks) max_k = std::max(max_k, k);

  RelevanceJudgments judgments;
  std::vector<RankedList> dense_runs, gen_runs;
  std::unordered_map<std::string, SemanticId> query_ids, item_ids;
  std::vector<std::pair<std::string, std::string>> q2i;
  for (std::size_t i = 0; i < data.train.size(); ++i) item_ids[data.train.item_ids[i]] = index.id_of(data.train.item_ids[i]);
  for (std::size_t q = 0; q < test.size(); ++q) {
    const std::string qid = "q" + std::to_string(q);
    const auto tokens = data.vocab.encode(test[q].query, cfg.max_len);
    judgments[qid].insert(test[q].item_id);
    dense_runs.push_back(dense_retrieve(model, dense, tokens, max_k, qid));
    gen_runs.push_back(generative_retrieve(model, index, tokens, cfg.beam_width, std::min(cfg.cutoff, max_k), qid,
                                           cfg.gsid.loss.temperature));
    query_ids[qid] = model.generate_ids(tokens, depth);
    q2i.emplace_back(qid, test[q].item_id);
  }
  if (!test.empty()) {
    for (std::size_t k : cfg.ks) {
      records.push_back({"dense_recall", k, std::nullopt, recall_at_k(dense_runs, judgments, k), test.size()});
      records.push_back({"generative_recall", k, std::nullopt, recall_at_k(gen_runs, judgments, k), test.size()});
      const double n = static_cast<double>(data.train.size());
      records.push_back({"random_recall", k, std::nullopt, std::min(1.0, static_cast<double>(k) / n), test.size()});
    }
    records.push_back({"dense_mrr", cfg.mrr_k, std::nullopt, mrr_at_k(dense_runs, judgments, cfg.mrr_k), test.size()});
    records.push_back(
        {"generative_mrr", cfg.mrr_k, std::nullopt, mrr_at_k(gen_runs, judgments, cfg.mrr_k), test.size()});
    for (std::size_t level : cfg.levels) {
      if (level > depth) continue;
      records.push_back({"q2i_code_acc", std::nullopt, level, code_consistency(q2i, query_ids, item_ids, level),
                         q2i.size()});
    }
  }

  // AMI of level-1 codes against category labels and synthetic paths.
  std::vector<long long> codes1;
  for (std::size_t i = 0; i < data.train.size(); ++i) codes1.push_back(item_ids[data.train.item_ids[i]].codes.at(0));
  auto label_ami = [&](const std::string& name, std::size_t level,
                       const std::function<std::optional<long long>(const ItemRecord&)>& label,
                       const std::vector<long long>& codes) {
    std::vector<long long> u, v;
    for (std::size_t i = 0; i < data.corpus.items.size(); ++i) {
      if (auto l = label(data.corpus.items[i])) {
        u.push_back(codes[i]);
        v.push_back(*l);
      }
    }
    if (u.size() >= 2) records.push_back({name, std::nullopt, level, ami(u, v), u.size()});
  };
  std::map<std::string, long long> category_ids;
  for (const auto& it : data.corpus.items) {
    if (it.category) category_ids.emplace(*it.category, static_cast<long long>(category_ids.size()));
  }
  auto category = [&](const ItemRecord& it) -> std::optional<long long> {
    if (!it.category) return std::nullopt;
    return category_ids.at(*it.category);
  };
  auto top_path = [](const ItemRecord& it) -> std::optional<long long> {
    if (it.path.empty()) return std::nullopt;
    return it.path[0];
  };
  label_ami("ami_category", 1, category, codes1);
  label_ami("ami_path", 1, top_path, codes1);

  if (cfg.i2i_pairs > 0) {
    const auto pairs = same_leaf_item_pairs(data.corpus, cfg.i2i_pairs, cfg.i2i_seed());
    if (!pairs.empty()) {
      std::vector<std::pair<std::string, std::string>> named;
      std::unordered_map<std::string, SemanticId> left;
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const std::string a = "i2i" + std::to_string(p);
        left[a] = item_ids.at(data.corpus.items[pairs[p].first].id);
        named.emplace_back(a, data.corpus.items[pairs[p].second].id);
      }
      for (std::size_t level : cfg.levels) {
        if (level <= depth) {
          records.push_back({"i2i_code_acc", std::nullopt, level, code_consistency(named, left, item_ids, level),
                             named.size()});
        }
      }
    }
  }

  if (cfg.baseline && std::filesystem::exists(paths.pretrain_checkpoint())) {
    const Checkpoint pre = load_matching_checkpoint(paths.pretrain_checkpoint(), data.vocab);
    inputs.push_back(paths.pretrain_checkpoint());
    std::vector<std::vector<double>> emb;
    for (const auto& t : data.train.items) emb.push_back(pooled_embedding(pre.model, t));
    const auto km = hierarchical_kmeans_codes(emb, cfg.model.codebook_size, cfg.model.num_steps, cfg.kmeans_seed());
    std::vector<long long> base1;
    for (const auto& id : km) base1.push_back(id.codes.at(0));
    label_ami("kmeans_ami_category", 1, category, base1);
    label_ami("kmeans_ami_path", 1, top_path, base1);
  }

  json report = metrics_report(records, cfg.hash());
  detail::write_text(paths.eval_metrics(), report.dump(2) + "\n");
  write_manifest(cfg, "eval", inputs, {paths.eval_metrics()});
  return report;
}

// Looks up one metric in a report; nullopt if absent.
inline std::optional<double> find_metric(const json& report, const std::string& name,
                                         std::optional<std::size_t> k = std::nullopt,
                                         std::optional<std::size_t> level = std::nullopt) {
  for (const auto& m : report.at("metrics")) {
    if (m.at("name") != name) continue;
    if (k && (!m.contains("k") || m.at("k").get<std::size_t>() != *k)) continue;
    if (level && (!m.contains("level") || m.at("level").get<std::size_t>() != *level)) continue;
    return m.at("value").get<double>();
  }
  return std::nullopt;
}

}  // namespace gsid
