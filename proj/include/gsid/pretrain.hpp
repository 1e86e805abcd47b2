#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsid/autodiff.hpp"
#include "gsid/data.hpp"
#include "gsid/model.hpp"
#include "gsid/numeric.hpp"
#include "gsid/optimizer.hpp"

namespace gsid {

enum class PretrainTask { query_generation = 0, item_cloze = 1, suffix_completion = 2 };

inline constexpr std::array<PretrainTask, 3> kPretrainTasks{PretrainTask::query_generation, PretrainTask::item_cloze,
                                                           PretrainTask::suffix_completion};

inline std::string to_string(PretrainTask t) {
  switch (t) {
    case PretrainTask::query_generation: return "query_generation";
    case PretrainTask::item_cloze: return "item_cloze";
    case PretrainTask::suffix_completion: return "suffix_completion";
  }
  return "unknown";
}

inline int task_token(PretrainTask t) {
  switch (t) {
    case PretrainTask::query_generation: return Vocab::task_query_generation;
    case PretrainTask::item_cloze: return Vocab::task_item_cloze;
    case PretrainTask::suffix_completion: return Vocab::task_suffix_completion;
  }
  return Vocab::unk;
}

struct PretrainExample {
  PretrainTask task = PretrainTask::query_generation;
  std::vector<int> input;   // task token first
  std::vector<int> target;  // without the trailing </s>
  // Cloze only: [start, length) spans of the original text, in order.
  std::vector<std::pair<std::size_t, std::size_t>> masked_spans;
  // Suffix completion only: number of prefix tokens kept in the input.
  std::size_t split_point = 0;
};

// Where the item cloze task puts its supervision.
enum class ClozeTarget {
  full_text,  // the complete original description
  spans,      // sentinel-delimited masked spans only
};

struct ClozeOptions {
  int min_spans = 1;
  int max_spans = 3;
  int min_span_len = 1;
  int max_span_len = 3;
  ClozeTarget target = ClozeTarget::full_text;
  // Test hook: overrides the sampled span count (0 disables masking).
  std::optional<int> force_spans;
};

// Tokens of one item together with its co-occurring queries.
struct PretrainSource {
  std::vector<int> item;
  std::vector<std::vector<int>> queries;
};

template <typename Rng>
std::optional<PretrainExample> build_query_generation(std::span<const int> item,
                                                      const std::vector<std::vector<int>>& queries, Rng& rng) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!queries[i].empty()) usable.push_back(i);
  }
  if (usable.empty() || item.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
  PretrainExample ex;
  ex.task = PretrainTask::query_generation;
  ex.input.push_back(Vocab::task_query_generation);
  ex.input.insert(ex.input.end(), item.begin(), item.end());
  ex.target = queries[usable[pick(rng)]];
  return ex;
}

// Masks 1-3 non-overlapping, non-adjacent spans of 1-3 tokens, each replaced
// by its own sentinel. Texts shorter than four tokens get a single
// one-token span.
template <typename Rng>
PretrainExample build_item_cloze(std::span<const int> item, Rng& rng, const ClozeOptions& opt = {}) {
  if (item.empty()) throw InvalidInput("build_item_cloze: empty item");
  const std::size_t n = item.size();
  std::vector<std::size_t> lengths;
  if (opt.force_spans) {
    lengths.assign(static_cast<std::size_t>(std::max(0, *opt.force_spans)), 1);
  } else if (n < 4) {
    lengths = {1};
  } else {
    std::uniform_int_distribution<int> count(opt.min_spans, std::min(opt.max_spans, Vocab::num_sentinels));
    std::uniform_int_distribution<int> len(opt.min_span_len, opt.max_span_len);
    const int c = count(rng);
    for (int i = 0; i < c; ++i) lengths.push_back(static_cast<std::size_t>(len(rng)));
    // Keep at least one unmasked token between spans and one overall.
    auto masked = [&] {
      std::size_t s = 0;
      for (auto l : lengths) s += l;
      return s;
    };
    while (masked() + lengths.size() > n) {
      auto longest = std::max_element(lengths.begin(), lengths.end());
      if (*longest > 1) --*longest;
      else lengths.pop_back();
    }
  }
  std::size_t masked = 0;
  for (auto l : lengths) masked += l;
  if (masked > n) throw InvalidInput("build_item_cloze: spans exceed text length");
  // Choose distinct gaps among the n - masked unmasked tokens; distinct gaps
  // keep spans apart.
  const std::size_t unmasked = n - masked;
  std::vector<std::size_t> gaps(unmasked + 1);
  std::iota(gaps.begin(), gaps.end(), 0);
  std::shuffle(gaps.begin(), gaps.end(), rng);
  gaps.resize(std::min(lengths.size(), gaps.size()));
  std::sort(gaps.begin(), gaps.end());

  PretrainExample ex;
  ex.task = PretrainTask::item_cloze;
  ex.input.push_back(Vocab::task_item_cloze);
  std::size_t pos = 0, kept = 0, span = 0;
  while (pos < n || span < gaps.size()) {
    if (span < gaps.size() && gaps[span] == kept) {
      ex.masked_spans.emplace_back(pos, lengths[span]);
      ex.input.push_back(Vocab::first_sentinel + static_cast<int>(span));
      pos += lengths[span];
      ++span;
      continue;
    }
    if (pos >= n) break;
    ex.input.push_back(item[pos]);
    ++pos;
    ++kept;
  }
  if (opt.target == ClozeTarget::full_text) {
    ex.target.assign(item.begin(), item.end());
  } else {
    for (std::size_t s = 0; s < ex.masked_spans.size(); ++s) {
      ex.target.push_back(Vocab::first_sentinel + static_cast<int>(s));
      const auto [start, len] = ex.masked_spans[s];
      ex.target.insert(ex.target.end(), item.begin() + static_cast<std::ptrdiff_t>(start),
                       item.begin() + static_cast<std::ptrdiff_t>(start + len));
    }
    if (ex.target.empty()) ex.target.assign(item.begin(), item.end());
  }
  return ex;
}

// Reconstructs the original text of a cloze example from its input and target.
inline std::vector<int> unmask_cloze(const PretrainExample& ex, ClozeTarget mode) {
  if (mode == ClozeTarget::full_text) {
    // The target is the text; check the input is consistent with it.
    std::vector<int> out;
    std::size_t span = 0;
    for (std::size_t i = 1; i < ex.input.size(); ++i) {
      const int tok = ex.input[i];
      if (tok >= Vocab::first_sentinel && tok < Vocab::first_sentinel + Vocab::num_sentinels) {
        const auto [start, len] = ex.masked_spans.at(span++);
        out.insert(out.end(), ex.target.begin() + static_cast<std::ptrdiff_t>(start),
                   ex.target.begin() + static_cast<std::ptrdiff_t>(start + len));
      } else {
        out.push_back(tok);
      }
    }
    return out;
  }
  // Spans mode: target is <extra_i> span_i ...
  std::vector<std::vector<int>> spans(Vocab::num_sentinels);
  int current = -1;
  for (int tok : ex.target) {
    if (tok >= Vocab::first_sentinel && tok < Vocab::first_sentinel + Vocab::num_sentinels) {
      current = tok - Vocab::first_sentinel;
    } else if (current >= 0) {
      spans[static_cast<std::size_t>(current)].push_back(tok);
    }
  }
  std::vector<int> out;
  for (std::size_t i = 1; i < ex.input.size(); ++i) {
    const int tok = ex.input[i];
    if (tok >= Vocab::first_sentinel && tok < Vocab::first_sentinel + Vocab::num_sentinels) {
      const auto& s = spans[static_cast<std::size_t>(tok - Vocab::first_sentinel)];
      out.insert(out.end(), s.begin(), s.end());
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

// Split point uniform in [1, n-1]; input = task token + query + prefix,
// target = suffix.
template <typename Rng>
std::optional<PretrainExample> build_suffix_completion(std::span<const int> item, std::span<const int> query,
                                                       Rng& rng) {
  if (item.size() < 2) return std::nullopt;
  std::uniform_int_distribution<std::size_t> split(1, item.size() - 1);
  const std::size_t s = split(rng);
  PretrainExample ex;
  ex.task = PretrainTask::suffix_completion;
  ex.split_point = s;
  ex.input.push_back(Vocab::task_suffix_completion);
  ex.input.insert(ex.input.end(), query.begin(), query.end());
  ex.input.insert(ex.input.end(), item.begin(), item.begin() + static_cast<std::ptrdiff_t>(s));
  ex.target.assign(item.begin() + static_cast<std::ptrdiff_t>(s), item.end());
  return ex;
}

template <typename Rng>
PretrainTask sample_task(Rng& rng) {
  std::uniform_int_distribution<int> d(0, 2);
  return kPretrainTasks[static_cast<std::size_t>(d(rng))];
}

// Builds one example of `task` from `src`; nullopt when the task does not
// apply (no queries, text too short).
template <typename Rng>
std::optional<PretrainExample> make_example(const PretrainSource& src, PretrainTask task, Rng& rng,
                                            const ClozeOptions& cloze = {}) {
  switch (task) {
    case PretrainTask::query_generation:
      return build_query_generation(src.item, src.queries, rng);
    case PretrainTask::item_cloze:
      if (src.item.empty()) return std::nullopt;
      return build_item_cloze(src.item, rng, cloze);
    case PretrainTask::suffix_completion: {
      if (src.queries.empty()) return build_suffix_completion(src.item, std::span<const int>{}, rng);
      std::uniform_int_distribution<std::size_t> pick(0, src.queries.size() - 1);
      const auto& q = src.queries[pick(rng)];
      return build_suffix_completion(src.item, q, rng);
    }
  }
  return std::nullopt;
}

// Clips an example to the model's maximum lengths (input keeps its head).
inline void clip_example(PretrainExample& ex, std::size_t max_len) {
  if (ex.input.size() > max_len) ex.input.resize(max_len);
  if (ex.target.size() > max_len) ex.target.resize(max_len);
}

// Teacher-forced NLL of target + </s>, averaged over the batch.
template <typename Rng = std::mt19937_64>
Var pretrain_loss(Tape& tape, const Model& model, std::span<const PretrainExample> batch,
                  Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw InvalidInput("pretrain_loss: empty batch");
  std::vector<Var> losses;
  for (const auto& ex : batch) {
    std::vector<int> target = ex.target;
    target.push_back(Vocab::eos);
    EncodedText enc = model.encode(tape, ex.input, dropout_rng);
    Var logits = model.decode_text(tape, enc, target, dropout_rng);
    std::vector<std::size_t> ys(target.begin(), target.end());
    losses.push_back(ops::nll_from_logits(logits, std::move(ys)));
  }
  Var total = losses.size() == 1 ? losses.front() : ops::sum(ops::concat_rows(losses));
  return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
}

struct PretrainStepResult {
  double loss = 0.0;
  bool applied = false;
};

// One optimizer update on a batch. A non-finite loss skips the update.
template <typename Rng = std::mt19937_64>
PretrainStepResult pretrain_step(Model& model, Optimizer& optimizer, std::span<const PretrainExample> batch,
                                 Rng* dropout_rng = nullptr) {
  auto params = model.parameters();
  zero_grads(params);
  Tape tape;
  Var loss = pretrain_loss(tape, model, batch, dropout_rng);
  PretrainStepResult r{loss.item(), false};
  if (!std::isfinite(r.loss)) return r;
  tape.backward(loss);
  r.applied = optimizer.step(params);
  return r;
}

struct PretrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  ClozeOptions cloze;
  std::uint64_t seed = 7;
};

struct PretrainProgress {
  std::size_t epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
  std::array<std::size_t, 3> task_counts{};
};

struct PretrainSummary {
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  std::array<std::size_t, 3> task_counts{};
  std::size_t skipped_examples = 0;
  std::size_t skipped_steps = 0;
};

// Epoch loop. Each source contributes one example per epoch with a task
// drawn uniformly from the three; the per-epoch RNG is derived from the seed
// and epoch number so a resumed run replays the same stream.
class Pretrainer {
 public:
  explicit Pretrainer(PretrainOptions options) : options_(std::move(options)) {}

  PretrainSummary run(Model& model, Optimizer& optimizer, const std::vector<PretrainSource>& sources,
                      std::size_t start_epoch = 0,
                      const std::function<void(const PretrainProgress&)>& on_step = nullptr) const {
    PretrainSummary summary;
    bool first = true;
    std::mt19937_64 dropout_rng(options_.seed ^ 0xd50u);
    for (std::size_t epoch = start_epoch; epoch < options_.epochs; ++epoch) {
      std::mt19937_64 rng(epoch_seed(epoch));
      std::vector<std::size_t> order(sources.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<PretrainExample> batch;
      std::array<std::size_t, 3> batch_tasks{};
      double epoch_loss = 0.0;
      std::size_t epoch_batches = 0;
      auto flush = [&] {
        if (batch.empty()) return;
        auto r = pretrain_step(model, optimizer, batch, model.config().dropout > 0 ? &dropout_rng : nullptr);
        if (first) {
          summary.initial_loss = r.loss;
          first = false;
        }
        if (!r.applied) ++summary.skipped_steps;
        if (std::isfinite(r.loss)) {
          epoch_loss += r.loss;
          ++epoch_batches;
        }
        if (on_step) on_step({epoch, optimizer.state().step, r.loss, batch_tasks});
        batch.clear();
        batch_tasks = {};
      };
      for (std::size_t idx : order) {
        const PretrainTask task = sample_task(rng);
        auto ex = make_example(sources[idx], task, rng, options_.cloze);
        if (!ex) {
          ++summary.skipped_examples;
          continue;
        }
        clip_example(*ex, model.config().max_text_len);
        ++summary.task_counts[static_cast<std::size_t>(task)];
        ++batch_tasks[static_cast<std::size_t>(task)];
        batch.push_back(std::move(*ex));
        if (batch.size() == options_.batch_size) flush();
      }
      flush();
      summary.epoch_losses.push_back(epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : NAN);
    }
    return summary;
  }

  [[nodiscard]] std::uint64_t epoch_seed(std::size_t epoch) const {
    return options_.seed * 0x9E3779B97F4A7C15ULL + epoch + 1;
  }

 private:
  PretrainOptions options_;
};

}  // namespace gsid
