#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gsid/autodiff.hpp"
#include "gsid/data.hpp"
#include "gsid/errors.hpp"
#include "gsid/model.hpp"
#include "gsid/numeric.hpp"
#include "gsid/optimizer.hpp"

namespace gsid {

// ---------------------------------------------------------------------------
// Training data

// Tokenized items and the training queries of each item, by item position.
struct TrainingData {
  std::vector<std::string> item_ids;
  std::vector<std::vector<int>> items;
  std::vector<std::vector<std::vector<int>>> queries;
  std::vector<std::vector<double>> query_weights;

  [[nodiscard]] std::size_t size() const { return items.size(); }
};

inline TrainingData make_training_data(const Corpus& corpus, std::span<const QueryItemPair> pairs, const Vocab& vocab,
                                       std::size_t max_len) {
  TrainingData data;
  const auto index = corpus.item_index();
  for (const auto& item : corpus.items) {
    data.item_ids.push_back(item.id);
    auto tokens = vocab.encode(item.text, max_len);
    if (tokens.empty()) tokens.push_back(Vocab::unk);
    data.items.push_back(std::move(tokens));
  }
  data.queries.resize(corpus.items.size());
  data.query_weights.resize(corpus.items.size());
  for (const auto& p : pairs) {
    auto it = index.find(p.item_id);
    if (it == index.end()) throw DataError("training pair references unknown item " + p.item_id);
    auto tokens = vocab.encode(p.query, max_len);
    if (tokens.empty()) continue;
    data.queries[it->second].push_back(std::move(tokens));
    data.query_weights[it->second].push_back(p.weight);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Frozen assignments

// Codes z_1 .. z_{step-1} of every item, fixed while step `step` trains.
struct FrozenAssignments {
  std::size_t step = 1;
  std::vector<SemanticId> ids;
  std::string checkpoint_hash;

  static FrozenAssignments empty(std::size_t items) {
    FrozenAssignments f;
    f.ids.assign(items, SemanticId{});
    return f;
  }

  [[nodiscard]] const SemanticId& at(std::size_t item) const {
    if (item >= ids.size()) throw InvalidInput("missing frozen assignment for item " + std::to_string(item));
    const SemanticId& id = ids[item];
    if (id.size() != step - 1) {
      throw InvalidInput("frozen assignment of item " + std::to_string(item) + " has length " +
                         std::to_string(id.size()) + ", expected " + std::to_string(step - 1));
    }
    return id;
  }
};

// Tab-separated "item_id<TAB>codes" lines, codes as "a-b-c" ("-" if empty).
inline std::string assignments_to_tsv(const FrozenAssignments& f, std::span<const std::string> item_ids) {
  std::string out = "# step " + std::to_string(f.step) + " checkpoint " + f.checkpoint_hash + "\n";
  for (std::size_t i = 0; i < f.ids.size(); ++i) {
    const std::string codes = f.ids[i].size() ? f.ids[i].to_string() : "-";
    out += item_ids[i] + "\t" + codes + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling and batching

// m query indices for an item with n queries: distinct when n >= m,
// otherwise all n followed by draws with replacement. With weights the
// distinct draws are weighted without replacement.
template <typename Rng>
std::vector<std::size_t> multi_query_sample(std::size_t n, std::size_t m, Rng& rng,
                                            std::span<const double> weights = {}) {
  if (n == 0) throw InvalidInput("multi_query_sample: item has no queries");
  std::vector<std::size_t> out;
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  if (!weights.empty()) {
    if (weights.size() != n) throw ShapeError("multi_query_sample: one weight per query required");
    std::vector<double> w(weights.begin(), weights.end());
    while (out.size() < std::min(n, m)) {
      std::discrete_distribution<std::size_t> d(w.begin(), w.end());
      const std::size_t k = d(rng);
      out.push_back(k);
      w[k] = 0.0;
      if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) break;
    }
  } else {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(n, m));
    out = pool;
  }
  std::uniform_int_distribution<std::size_t> any(0, n - 1);
  while (out.size() < m) out.push_back(any(rng));
  return out;
}

struct TrainSample {
  std::size_t item = 0;
  std::size_t query = 0;
};

struct SampleGroup {
  SemanticId prefix;
  // Residual groups collect prefix classes with fewer than two items; their
  // members do not share a prefix.
  bool residual = false;
  std::vector<TrainSample> samples;
};

struct TrainPairBatch {
  std::size_t step = 1;
  std::vector<SampleGroup> groups;

  [[nodiscard]] std::size_t size() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.samples.size();
    return n;
  }

  [[nodiscard]] std::vector<TrainSample> flat() const {
    std::vector<TrainSample> out;
    for (const auto& g : groups) out.insert(out.end(), g.samples.begin(), g.samples.end());
    return out;
  }
};

// Per-item query draws for one epoch.
struct ItemSamples {
  std::size_t item = 0;
  std::vector<std::size_t> queries;
};

// Groups items of equal frozen prefix into chunks of `group_size` items and
// packs whole groups into batches of at most `batch_size` pairs. Chunks with
// a single item go to a residual pool, itself chunked the same way. At step
// 1 every item shares the empty prefix and batches are plain shuffled slices.
template <typename Rng>
std::vector<TrainPairBatch> build_prefix_batches(const FrozenAssignments& frozen, std::vector<ItemSamples> items,
                                                 std::size_t step, std::size_t group_size, std::size_t batch_size,
                                                 Rng& rng) {
  if (group_size < 1 || batch_size < 1) throw InvalidInput("build_prefix_batches: sizes must be >= 1");
  std::shuffle(items.begin(), items.end(), rng);
  auto to_samples = [](const ItemSamples& s, std::vector<TrainSample>& out) {
    for (std::size_t q : s.queries) out.push_back({s.item, q});
  };
  std::vector<TrainPairBatch> batches;
  if (step == 1) {
    TrainPairBatch b{step, {SampleGroup{}}};
    for (const auto& s : items) {
      if (!b.groups[0].samples.empty() && b.groups[0].samples.size() + s.queries.size() > batch_size) {
        batches.push_back(std::move(b));
        b = TrainPairBatch{step, {SampleGroup{}}};
      }
      to_samples(s, b.groups[0].samples);
    }
    if (!b.groups[0].samples.empty()) batches.push_back(std::move(b));
    return batches;
  }

  std::map<SemanticId, std::vector<const ItemSamples*>> classes;
  for (const auto& s : items) classes[frozen.at(s.item).prefix(step - 1)].push_back(&s);
  std::vector<SampleGroup> groups;
  std::vector<const ItemSamples*> residual;
  for (auto& [prefix, members] : classes) {
    for (std::size_t start = 0; start < members.size(); start += group_size) {
      const std::size_t end = std::min(members.size(), start + group_size);
      if (end - start < 2) {
        residual.insert(residual.end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                        members.begin() + static_cast<std::ptrdiff_t>(end));
        continue;
      }
      SampleGroup g{prefix, false, {}};
      for (std::size_t i = start; i < end; ++i) to_samples(*members[i], g.samples);
      groups.push_back(std::move(g));
    }
  }
  std::shuffle(residual.begin(), residual.end(), rng);
  for (std::size_t start = 0; start < residual.size(); start += group_size) {
    SampleGroup g{SemanticId{}, true, {}};
    for (std::size_t i = start; i < std::min(residual.size(), start + group_size); ++i) to_samples(*residual[i], g.samples);
    groups.push_back(std::move(g));
  }
  std::shuffle(groups.begin(), groups.end(), rng);
  TrainPairBatch b{step, {}};
  for (auto& g : groups) {
    if (!b.groups.empty() && b.size() + g.samples.size() > batch_size) {
      batches.push_back(std::move(b));
      b = TrainPairBatch{step, {}};
    }
    b.groups.push_back(std::move(g));
  }
  if (!b.groups.empty()) batches.push_back(std::move(b));
  return batches;
}

// ---------------------------------------------------------------------------
// Losses

enum class KlGradient { both, stop_item };

// How the step-T commitment target is chosen from the batch's code logits.
// `argmax` takes each item's most likely code; `balanced` runs a few
// Sinkhorn-Knopp iterations pushing the batch toward uniform code usage
// before taking the row argmax.
enum class CommitTarget { argmax, balanced };

struct GsidLossOptions {
  double temperature = 1.0;              // code softmax
  double contrastive_temperature = 1.0;  // q . d similarity
  bool symmetric_contrastive = false;
  bool mask_same_item = true;
  KlGradient kl_gradient = KlGradient::both;
  double align_weight = 1.0;
  double commit_weight = 1.0;
  CommitTarget commit_target = CommitTarget::argmax;
  double sinkhorn_epsilon = 5.0;
  std::size_t sinkhorn_iterations = 3;
};

// Additive score mask removing same-item columns other than the diagonal.
inline Tensor contrastive_mask(std::span<const std::size_t> item_of_row) {
  const std::size_t n = item_of_row.size();
  Tensor mask = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && item_of_row[i] == item_of_row[j]) mask.at(i, j) = -1e9;
  return mask;
}

// Mean over rows of -log softmax(q_i . d_j / tau)[i], where row i of `d` is
// the positive of row i of `q`. Columns j != i carrying the same item as
// row i are removed from the denominator when `mask_same_item` is set.
inline Var contrastive_loss(Var q, Var d, std::span<const std::size_t> item_of_row, bool mask_same_item = true,
                            double temperature = 1.0, bool symmetric = false) {
  const std::size_t n = q.rows();
  if (d.rows() != n || item_of_row.size() != n) throw ShapeError("contrastive_loss: one item row per query row");
  if (!(temperature > 0.0)) throw InvalidInput("contrastive_loss: temperature must be positive");
  const Tensor mask = mask_same_item ? contrastive_mask(item_of_row) : Tensor::matrix(n, n);
  std::vector<std::size_t> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  auto direction = [&](Var a, Var b) {
    Var s = ops::add_constant(ops::scale(ops::matmul_nt(a, b), 1.0 / temperature), mask);
    return ops::scale(ops::pick_sum(ops::log_softmax_rows(s), diag), -1.0 / static_cast<double>(n));
  };
  Var loss = direction(q, d);
  if (symmetric) loss = ops::scale(ops::add(loss, direction(d, q)), 0.5);
  return loss;
}

// Forward pass of one batch at step T: queries and items are decoded along
// the item's frozen prefix. Each distinct item is encoded once.
struct GsidForward {
  std::size_t step = 1;
  std::vector<std::size_t> items;      // distinct item indices
  std::vector<std::size_t> pair_slot;  // pair -> position in `items`
  Var q_final;                         // P x D
  Var d_final;                         // U x D
  std::vector<Var> q_logits;           // per pair, T x K
  std::vector<Var> d_logits;           // per item, T x K
  std::vector<std::vector<double>> d_states;  // stop-gradient d_T per item
};

template <typename Rng = std::mt19937_64>
GsidForward gsid_forward(Tape& tape, const Model& model, const TrainingData& data, std::span<const TrainSample> pairs,
                         std::size_t step, const FrozenAssignments& frozen, double temperature,
                         Rng* dropout_rng = nullptr) {
  if (pairs.empty()) throw InvalidInput("gsid_forward: empty batch");
  if (frozen.step != step) throw InvalidInput("gsid_forward: frozen assignments are for another step");
  GsidForward f;
  f.step = step;
  std::unordered_map<std::size_t, std::size_t> slot;
  std::vector<Var> q_rows, d_rows;
  for (const auto& p : pairs) {
    auto [it, fresh] = slot.emplace(p.item, f.items.size());
    if (fresh) {
      f.items.push_back(p.item);
      const SemanticId& prefix = frozen.at(p.item);
      EncodedText enc = model.encode(tape, data.items.at(p.item), dropout_rng);
      Var states = model.decode_codes(tape, enc, prefix.codes, dropout_rng);
      Var last = ops::slice_rows(states, step - 1, 1);
      d_rows.push_back(last);
      f.d_logits.push_back(model.code_logits(tape, states, temperature));
      const auto r = last.value().row(0);
      f.d_states.emplace_back(r.begin(), r.end());
    }
    f.pair_slot.push_back(it->second);
    const SemanticId& prefix = frozen.at(p.item);
    EncodedText enc = model.encode(tape, data.queries.at(p.item).at(p.query), dropout_rng);
    Var states = model.decode_codes(tape, enc, prefix.codes, dropout_rng);
    q_rows.push_back(ops::slice_rows(states, step - 1, 1));
    f.q_logits.push_back(model.code_logits(tape, states, temperature));
  }
  f.q_final = q_rows.size() == 1 ? q_rows.front() : ops::concat_rows(q_rows);
  f.d_final = d_rows.size() == 1 ? d_rows.front() : ops::concat_rows(d_rows);
  return f;
}

struct AlignmentTerms {
  Var contrastive;
  Var kl;
  Var total;
};

// Contrastive term plus sum_t KL(P(z_t|q) || P(z_t|d)), averaged over pairs.
inline AlignmentTerms alignment_loss(const GsidForward& f, const GsidLossOptions& opt = {}) {
  const std::size_t n = f.pair_slot.size();
  Var d_per_pair = ops::gather_rows(f.d_final, f.pair_slot);
  std::vector<std::size_t> item_of_row;
  for (std::size_t s : f.pair_slot) item_of_row.push_back(f.items[s]);
  AlignmentTerms t;
  t.contrastive = contrastive_loss(f.q_final, d_per_pair, item_of_row, opt.mask_same_item,
                                   opt.contrastive_temperature, opt.symmetric_contrastive);
  std::vector<Var> kls;
  for (std::size_t p = 0; p < n; ++p) {
    Var d_logits = f.d_logits[f.pair_slot[p]];
    if (opt.kl_gradient == KlGradient::stop_item) d_logits = ops::stop_gradient(d_logits);
    kls.push_back(ops::kl_from_logits(f.q_logits[p], d_logits, kKlFloor));
  }
  Var kl_sum = kls.size() == 1 ? kls.front() : ops::sum(ops::concat_rows(kls));
  t.kl = ops::scale(kl_sum, 1.0 / static_cast<double>(n));
  t.total = ops::add(t.contrastive, t.kl);
  return t;
}

// Row argmax of the Sinkhorn-Knopp transport plan for scores/epsilon with
// uniform row and column marginals, computed in log space. Zero iterations
// reduce to the plain argmax; ties go to the lowest code.
inline std::vector<int> balanced_assignment(const std::vector<std::vector<double>>& scores, double epsilon,
                                            std::size_t iterations) {
  if (!(epsilon > 0.0)) throw InvalidInput("balanced_assignment: epsilon must be positive");
  const std::size_t n = scores.size();
  if (n == 0) return {};
  const std::size_t k = scores[0].size();
  std::vector<std::vector<double>> plan(n, std::vector<double>(k));
  for (std::size_t i = 0; i < n; ++i) {
    if (scores[i].size() != k) throw ShapeError("balanced_assignment: ragged score rows");
    for (std::size_t j = 0; j < k; ++j) plan[i][j] = scores[i][j] / epsilon;
  }
  auto lse = [](auto&& get, std::size_t m) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < m; ++x) hi = std::max(hi, get(x));
    double acc = 0.0;
    for (std::size_t x = 0; x < m; ++x) acc += std::exp(get(x) - hi);
    return hi + std::log(acc);
  };
  const double log_k = std::log(static_cast<double>(k)), log_n = std::log(static_cast<double>(n));
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      const double z = lse([&](std::size_t i) { return plan[i][j]; }, n) + log_k;
      for (std::size_t i = 0; i < n; ++i) plan[i][j] -= z;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double z = lse([&](std::size_t j) { return plan[i][j]; }, k) + log_n;
      for (std::size_t j = 0; j < k; ++j) plan[i][j] -= z;
    }
  }
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<int>(std::max_element(plan[i].begin(), plan[i].end()) - plan[i].begin());
  return out;
}

struct CommitmentTerms {
  Var loss;
  std::vector<int> codes;  // current argmax z_T per distinct item
};

// Mean over items of -sum_t log Q(z_t): frozen codes for t < T, the current
// argmax for t = T.
inline CommitmentTerms commitment_loss(const GsidForward& f, const FrozenAssignments& frozen,
                                       const GsidLossOptions& opt = {}) {
  CommitmentTerms c;
  std::vector<Var> per_item;
  std::vector<int> balanced;
  if (opt.commit_target == CommitTarget::balanced) {
    std::vector<std::vector<double>> rows;
    for (const Var& l : f.d_logits) {
      const auto r = l.value().row(f.step - 1);
      rows.emplace_back(r.begin(), r.end());
    }
    balanced = balanced_assignment(rows, opt.sinkhorn_epsilon, opt.sinkhorn_iterations);
  }
  for (std::size_t u = 0; u < f.items.size(); ++u) {
    const SemanticId& prefix = frozen.at(f.items[u]);
    const Var& logits = f.d_logits[u];
    const auto last = logits.value().row(f.step - 1);
    const int z = balanced.empty() ? static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin())
                                   : balanced[u];
    std::vector<std::size_t> targets(prefix.codes.begin(), prefix.codes.end());
    targets.push_back(static_cast<std::size_t>(z));
    c.codes.push_back(z);
    per_item.push_back(ops::nll_from_logits(logits, std::move(targets)));
  }
  Var total = per_item.size() == 1 ? per_item.front() : ops::sum(ops::concat_rows(per_item));
  c.loss = ops::scale(total, 1.0 / static_cast<double>(f.items.size()));
  return c;
}

// EMA update of one codebook from stop-gradient states and their codes.
inline void ema_codebook_update(Codebook& codebook, std::span<const std::vector<double>> states,
                                std::span<const int> codes, double decay) {
  codebook.ema_update(states, codes, decay);
}

template <typename Rng>
std::size_t dead_code_reinit(Codebook& codebook, double threshold, std::span<const std::vector<double>> donors,
                             Rng& rng) {
  return codebook.reinit_dead_codes(threshold, donors, rng);
}

// ---------------------------------------------------------------------------
// Step-T training

struct GsidTrainOptions {
  std::size_t epochs_per_step = 1;
  std::size_t warmup_batches = 50;
  std::size_t group_size = 8;
  std::size_t batch_size = 64;
  std::size_t queries_per_item = 2;
  bool weighted_queries = false;
  double ema_decay = 0.99;
  double dead_code_threshold = 0.05;
  std::size_t donor_pool = 512;
  GsidLossOptions loss;
  std::uint64_t seed = 7;
};

struct GsidBatchLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch = 0;
  bool warmup = false;
  double contrastive = 0.0;
  double kl = 0.0;
  double commitment = 0.0;
  double total = 0.0;
  const TrainPairBatch* contents = nullptr;  // only valid inside the callback
};

struct GsidStepMetrics {
  std::size_t step = 0;
  std::size_t batches = 0;
  std::size_t warmup_batches = 0;
  double contrastive = 0.0;
  double kl = 0.0;
  double commitment = 0.0;
  double total = 0.0;
  double code_usage_entropy = 0.0;  // nats, over final z_T assignments
  std::size_t codes_used = 0;
  std::size_t dead_code_resets = 0;
  std::size_t skipped_updates = 0;
  std::size_t residual_groups = 0;

  [[nodiscard]] json to_json() const {
    return json{{"step", step},
                {"batches", batches},
                {"warmup_batches", warmup_batches},
                {"contrastive", contrastive},
                {"kl", kl},
                {"commitment", commitment},
                {"total", total},
                {"code_usage_entropy", code_usage_entropy},
                {"codes_used", codes_used},
                {"dead_code_resets", dead_code_resets},
                {"skipped_updates", skipped_updates},
                {"residual_groups", residual_groups}};
  }
};

struct GsidStepResult {
  FrozenAssignments next;  // codes z_1 .. z_T, ready for step T+1
  GsidStepMetrics metrics;
};

inline double usage_entropy(std::span<const int> codes, std::size_t k, std::size_t* used = nullptr) {
  std::vector<double> counts(k, 0.0);
  for (int c : codes) counts.at(static_cast<std::size_t>(c)) += 1.0;
  double h = 0.0;
  std::size_t nonzero = 0;
  for (double c : counts) {
    if (c <= 0.0) continue;
    ++nonzero;
    const double p = c / static_cast<double>(codes.size());
    h -= p * std::log(p);
  }
  if (used) *used = nonzero;
  return h;
}

// Greedy z_T for every item along its frozen prefix, appended to a copy.
inline FrozenAssignments assign_step_codes(const Model& model, const TrainingData& data,
                                           const FrozenAssignments& frozen) {
  const std::size_t step = frozen.step;
  FrozenAssignments next;
  next.step = step + 1;
  next.ids.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape(false);
    EncodedText enc = model.encode(tape, data.items[i]);
    next.ids[i] = frozen.at(i);
    const auto state = model.last_state(tape, enc, next.ids[i].codes);
    next.ids[i].codes.push_back(assign_code(state, model.codebook(step)));
  }
  return next;
}

namespace detail {

struct Snapshot {
  std::vector<Tensor> values;
  Codebook codebook;
  OptimizerState optimizer;
};

inline Snapshot take_snapshot(Model& model, std::size_t step, const Optimizer& opt) {
  Snapshot s;
  for (Parameter* p : model.parameters()) s.values.push_back(p->value);
  s.codebook = model.codebook(step);
  s.optimizer = opt.state();
  return s;
}

inline void restore_snapshot(Model& model, std::size_t step, Optimizer& opt, const Snapshot& s) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
  model.codebook(step) = s.codebook;
  opt.state() = s.optimizer;
}

}  // namespace detail

// Trains step T (frozen.step) of the progressive scheme. The first
// `warmup_batches` batches optimize the contrastive term only; afterwards
// the full objective is optimized and codebook T follows the EMA of the
// items' d_T. On a non-finite loss the model is rolled back to the start of
// the epoch and DivergenceError is thrown.
inline GsidStepResult train_step_T(Model& model, Optimizer& optimizer, const TrainingData& data,
                                   const FrozenAssignments& frozen, const GsidTrainOptions& opt,
                                   const std::function<void(const GsidBatchLog&)>& on_batch = nullptr) {
  const std::size_t step = frozen.step;
  if (step < 1 || step > model.config().num_steps) throw InvalidInput("train_step_T: step outside [1, M]");
  if (model.trained_steps() + 1 < step) throw InvalidInput("train_step_T: earlier steps not trained");
  if (frozen.ids.size() != data.size()) throw InvalidInput("train_step_T: assignments do not cover all items");
  for (std::size_t i = 0; i < data.size(); ++i) (void)frozen.at(i);

  Codebook& codebook = model.codebook(step);
  codebook.set_decay(opt.ema_decay);
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!data.queries[i].empty()) trainable.push_back(i);
  if (trainable.empty()) throw DataError("train_step_T: no item has a training query");

  GsidStepMetrics m;
  m.step = step;
  std::vector<std::vector<double>> donors;
  std::size_t donor_next = 0;
  std::size_t global_batch = 0;
  std::size_t full_batches = 0;
  auto params = model.parameters();
  std::mt19937_64 dropout_rng(opt.seed ^ (0xd00d + step));
  std::mt19937_64* drop = model.config().dropout > 0 ? &dropout_rng : nullptr;
  const std::size_t skipped_before = optimizer.state().skipped_updates;

  for (std::size_t epoch = 0; epoch < opt.epochs_per_step; ++epoch) {
    std::mt19937_64 rng(opt.seed * 0x9E3779B97F4A7C15ULL + step * 1000003ULL + epoch);
    const detail::Snapshot snapshot = detail::take_snapshot(model, step, optimizer);
    std::vector<ItemSamples> samples;
    for (std::size_t i : trainable) {
      std::span<const double> w;
      if (opt.weighted_queries) w = data.query_weights[i];
      samples.push_back({i, multi_query_sample(data.queries[i].size(), opt.queries_per_item, rng, w)});
    }
    const auto batches = build_prefix_batches(frozen, std::move(samples), step, opt.group_size, opt.batch_size, rng);
    for (const auto& b : batches)
      for (const auto& g : b.groups) m.residual_groups += g.residual ? 1 : 0;

    for (std::size_t bi = 0; bi < batches.size(); ++bi, ++global_batch) {
      const bool warmup = global_batch < opt.warmup_batches;
      const auto pairs = batches[bi].flat();
      zero_grads(params);
      Tape tape;
      GsidForward f = gsid_forward(tape, model, data, pairs, step, frozen, opt.loss.temperature, drop);
      AlignmentTerms align = alignment_loss(f, opt.loss);
      CommitmentTerms com = commitment_loss(f, frozen, opt.loss);
      Var loss = warmup ? align.contrastive
                        : ops::add(ops::scale(align.total, opt.loss.align_weight),
                                   ops::scale(com.loss, opt.loss.commit_weight));
      GsidBatchLog log{step, epoch, global_batch, warmup, align.contrastive.item(), align.kl.item(),
                       com.loss.item(), loss.item(), &batches[bi]};
      if (!std::isfinite(log.total)) {
        detail::restore_snapshot(model, step, optimizer, snapshot);
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " batch " +
                              std::to_string(global_batch) + "; weights rolled back to start of epoch " +
                              std::to_string(epoch));
      }
      tape.backward(loss);
      optimizer.step(params);
      if (!warmup) {
        ema_codebook_update(codebook, f.d_states, com.codes, opt.ema_decay);
        ++full_batches;
        m.contrastive += log.contrastive;
        m.kl += log.kl;
        m.commitment += log.commitment;
        m.total += log.total;
      } else {
        ++m.warmup_batches;
      }
      for (auto& s : f.d_states) {
        if (donors.size() < opt.donor_pool) donors.push_back(std::move(s));
        else donors[donor_next++ % opt.donor_pool] = std::move(s);
      }
      ++m.batches;
      if (on_batch) on_batch(log);
    }
    if (global_batch > opt.warmup_batches) {
      m.dead_code_resets += dead_code_reinit(codebook, opt.dead_code_threshold, donors, rng);
    }
  }
  if (full_batches > 0) {
    const double n = static_cast<double>(full_batches);
    m.contrastive /= n;
    m.kl /= n;
    m.commitment /= n;
    m.total /= n;
  }
  m.skipped_updates = optimizer.state().skipped_updates - skipped_before;

  GsidStepResult r;
  r.next = assign_step_codes(model, data, frozen);
  std::vector<int> last;
  for (const auto& id : r.next.ids) last.push_back(id.codes.back());
  m.code_usage_entropy = usage_entropy(last, codebook.size(), &m.codes_used);
  r.metrics = m;
  model.set_trained_steps(std::max(model.trained_steps(), step));
  return r;
}

}  // namespace gsid
