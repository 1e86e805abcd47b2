#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsid/errors.hpp"
#include "gsid/eval.hpp"
#include "gsid/model.hpp"
#include "gsid/numeric.hpp"

namespace gsid {

// Trie over code sequences. Each node keeps the items whose ID ends there
// and the union of everything below it; items are numbered in insertion
// order. IDs may collide: they are cluster labels.
class CodeIndex {
 public:
  CodeIndex() : CodeIndex(2, 1) {}
  CodeIndex(std::size_t codebook_size, std::size_t depth, std::string checkpoint_hash = "")
      : codebook_size_(codebook_size), depth_(depth), checkpoint_hash_(std::move(checkpoint_hash)), nodes_(1) {
    if (depth < 1) throw InvalidInput("CodeIndex: depth must be >= 1");
  }

  void insert(const std::string& item_id, const SemanticId& id) {
    if (id.size() < 1 || id.size() > depth_) throw InvalidInput("CodeIndex: ID length outside [1, depth]");
    for (int c : id.codes) {
      if (c < 0 || static_cast<std::size_t>(c) >= codebook_size_) throw IndexError("CodeIndex: code out of range");
    }
    if (!lookup_.emplace(item_id, ids_.size()).second) throw InvalidInput("CodeIndex: duplicate item " + item_id);
    const std::size_t item = ids_.size();
    item_ids_.push_back(item_id);
    ids_.push_back(id);
    std::size_t node = 0;
    nodes_[0].all.push_back(item);
    for (int c : id.codes) {
      auto it = nodes_[node].children.find(c);
      if (it == nodes_[node].children.end()) {
        nodes_.emplace_back();
        it = nodes_[node].children.emplace(c, nodes_.size() - 1).first;
      }
      node = it->second;
      nodes_[node].all.push_back(item);
    }
    nodes_[node].here.push_back(item);
  }

  [[nodiscard]] bool has_prefix(std::span<const int> prefix) const { return find(prefix) != kNone; }

  // Items whose ID equals `id`, in insertion order.
  [[nodiscard]] std::vector<std::size_t> items_at(std::span<const int> id) const {
    const std::size_t n = find(id);
    return n == kNone ? std::vector<std::size_t>{} : nodes_[n].here;
  }

  // Items whose ID starts with `prefix`, in insertion order.
  [[nodiscard]] std::vector<std::size_t> items_under(std::span<const int> prefix) const {
    const std::size_t n = find(prefix);
    return n == kNone ? std::vector<std::size_t>{} : nodes_[n].all;
  }

  [[nodiscard]] std::size_t size() const { return ids_.size(); }
  [[nodiscard]] bool empty() const { return ids_.empty(); }
  [[nodiscard]] std::size_t depth() const { return depth_; }
  [[nodiscard]] std::size_t codebook_size() const { return codebook_size_; }
  [[nodiscard]] const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  [[nodiscard]] const std::string& item_id(std::size_t item) const { return item_ids_.at(item); }
  [[nodiscard]] const SemanticId& id(std::size_t item) const { return ids_.at(item); }
  [[nodiscard]] const SemanticId& id_of(const std::string& item_id) const {
    auto it = lookup_.find(item_id);
    if (it == lookup_.end()) throw InvalidInput("CodeIndex: unknown item " + item_id);
    return ids_[it->second];
  }

  // Empty string when every invariant holds, otherwise the first violation.
  [[nodiscard]] std::string check_invariants() const {
    std::vector<std::size_t> placed(ids_.size(), 0);
    std::string err;
    auto walk = [&](auto&& self, std::size_t node, std::size_t level) -> void {
      if (level > depth_) err = "trie deeper than depth";
      std::set<std::size_t> expected(nodes_[node].here.begin(), nodes_[node].here.end());
      for (std::size_t i : nodes_[node].here) ++placed[i];
      for (const auto& [code, child] : nodes_[node].children) {
        self(self, child, level + 1);
        expected.insert(nodes_[child].all.begin(), nodes_[child].all.end());
      }
      if (std::set<std::size_t>(nodes_[node].all.begin(), nodes_[node].all.end()) != expected ||
          expected.size() != nodes_[node].all.size()) {
        err = "node item set differs from union of children and own items";
      }
    };
    walk(walk, 0, 0);
    if (!err.empty()) return err;
    for (std::size_t i = 0; i < placed.size(); ++i) {
      if (placed[i] != 1) return "item " + item_ids_[i] + " placed " + std::to_string(placed[i]) + " times";
      if (items_at(ids_[i].codes).empty()) return "item " + item_ids_[i] + " not reachable by its ID";
    }
    return {};
  }

  // Versioned text form: header lines, then "codes<TAB>item_id" sorted by
  // ID (ties keep insertion order).
  [[nodiscard]] std::string serialize() const {
    std::ostringstream out;
    out << "gsid-index 1\n";
    out << "checkpoint " << checkpoint_hash_ << "\n";
    out << "codebook_size " << codebook_size_ << "\n";
    out << "depth " << depth_ << "\n";
    out << "items " << ids_.size() << "\n";
    std::vector<std::size_t> order(ids_.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
    for (std::size_t i : order) out << ids_[i].to_string() << '\t' << item_ids_[i] << '\n';
    return out.str();
  }

  static CodeIndex parse(const std::string& text, const std::string& expected_checkpoint = "") {
    std::istringstream in(text);
    std::string magic, key, hash;
    int version = 0;
    std::size_t k = 0, m = 0, n = 0;
    auto field = [&](const char* name, auto& value) {
      if (!(in >> key >> value) || key != name) throw DataError(std::string("index file: expected ") + name);
    };
    if (!(in >> magic >> version) || magic != "gsid-index") throw DataError("index file: bad header");
    if (version != 1) throw DataError("index file: unsupported version " + std::to_string(version));
    in >> key;
    if (key != "checkpoint") throw DataError("index file: expected checkpoint");
    std::getline(in, hash);
    hash.erase(0, hash.find_first_not_of(' '));
    field("codebook_size", k);
    field("depth", m);
    field("items", n);
    if (!expected_checkpoint.empty() && hash != expected_checkpoint) {
      throw ConfigError("index was built from checkpoint " + hash + ", model is " + expected_checkpoint);
    }
    CodeIndex index(k, m, hash);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw DataError("index file: malformed line '" + line + "'");
      SemanticId id;
      std::istringstream codes(line.substr(0, tab));
      for (std::string part; std::getline(codes, part, '-');) id.codes.push_back(std::stoi(part));
      index.insert(line.substr(tab + 1), id);
    }
    if (index.size() != n) throw DataError("index file: item count does not match header");
    if (auto err = index.check_invariants(); !err.empty()) throw DataError("index file: " + err);
    return index;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    out << serialize();
    if (!out) throw DataError("cannot write " + path.string());
  }

  static CodeIndex load(const std::filesystem::path& path, const std::string& expected_checkpoint = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), expected_checkpoint);
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    std::map<int, std::size_t> children;
    std::vector<std::size_t> here;
    std::vector<std::size_t> all;
  };

  [[nodiscard]] std::size_t find(std::span<const int> prefix) const {
    std::size_t node = 0;
    for (int c : prefix) {
      auto it = nodes_[node].children.find(c);
      if (it == nodes_[node].children.end()) return kNone;
      node = it->second;
    }
    return node;
  }

  std::size_t codebook_size_;
  std::size_t depth_;
  std::string checkpoint_hash_;
  std::vector<Node> nodes_;
  std::vector<std::string> item_ids_;
  std::vector<SemanticId> ids_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// Greedy IDs of depth T for every item.
inline CodeIndex assign_all_ids(const Model& model, std::span<const std::string> item_ids,
                                std::span<const std::vector<int>> item_tokens, std::size_t depth,
                                const std::string& checkpoint_hash = "") {
  if (item_ids.size() != item_tokens.size()) throw ShapeError("assign_all_ids: one token list per item");
  if (depth > model.trained_steps()) {
    throw InvalidInput("assign_all_ids: depth " + std::to_string(depth) + " exceeds trained steps " +
                       std::to_string(model.trained_steps()));
  }
  CodeIndex index(model.config().codebook_size, depth, checkpoint_hash);
  for (std::size_t i = 0; i < item_ids.size(); ++i) index.insert(item_ids[i], model.generate_ids(item_tokens[i], depth));
  return index;
}

struct ScoredId {
  SemanticId id;
  double score = 0.0;  // sum of per-step log probabilities
};

// Beam search over per-step log code probabilities. With `index` set, only
// prefixes present in the trie survive. Results are sorted by score, ties by
// code sequence.
inline std::vector<ScoredId> beam_search_decode(const Model& model, std::span<const int> tokens, std::size_t width,
                                                std::size_t depth, const CodeIndex* index = nullptr,
                                                double temperature = 1.0) {
  if (width < 1) throw InvalidInput("beam_search_decode: width must be >= 1");
  if (depth < 1 || depth > model.config().num_steps) throw InvalidInput("beam_search_decode: depth outside [1, M]");
  if (index != nullptr && index->empty()) return {};
  auto better = [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  };
  Tape tape(false);
  EncodedText enc = model.encode(tape, tokens);
  std::vector<ScoredId> beams{ScoredId{}};
  for (std::size_t t = 1; t <= depth; ++t) {
    std::vector<ScoredId> next;
    for (const auto& beam : beams) {
      const auto state = model.last_state(tape, enc, beam.id.codes);
      const Codebook& cb = model.codebook(t);
      std::vector<double> logits(cb.size());
      for (std::size_t j = 0; j < cb.size(); ++j) logits[j] = dot(state, cb.row(j)) / temperature;
      const auto logp = log_softmax(logits);
      for (std::size_t j = 0; j < cb.size(); ++j) {
        ScoredId cand{beam.id, beam.score + logp[j]};
        cand.id.codes.push_back(static_cast<int>(j));
        if (index != nullptr && !index->has_prefix(cand.id.codes)) continue;
        next.push_back(std::move(cand));
      }
    }
    std::sort(next.begin(), next.end(), better);
    if (next.size() > width) next.resize(width);
    beams = std::move(next);
    if (beams.empty()) break;
  }
  return beams;
}

// Constrained beam over the index, expanded to items: ordered by ID score,
// then insertion order within an ID; truncated at `cutoff`.
inline RankedList generative_retrieve(const Model& model, const CodeIndex& index, std::span<const int> tokens,
                                      std::size_t width, std::size_t cutoff, std::string query_id = {},
                                      double temperature = 1.0) {
  RankedList out{std::move(query_id), {}};
  for (const auto& beam : beam_search_decode(model, tokens, width, index.depth(), &index, temperature)) {
    for (std::size_t item : index.items_at(beam.id.codes)) {
      if (out.items.size() >= cutoff) return out;
      out.items.push_back({index.item_id(item), beam.score});
    }
  }
  return out;
}

// d_T of every item along its greedy chain.
struct DenseIndex {
  std::vector<std::string> item_ids;
  std::vector<std::vector<double>> vectors;
  std::size_t depth = 1;
};

inline DenseIndex build_dense_index(const Model& model, std::span<const std::string> item_ids,
                                    std::span<const std::vector<int>> item_tokens, std::size_t depth) {
  if (item_ids.size() != item_tokens.size()) throw ShapeError("build_dense_index: one token list per item");
  DenseIndex d;
  d.depth = depth;
  d.item_ids.assign(item_ids.begin(), item_ids.end());
  for (const auto& tokens : item_tokens) d.vectors.push_back(model.final_representation(tokens, depth));
  return d;
}

// Top-k by dot product, ties toward the lower item position. k larger than
// the corpus returns the full ranking.
inline RankedList dense_retrieve(const DenseIndex& index, std::span<const double> query, std::size_t k,
                                 std::string query_id = {}) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < index.vectors.size(); ++i) {
    if (index.vectors[i].size() != query.size()) throw ShapeError("dense_retrieve: dimension mismatch");
    scored.emplace_back(dot(query, index.vectors[i]), i);
  }
  const std::size_t n = std::min(k, scored.size());
  auto cmp = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), cmp);
  RankedList out{std::move(query_id), {}};
  for (std::size_t i = 0; i < n; ++i) out.items.push_back({index.item_ids[scored[i].second], scored[i].first});
  return out;
}

inline RankedList dense_retrieve(const Model& model, const DenseIndex& index, std::span<const int> query_tokens,
                                 std::size_t k, std::string query_id = {}) {
  return dense_retrieve(index, model.final_representation(query_tokens, index.depth), k, std::move(query_id));
}

// ---------------------------------------------------------------------------
// Hierarchical k-means baseline coder

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Lloyd iterations from k-means++ seeds; ties go to the lowest center.
template <typename Rng>
std::vector<int> kmeans(const std::vector<std::vector<double>>& x, std::span<const std::size_t> members,
                        std::size_t k, std::size_t iterations, Rng& rng) {
  const std::size_t n = members.size();
  std::vector<std::vector<double>> centers;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centers.push_back(x[members[first(rng)]]);
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) d2[i] = std::min(d2[i], sq_dist(x[members[i]], c));
      total += d2[i];
    }
    if (total <= 0.0) {
      centers.push_back(centers.front());
      continue;
    }
    std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
    centers.push_back(x[members[pick(rng)]]);
  }
  std::vector<int> labels(n, -1);
  for (std::size_t it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(x[members[i]], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      changed |= labels[i] != best;
      labels[i] = best;
    }
    if (!changed) break;
    const std::size_t dim = centers[0].size();
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      counts[c] += 1.0;
      for (std::size_t j = 0; j < dim; ++j) sums[c][j] += x[members[i]][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0.0) continue;  // empty cluster keeps its center
      for (std::size_t j = 0; j < dim; ++j) centers[c][j] = sums[c][j] / counts[c];
    }
  }
  return labels;
}

}  // namespace detail

// Mean of the encoder output rows; the baseline clusters these.
inline std::vector<double> pooled_embedding(const Model& model, std::span<const int> tokens) {
  const Tensor mem = model.encode(tokens);
  std::vector<double> out(mem.cols(), 0.0);
  for (std::size_t r = 0; r < mem.rows(); ++r)
    for (std::size_t c = 0; c < mem.cols(); ++c) out[c] += mem.at(r, c);
  for (double& v : out) v /= static_cast<double>(mem.rows());
  return out;
}

// Recursive k-means: level 1 splits all points into K groups, each group is
// split again for level 2, and so on to depth M. A branch with fewer than K
// points gives each point its own code and stops there.
inline std::vector<SemanticId> hierarchical_kmeans_codes(const std::vector<std::vector<double>>& embeddings,
                                                         std::size_t k, std::size_t depth, std::uint64_t seed,
                                                         std::size_t iterations = 20) {
  if (k < 1) throw InvalidInput("hierarchical_kmeans_codes: K must be >= 1");
  for (const auto& e : embeddings)
    for (double v : e)
      if (!std::isfinite(v)) throw InvalidInput("hierarchical_kmeans_codes: non-finite embedding");
  std::vector<SemanticId> ids(embeddings.size());
  std::mt19937_64 rng(seed);
  auto recurse = [&](auto&& self, const std::vector<std::size_t>& members, std::size_t level) -> void {
    if (level == depth || members.empty()) return;
    if (members.size() < k) {
      for (std::size_t i = 0; i < members.size(); ++i) ids[members[i]].codes.push_back(static_cast<int>(i));
      return;
    }
    const auto labels = detail::kmeans(embeddings, members, k, iterations, rng);
    std::vector<std::vector<std::size_t>> groups(k);
    for (std::size_t i = 0; i < members.size(); ++i) {
      ids[members[i]].codes.push_back(labels[i]);
      groups[static_cast<std::size_t>(labels[i])].push_back(members[i]);
    }
    for (const auto& g : groups) self(self, g, level + 1);
  };
  std::vector<std::size_t> all(embeddings.size());
  std::iota(all.begin(), all.end(), 0);
  recurse(recurse, all, 0);
  return ids;
}

}  // namespace gsid
