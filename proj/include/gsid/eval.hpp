#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gsid/errors.hpp"
#include "gsid/model.hpp"

namespace gsid {

using json = nlohmann::json;

struct ScoredItem {
  std::string id;
  double score = 0.0;
};

// Items for one query, scores non-increasing, no duplicates.
struct RankedList {
  std::string query_id;
  std::vector<ScoredItem> items;
};

// query id -> expected item ids
using RelevanceJudgments = std::map<std::string, std::set<std::string>>;

namespace detail {

inline const std::set<std::string>& relevant_for(const RelevanceJudgments& j, const std::string& q) {
  auto it = j.find(q);
  if (it == j.end()) throw InvalidInput("no relevance judgments for query " + q);
  if (it->second.empty()) throw InvalidInput("empty relevance set for query " + q);
  return it->second;
}

}  // namespace detail

// (1/|Q|) sum_q |top-k ∩ rel_q| / |rel_q|
inline double recall_at_k(std::span<const RankedList> runs, const RelevanceJudgments& judgments, std::size_t k) {
  if (k < 1) throw InvalidInput("recall_at_k: k must be >= 1");
  if (runs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& run : runs) {
    const auto& rel = detail::relevant_for(judgments, run.query_id);
    std::set<std::string> found;
    for (std::size_t i = 0; i < std::min(k, run.items.size()); ++i)
      if (rel.count(run.items[i].id)) found.insert(run.items[i].id);
    total += static_cast<double>(found.size()) / static_cast<double>(rel.size());
  }
  return total / static_cast<double>(runs.size());
}

// (1/|Q|) sum_q 1/rank of the first relevant item within the top k (0 if none).
inline double mrr_at_k(std::span<const RankedList> runs, const RelevanceJudgments& judgments, std::size_t k) {
  if (k < 1) throw InvalidInput("mrr_at_k: k must be >= 1");
  if (runs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& run : runs) {
    const auto& rel = detail::relevant_for(judgments, run.query_id);
    for (std::size_t i = 0; i < std::min(k, run.items.size()); ++i) {
      if (rel.count(run.items[i].id)) {
        total += 1.0 / static_cast<double>(i + 1);
        break;
      }
    }
  }
  return total / static_cast<double>(runs.size());
}

// ---------------------------------------------------------------------------
// Adjusted mutual information (natural log)

struct Contingency {
  std::vector<std::vector<double>> table;  // rows: clusters of u, cols: clusters of v
  std::vector<double> a, b;                // margins
  double n = 0.0;
};

inline Contingency contingency(std::span<const long long> u, std::span<const long long> v) {
  if (u.size() != v.size()) throw ShapeError("contingency: partitions differ in size");
  std::map<long long, std::size_t> ru, rv;
  for (auto x : u) ru.emplace(x, ru.size());
  for (auto x : v) rv.emplace(x, rv.size());
  Contingency c;
  c.table.assign(ru.size(), std::vector<double>(rv.size(), 0.0));
  c.a.assign(ru.size(), 0.0);
  c.b.assign(rv.size(), 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    const std::size_t r = ru[u[i]], s = rv[v[i]];
    c.table[r][s] += 1.0;
    c.a[r] += 1.0;
    c.b[s] += 1.0;
  }
  c.n = static_cast<double>(u.size());
  return c;
}

inline double entropy_of(std::span<const double> margins, double n) {
  double h = 0.0;
  for (double m : margins)
    if (m > 0) h -= (m / n) * std::log(m / n);
  return h;
}

inline double mutual_information(const Contingency& c) {
  double mi = 0.0;
  for (std::size_t i = 0; i < c.a.size(); ++i)
    for (std::size_t j = 0; j < c.b.size(); ++j) {
      const double nij = c.table[i][j];
      if (nij > 0) mi += (nij / c.n) * std::log(c.n * nij / (c.a[i] * c.b[j]));
    }
  return mi;
}

// E[MI] under the hypergeometric (fixed-margin permutation) model.
inline double expected_mutual_information(std::span<const double> a, std::span<const double> b, double n) {
  const double lg_n = std::lgamma(n + 1);
  double emi = 0.0;
  for (double ai : a) {
    for (double bj : b) {
      const double lo = std::max(1.0, ai + bj - n);
      const double hi = std::min(ai, bj);
      const double fixed = std::lgamma(ai + 1) + std::lgamma(bj + 1) + std::lgamma(n - ai + 1) +
                           std::lgamma(n - bj + 1) - lg_n;
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = fixed - std::lgamma(nij + 1) - std::lgamma(ai - nij + 1) - std::lgamma(bj - nij + 1) -
                             std::lgamma(n - ai - bj + nij + 1);
        emi += (nij / n) * std::log(n * nij / (ai * bj)) * std::exp(log_p);
      }
    }
  }
  return emi;
}

// (MI - E[MI]) / (max(H(U), H(V)) - E[MI]); 0 when the denominator vanishes.
inline double ami(std::span<const long long> u, std::span<const long long> v) {
  if (u.size() < 2) throw InvalidInput("ami: at least two elements required");
  const Contingency c = contingency(u, v);
  const double hu = entropy_of(c.a, c.n), hv = entropy_of(c.b, c.n);
  const double mi = mutual_information(c);
  const double emi = expected_mutual_information(c.a, c.b, c.n);
  const double denom = std::max(hu, hv) - emi;
  if (std::abs(denom) < 1e-15) return 0.0;
  return (mi - emi) / denom;
}

// element id -> cluster label
using Partition = std::map<std::string, long long>;

inline double ami(const Partition& u, const Partition& v) {
  if (u.size() != v.size()) throw InvalidInput("ami: partitions cover different elements");
  std::vector<long long> lu, lv;
  for (const auto& [id, label] : u) {
    auto it = v.find(id);
    if (it == v.end()) throw InvalidInput("ami: element " + id + " missing from second partition");
    lu.push_back(label);
    lv.push_back(it->second);
  }
  return ami(lu, lv);
}

// Fraction of (query, item) pairs whose first `level` codes agree.
inline double code_consistency(std::span<const std::pair<std::string, std::string>> pairs,
                               const std::unordered_map<std::string, SemanticId>& query_ids,
                               const std::unordered_map<std::string, SemanticId>& item_ids, std::size_t level) {
  if (level < 1) throw InvalidInput("code_consistency: level must be >= 1");
  if (pairs.empty()) return 0.0;
  std::size_t agree = 0;
  for (const auto& [q, d] : pairs) {
    auto qi = query_ids.find(q);
    auto di = item_ids.find(d);
    if (qi == query_ids.end()) throw InvalidInput("code_consistency: no ID for query " + q);
    if (di == item_ids.end()) throw InvalidInput("code_consistency: no ID for item " + d);
    if (qi->second.size() < level || di->second.size() < level) {
      throw InvalidInput("code_consistency: ID shorter than level " + std::to_string(level));
    }
    agree += std::equal(qi->second.codes.begin(), qi->second.codes.begin() + static_cast<std::ptrdiff_t>(level),
                        di->second.codes.begin());
  }
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Report

struct MetricRecord {
  std::string name;
  std::optional<std::size_t> k;
  std::optional<std::size_t> level;
  double value = 0.0;
  std::size_t count = 0;  // queries or pairs or elements measured
};

inline json metrics_report(std::span<const MetricRecord> records, const std::string& config_hash) {
  json list = json::array();
  for (const auto& r : records) {
    json j{{"name", r.name}, {"value", r.value}, {"count", r.count}};
    if (r.k) j["k"] = *r.k;
    if (r.level) j["level"] = *r.level;
    list.push_back(std::move(j));
  }
  return json{{"config_hash", config_hash}, {"metrics", std::move(list)}};
}

}  // namespace gsid
