#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gsid/errors.hpp"
#include "gsid/hash.hpp"

namespace gsid {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Records

struct ItemRecord {
  std::string id;
  std::string text;
  std::optional<std::string> category;
  // Root-to-leaf branch indices; only synthetic corpora carry this.
  std::vector<int> path;
};

struct QueryItemPair {
  std::string query;
  std::string item_id;
  double weight = 1.0;
  std::string behavior = "click";
};

struct Corpus {
  std::vector<ItemRecord> items;
  std::vector<QueryItemPair> pairs;

  [[nodiscard]] std::unordered_map<std::string, std::size_t> item_index() const {
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < items.size(); ++i) idx.emplace(items[i].id, i);
    return idx;
  }

  // Pair indices grouped by item position.
  [[nodiscard]] std::vector<std::vector<std::size_t>> pairs_by_item() const {
    auto idx = item_index();
    std::vector<std::vector<std::size_t>> out(items.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      auto it = idx.find(pairs[p].item_id);
      if (it != idx.end()) out[it->second].push_back(p);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Tokenization

enum class TokenizerMode { word, character };

inline std::string to_string(TokenizerMode m) { return m == TokenizerMode::word ? "word" : "character"; }

inline TokenizerMode tokenizer_mode_from_string(const std::string& s) {
  if (s == "word") return TokenizerMode::word;
  if (s == "character") return TokenizerMode::character;
  throw ConfigError("unknown tokenizer mode: " + s);
}

// Word mode splits on whitespace and emits each ASCII punctuation character
// as its own token. Character mode emits one token per UTF-8 code point,
// spaces included.
inline std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode = TokenizerMode::word) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::character) {
    std::size_t i = 0;
    while (i < text.size()) {
      const auto c = static_cast<unsigned char>(text[i]);
      std::size_t len = 1;
      if (c >= 0xF0) len = 4;
      else if (c >= 0xE0) len = 3;
      else if (c >= 0xC0) len = 2;
      len = std::min(len, text.size() - i);
      out.emplace_back(text.substr(i, len));
      i += len;
    }
    return out;
  }
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else if (c < 0x80 && std::ispunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Collapses whitespace runs; used to decide whether a text is empty.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = !out.empty();
    } else {
      if (space) out.push_back(' ');
      space = false;
      out.push_back(ch);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int pad = 0;
  static constexpr int unk = 1;
  static constexpr int bos = 2;
  static constexpr int eos = 3;
  static constexpr int task_query_generation = 4;
  static constexpr int task_item_cloze = 5;
  static constexpr int task_suffix_completion = 6;
  static constexpr int first_sentinel = 7;
  static constexpr int num_sentinels = 3;
  static constexpr int num_reserved = 10;

  Vocab() : Vocab(TokenizerMode::word, {}) {}

  Vocab(TokenizerMode mode, const std::vector<std::string>& content_tokens) : mode_(mode) {
    tokens_ = {"<pad>", "<unk>", "<s>", "</s>", "<task:query_generation>", "<task:item_cloze>",
               "<task:suffix_completion>", "<extra_0>", "<extra_1>", "<extra_2>"};
    for (const auto& t : content_tokens) tokens_.push_back(t);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
        throw DataError("vocab: duplicate token '" + tokens_[i] + "'");
      }
    }
    Fnv1a h;
    h.update(to_string(mode_));
    for (const auto& t : tokens_) {
      h.update("\n");
      h.update(t);
    }
    hash_ = h.hex();
  }

  // Frequency-ranked vocabulary; ties broken lexicographically. `max_size`
  // counts reserved tokens; 0 means unlimited.
  static Vocab build(const std::vector<std::string>& texts, std::size_t max_size = 0, std::size_t min_frequency = 1,
                     TokenizerMode mode = TokenizerMode::word) {
    if (texts.empty()) throw InvalidInput("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts)
      for (auto& tok : tokenize(text, mode)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> keep;
    for (const auto& [tok, n] : ranked) {
      if (n < min_frequency) continue;
      if (max_size > 0 && keep.size() + num_reserved >= max_size) break;
      keep.push_back(tok);
    }
    return Vocab(mode, keep);
  }

  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] TokenizerMode mode() const { return mode_; }
  [[nodiscard]] const std::string& hash() const { return hash_; }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  [[nodiscard]] int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk : it->second;
  }

  [[nodiscard]] const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocab: index " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  // Unknown tokens map to <unk>; max_len = 0 disables truncation.
  [[nodiscard]] std::vector<int> encode(std::string_view text, std::size_t max_len = 0) const {
    std::vector<int> ids;
    for (const auto& tok : tokenize(text, mode_)) {
      if (max_len > 0 && ids.size() >= max_len) break;
      ids.push_back(id(tok));
    }
    return ids;
  }

  [[nodiscard]] std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (mode_ == TokenizerMode::word && i > 0) out.push_back(' ');
      out += token(ids[i]);
    }
    return out;
  }

  [[nodiscard]] json to_json() const {
    std::vector<std::string> content(tokens_.begin() + num_reserved, tokens_.end());
    return json{{"mode", to_string(mode_)}, {"tokens", content}, {"hash", hash_}};
  }

  static Vocab from_json(const json& j) {
    Vocab v(tokenizer_mode_from_string(j.at("mode").get<std::string>()),
            j.at("tokens").get<std::vector<std::string>>());
    if (j.contains("hash") && j.at("hash").get<std::string>() != v.hash()) {
      throw DataError("vocab: stored hash does not match contents");
    }
    return v;
  }

 private:
  TokenizerMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::string hash_;
};

// ---------------------------------------------------------------------------
// Line-delimited JSON ingestion

struct LoadReport {
  std::size_t item_lines = 0;
  std::size_t pair_lines = 0;
  std::size_t malformed = 0;
  std::vector<std::string> malformed_at;  // "file:line: reason"
  std::size_t rejected_pairs = 0;
  std::vector<std::string> rejected_at;
  std::size_t unknown_field_warnings = 0;
  std::size_t empty_queries = 0;
  std::vector<std::string> warnings;
};

struct LoadedCorpus {
  Corpus corpus;
  LoadReport report;
};

inline constexpr double kMaxMalformedFraction = 0.01;

namespace detail {

inline bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

inline void note_unknown_fields(const json& j, std::initializer_list<const char*> known, const std::string& where,
                                LoadReport& report) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      ++report.unknown_field_warnings;
      report.warnings.push_back(where + ": ignoring unknown field '" + key + "'");
    }
  }
}

}  // namespace detail

// Reads items.jsonl and pairs.jsonl from `dir`. Malformed lines are
// skipped and counted; more than 1% malformed aborts. Pairs that reference
// unknown items are rejected with their line number.
inline LoadedCorpus load_pairs(const std::filesystem::path& dir) {
  const auto items_path = dir / "items.jsonl";
  const auto pairs_path = dir / "pairs.jsonl";
  if (!std::filesystem::exists(items_path)) throw DataError("missing " + items_path.string());
  if (!std::filesystem::exists(pairs_path)) throw DataError("missing " + pairs_path.string());

  LoadedCorpus out;
  auto& report = out.report;
  auto& corpus = out.corpus;
  std::unordered_map<std::string, std::size_t> seen;

  auto bad = [&](const std::string& file, std::size_t line, const std::string& why) {
    ++report.malformed;
    report.malformed_at.push_back(file + ":" + std::to_string(line) + ": " + why);
  };

  {
    std::ifstream in(items_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::blank(line)) continue;
      ++report.item_lines;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) { bad("items.jsonl", lineno, "invalid JSON object"); continue; }
      if (!j.contains("id") || !j.contains("text") || !j["text"].is_string() ||
          !(j["id"].is_string() || j["id"].is_number_integer())) {
        bad("items.jsonl", lineno, "missing id/text");
        continue;
      }
      ItemRecord rec;
      rec.id = j["id"].is_string() ? j["id"].get<std::string>() : std::to_string(j["id"].get<long long>());
      rec.text = normalize_text(j["text"].get<std::string>());
      if (rec.text.empty()) { bad("items.jsonl", lineno, "empty text"); continue; }
      if (j.contains("category") && !j["category"].is_null()) {
        rec.category = j["category"].is_string() ? j["category"].get<std::string>() : j["category"].dump();
      }
      if (j.contains("path") && !j["path"].is_null()) {
        if (!j["path"].is_array()) { bad("items.jsonl", lineno, "path is not an array"); continue; }
        rec.path = j["path"].get<std::vector<int>>();
      }
      if (seen.count(rec.id)) { bad("items.jsonl", lineno, "duplicate id " + rec.id); continue; }
      detail::note_unknown_fields(j, {"id", "text", "category", "path"}, "items.jsonl:" + std::to_string(lineno),
                                  report);
      seen.emplace(rec.id, corpus.items.size());
      corpus.items.push_back(std::move(rec));
    }
  }
  {
    std::ifstream in(pairs_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::blank(line)) continue;
      ++report.pair_lines;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) { bad("pairs.jsonl", lineno, "invalid JSON object"); continue; }
      if (!j.contains("query") || !j["query"].is_string() || !j.contains("item_id") ||
          !(j["item_id"].is_string() || j["item_id"].is_number_integer())) {
        bad("pairs.jsonl", lineno, "missing query/item_id");
        continue;
      }
      QueryItemPair p;
      p.query = normalize_text(j["query"].get<std::string>());
      p.item_id = j["item_id"].is_string() ? j["item_id"].get<std::string>()
                                           : std::to_string(j["item_id"].get<long long>());
      if (j.contains("weight")) {
        if (!j["weight"].is_number()) { bad("pairs.jsonl", lineno, "weight is not a number"); continue; }
        p.weight = j["weight"].get<double>();
        if (p.weight < 1.0) { bad("pairs.jsonl", lineno, "weight < 1"); continue; }
      }
      if (j.contains("behavior") && j["behavior"].is_string()) p.behavior = j["behavior"].get<std::string>();
      if (p.query.empty()) {
        ++report.empty_queries;
        report.warnings.push_back("pairs.jsonl:" + std::to_string(lineno) + ": empty query skipped");
        continue;
      }
      if (!seen.count(p.item_id)) {
        ++report.rejected_pairs;
        report.rejected_at.push_back("pairs.jsonl:" + std::to_string(lineno) + ": unknown item " + p.item_id);
        continue;
      }
      detail::note_unknown_fields(j, {"query", "item_id", "weight", "behavior"},
                                  "pairs.jsonl:" + std::to_string(lineno), report);
      corpus.pairs.push_back(std::move(p));
    }
  }
  const std::size_t total = report.item_lines + report.pair_lines;
  if (total == 0) report.warnings.push_back("empty corpus");
  if (total > 0 && static_cast<double>(report.malformed) > kMaxMalformedFraction * static_cast<double>(total)) {
    std::ostringstream msg;
    msg << "load_pairs: " << report.malformed << " of " << total << " lines malformed";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, report.malformed_at.size()); ++i) {
      msg << "\n  " << report.malformed_at[i];
    }
    throw DataError(msg.str());
  }
  return out;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream items(dir / "items.jsonl", std::ios::binary);
  for (const auto& it : corpus.items) {
    json j{{"id", it.id}, {"text", it.text}};
    if (it.category) j["category"] = *it.category;
    if (!it.path.empty()) j["path"] = it.path;
    items << j.dump() << '\n';
  }
  std::ofstream pairs(dir / "pairs.jsonl", std::ios::binary);
  for (const auto& p : corpus.pairs) {
    pairs << json{{"query", p.query}, {"item_id", p.item_id}, {"weight", p.weight}, {"behavior", p.behavior}}.dump()
          << '\n';
  }
  if (!items || !pairs) throw DataError("failed writing corpus to " + dir.string());
}

// ---------------------------------------------------------------------------
// Synthetic hierarchical corpus

struct SynthOptions {
  int depth = 2;
  int branching = 8;
  int vocab_per_node = 24;
  int tokens_per_node = 4;
  // Tokens drawn from a root pool shared by every item.
  int shared_vocab = 16;
  int shared_tokens = 1;
  int items_per_leaf = 25;
  int min_queries = 1;
  int max_queries = 5;
  int min_query_len = 2;
  int max_query_len = 5;
  double query_noise = 0.1;
  std::uint64_t seed = 7;
};

inline json to_json(const SynthOptions& o) {
  return json{{"depth", o.depth},
              {"branching", o.branching},
              {"vocab_per_node", o.vocab_per_node},
              {"tokens_per_node", o.tokens_per_node},
              {"shared_vocab", o.shared_vocab},
              {"shared_tokens", o.shared_tokens},
              {"items_per_leaf", o.items_per_leaf},
              {"min_queries", o.min_queries},
              {"max_queries", o.max_queries},
              {"min_query_len", o.min_query_len},
              {"max_query_len", o.max_query_len},
              {"query_noise", o.query_noise},
              {"seed", o.seed}};
}

namespace detail {

// Pronounceable, alphanumeric-only pseudo-word for a token index.
inline std::string synth_word(std::size_t index) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  const std::size_t base = consonants.size() * vowels.size();
  std::string w;
  std::size_t v = index;
  do {
    const std::size_t syl = v % base;
    w.push_back(consonants[syl / vowels.size()]);
    w.push_back(vowels[syl % vowels.size()]);
    v /= base;
  } while (v > 0);
  return w + std::to_string(index % 10);
}

}  // namespace detail

// Builds a b-ary topic tree of the given depth. Every non-root node owns a
// disjoint token pool; an item's text samples tokens along its
// root-to-leaf path. Queries subsample the item's tokens, replacing each with
// a uniformly drawn content token with probability `query_noise`.
inline Corpus synth_corpus(const SynthOptions& o) {
  if (o.depth < 1) throw InvalidInput("synth_corpus: depth must be >= 1");
  if (o.branching < 2) throw InvalidInput("synth_corpus: branching must be >= 2");
  if (o.tokens_per_node < 1 || o.vocab_per_node < o.tokens_per_node) {
    throw InvalidInput("synth_corpus: vocab_per_node must be >= tokens_per_node >= 1");
  }
  if (o.shared_tokens > 0 && o.shared_vocab < o.shared_tokens) {
    throw InvalidInput("synth_corpus: shared_vocab must be >= shared_tokens");
  }
  if (o.items_per_leaf < 1) throw InvalidInput("synth_corpus: items_per_leaf must be >= 1");
  if (o.min_queries < 1 || o.max_queries < o.min_queries) throw InvalidInput("synth_corpus: bad query count range");
  if (o.min_query_len < 1 || o.max_query_len < o.min_query_len) {
    throw InvalidInput("synth_corpus: bad query length range");
  }
  if (o.query_noise < 0.0 || o.query_noise > 1.0) throw InvalidInput("synth_corpus: query_noise must be in [0,1]");

  std::mt19937_64 rng(o.seed);
  std::size_t next_word = 0;
  auto make_pool = [&](int n) {
    std::vector<std::string> pool;
    for (int i = 0; i < n; ++i) pool.push_back(detail::synth_word(next_word++));
    return pool;
  };
  const std::vector<std::string> shared = make_pool(o.shared_tokens > 0 ? o.shared_vocab : 0);

  // Pools keyed by the node's path prefix.
  std::map<std::vector<int>, std::vector<std::string>> pools;
  std::vector<std::vector<int>> frontier{{}};
  for (int level = 0; level < o.depth; ++level) {
    std::vector<std::vector<int>> next;
    for (const auto& parent : frontier) {
      for (int c = 0; c < o.branching; ++c) {
        auto child = parent;
        child.push_back(c);
        pools.emplace(child, make_pool(o.vocab_per_node));
        next.push_back(std::move(child));
      }
    }
    frontier = std::move(next);
  }
  std::vector<std::string> all_content = shared;
  for (const auto& [_, pool] : pools) all_content.insert(all_content.end(), pool.begin(), pool.end());

  auto sample_distinct = [&](const std::vector<std::string>& pool, int k) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(i), idx.size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[d(rng)]);
    }
    std::vector<std::string> out;
    for (int i = 0; i < k; ++i) out.push_back(pool[idx[static_cast<std::size_t>(i)]]);
    return out;
  };

  Corpus corpus;
  std::size_t item_no = 0;
  for (const auto& leaf : frontier) {
    for (int n = 0; n < o.items_per_leaf; ++n) {
      std::vector<std::string> toks;
      if (o.shared_tokens > 0) {
        auto s = sample_distinct(shared, o.shared_tokens);
        toks.insert(toks.end(), s.begin(), s.end());
      }
      std::vector<int> prefix;
      for (int b : leaf) {
        prefix.push_back(b);
        auto s = sample_distinct(pools.at(prefix), o.tokens_per_node);
        toks.insert(toks.end(), s.begin(), s.end());
      }
      ItemRecord rec;
      rec.id = "item" + std::to_string(item_no++);
      rec.path = leaf;
      rec.category = std::to_string(leaf.front());
      for (std::size_t i = 0; i < toks.size(); ++i) rec.text += (i ? " " : "") + toks[i];

      std::uniform_int_distribution<int> nq(o.min_queries, o.max_queries);
      const int queries = nq(rng);
      for (int q = 0; q < queries; ++q) {
        const int hi = std::min<int>(o.max_query_len, static_cast<int>(toks.size()));
        const int lo = std::min(o.min_query_len, hi);
        const int len = std::uniform_int_distribution<int>(lo, hi)(rng);
        std::vector<std::size_t> pos(toks.size());
        std::iota(pos.begin(), pos.end(), 0);
        std::shuffle(pos.begin(), pos.end(), rng);
        pos.resize(static_cast<std::size_t>(len));
        std::sort(pos.begin(), pos.end());
        std::bernoulli_distribution noisy(o.query_noise);
        std::uniform_int_distribution<std::size_t> any(0, all_content.size() - 1);
        std::string query;
        for (std::size_t i = 0; i < pos.size(); ++i) {
          const std::string& tok = noisy(rng) ? all_content[any(rng)] : toks[pos[i]];
          query += (i ? " " : "") + tok;
        }
        corpus.pairs.push_back(QueryItemPair{query, rec.id, 1.0, "click"});
      }
      corpus.items.push_back(std::move(rec));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Splits

struct PairSplit {
  std::vector<QueryItemPair> train;
  std::vector<QueryItemPair> test;
};

// Moves one randomly chosen pair of a random `fraction` of items (those
// with at least two pairs) into the held-out set.
inline PairSplit split_heldout(const Corpus& corpus, double fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution pick(fraction);
  const auto by_item = corpus.pairs_by_item();
  std::vector<bool> held(corpus.pairs.size(), false);
  for (const auto& plist : by_item) {
    if (plist.size() < 2) continue;
    if (!pick(rng)) continue;
    std::uniform_int_distribution<std::size_t> d(0, plist.size() - 1);
    held[plist[d(rng)]] = true;
  }
  PairSplit split;
  for (std::size_t p = 0; p < corpus.pairs.size(); ++p) {
    (held[p] ? split.test : split.train).push_back(corpus.pairs[p]);
  }
  return split;
}

// Random pairs of distinct items sharing a full synthetic path.
inline std::vector<std::pair<std::size_t, std::size_t>> same_leaf_item_pairs(const Corpus& corpus, std::size_t count,
                                                                             std::uint64_t seed) {
  std::map<std::vector<int>, std::vector<std::size_t>> leaves;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    if (!corpus.items[i].path.empty()) leaves[corpus.items[i].path].push_back(i);
  }
  std::vector<const std::vector<std::size_t>*> usable;
  for (const auto& [_, members] : leaves) {
    if (members.size() >= 2) usable.push_back(&members);
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (usable.empty()) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_leaf(0, usable.size() - 1);
  for (std::size_t n = 0; n < count; ++n) {
    const auto& m = *usable[pick_leaf(rng)];
    std::uniform_int_distribution<std::size_t> a(0, m.size() - 1);
    const std::size_t i = a(rng);
    std::size_t j = a(rng);
    while (j == i) j = a(rng);
    out.emplace_back(m[i], m[j]);
  }
  return out;
}

}  // namespace gsid
