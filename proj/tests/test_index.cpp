#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "gsid/index.hpp"

using namespace gsid;

namespace {

ModelConfig tiny(std::size_t m, std::size_t k) {
  ModelConfig c;
  c.vocab_size = 40;
  c.hidden_size = 16;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.attention_heads = 2;
  c.feed_forward_size = 32;
  c.max_text_len = 10;
  c.num_steps = m;
  c.codebook_size = k;
  c.seed = 17;
  return c;
}

// Sharper code distributions than the N(0, 1/sqrt(D)) init gives, so beams
// actually differ.
void sharpen(Model& m, double factor) {
  for (auto& cb : m.codebooks()) {
    Tensor e = cb.embeddings();
    for (double& v : e.values) v *= factor;
    cb.restore(e, cb.ema_counts(), cb.ema_sums());
  }
}

std::vector<std::vector<int>> random_texts(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(10, 39), len(2, 8);
  std::vector<std::vector<int>> out(n);
  for (auto& t : out) {
    const int l = len(rng);
    for (int i = 0; i < l; ++i) t.push_back(tok(rng));
  }
  return out;
}

// Adjusted Rand index from pair counts.
double adjusted_rand(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, double> nij;
  std::map<int, double> ai, bj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (auto& [_, v] : nij) sum_ij += c2(v);
  for (auto& [_, v] : ai) sum_a += c2(v);
  for (auto& [_, v] : bj) sum_b += c2(v);
  const double expected = sum_a * sum_b / c2(static_cast<double>(a.size()));
  return (sum_ij - expected) / (0.5 * (sum_a + sum_b) - expected);
}

}  // namespace

TEST(CodeIndexTrie, InvariantsAfterEveryBatch) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> code(0, 3), len(1, 3);
  CodeIndex index(4, 3, "abc");
  for (int batch = 0; batch < 10; ++batch) {
    for (int i = 0; i < 20; ++i) {
      SemanticId id;
      const int l = len(rng);
      for (int j = 0; j < l; ++j) id.codes.push_back(code(rng));
      index.insert("item" + std::to_string(batch * 20 + i), id);
    }
    ASSERT_EQ(index.check_invariants(), "");
  }
  EXPECT_EQ(index.items_under(std::vector<int>{}).size(), 200u);
  EXPECT_THROW(index.insert("item0", SemanticId{{1}}), InvalidInput);
  EXPECT_THROW(index.insert("x", SemanticId{{1, 2, 3, 0}}), InvalidInput);
  EXPECT_THROW(index.insert("y", SemanticId{{4}}), IndexError);
}

TEST(CodeIndexTrie, SerializeRoundTripAndHashCheck) {
  CodeIndex index(4, 2, "feedbeef");
  index.insert("b", SemanticId{{3, 1}});
  index.insert("a", SemanticId{{0, 2}});
  index.insert("c", SemanticId{{3, 1}});
  const std::string text = index.serialize();
  CodeIndex back = CodeIndex::parse(text, "feedbeef");
  EXPECT_EQ(back.serialize(), text);
  EXPECT_EQ(back.items_at(std::vector<int>{3, 1}).size(), 2u);
  EXPECT_EQ(back.item_id(back.items_at(std::vector<int>{3, 1})[0]), "b");
  EXPECT_THROW(CodeIndex::parse(text, "00000000"), ConfigError);
  EXPECT_THROW(CodeIndex::parse("nonsense"), DataError);
}

TEST(AssignAllIds, IdenticalTextsShareIds) {
  Model m(tiny(2, 4));
  m.set_trained_steps(2);
  const std::vector<std::string> ids{"x", "y", "z"};
  const std::vector<std::vector<int>> texts{{11, 12, 13}, {20, 21}, {11, 12, 13}};
  CodeIndex index = assign_all_ids(m, ids, texts, 2);
  EXPECT_EQ(index.id_of("x"), index.id_of("z"));
  EXPECT_EQ(index.check_invariants(), "");
  Model untrained(tiny(2, 4));
  EXPECT_THROW(assign_all_ids(untrained, ids, texts, 1), InvalidInput);
}

TEST(BeamSearch, WidthOneIsGreedy) {
  Model m(tiny(3, 4));
  sharpen(m, 6.0);
  std::mt19937_64 rng(2);
  for (const auto& t : random_texts(20, rng)) {
    auto beams = beam_search_decode(m, t, 1, 3);
    ASSERT_EQ(beams.size(), 1u);
    EXPECT_EQ(beams[0].id, m.generate_ids(t, 3));
  }
}

TEST(BeamSearch, FullWidthEqualsExhaustiveScoring) {
  Model m(tiny(2, 3));
  sharpen(m, 6.0);
  std::mt19937_64 rng(3);
  for (const auto& t : random_texts(10, rng)) {
    std::vector<ScoredId> oracle;
    const auto p1 = code_distribution(m.decode_step(t, SemanticId{}, 1), m.codebook(1));
    for (int a = 0; a < 3; ++a) {
      const auto p2 = code_distribution(m.decode_step(t, SemanticId{{a}}, 2), m.codebook(2));
      for (int b = 0; b < 3; ++b) oracle.push_back({SemanticId{{a, b}}, std::log(p1[a]) + std::log(p2[b])});
    }
    std::sort(oracle.begin(), oracle.end(), [](const auto& x, const auto& y) {
      return x.score != y.score ? x.score > y.score : x.id < y.id;
    });
    auto beams = beam_search_decode(m, t, 9, 2);
    ASSERT_EQ(beams.size(), 9u);
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_EQ(beams[i].id, oracle[i].id) << "rank " << i;
      EXPECT_NEAR(beams[i].score, oracle[i].score, 1e-12);
    }
  }
}

TEST(BeamSearch, ConstrainedStaysInsideIndex) {
  Model m(tiny(3, 4));
  sharpen(m, 6.0);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> code(0, 3);
  for (int trial = 0; trial < 10; ++trial) {
    CodeIndex index(4, 3);
    for (int i = 0; i < 5; ++i) index.insert("i" + std::to_string(i), SemanticId{{code(rng), code(rng), code(rng)}});
    for (const auto& t : random_texts(5, rng)) {
      for (const auto& b : beam_search_decode(m, t, 8, 3, &index)) {
        EXPECT_FALSE(index.items_at(b.id.codes).empty()) << b.id.to_string();
      }
    }
  }
  CodeIndex empty(4, 3);
  EXPECT_TRUE(beam_search_decode(m, std::vector<int>{11, 12}, 4, 3, &empty).empty());
}

TEST(GenerativeRetrieve, SingleItemAndNoDuplicates) {
  Model m(tiny(2, 4));
  sharpen(m, 6.0);
  CodeIndex one(4, 2);
  one.insert("only", SemanticId{{2, 1}});
  std::mt19937_64 rng(5);
  for (const auto& t : random_texts(5, rng)) {
    auto r = generative_retrieve(m, one, t, 8, 10);
    ASSERT_EQ(r.items.size(), 1u);
    EXPECT_EQ(r.items[0].id, "only");
  }
  CodeIndex many(4, 2);
  std::uniform_int_distribution<int> code(0, 3);
  for (int i = 0; i < 60; ++i) many.insert("i" + std::to_string(i), SemanticId{{code(rng), code(rng)}});
  auto r = generative_retrieve(m, many, std::vector<int>{12, 13, 14}, 8, 25);
  EXPECT_LE(r.items.size(), 25u);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < r.items.size(); ++i) {
    EXPECT_TRUE(seen.insert(r.items[i].id).second);
    if (i > 0) EXPECT_LE(r.items[i].score, r.items[i - 1].score);
  }
}

TEST(DenseRetrieve, BruteForceOracle) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  DenseIndex index;
  for (int i = 0; i < 100; ++i) {
    index.item_ids.push_back("d" + std::to_string(i));
    index.vectors.push_back({n(rng), n(rng), n(rng), n(rng)});
  }
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q{n(rng), n(rng), n(rng), n(rng)};
    std::vector<std::pair<double, int>> brute;
    for (int i = 0; i < 100; ++i) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) s += q[j] * index.vectors[i][j];
      brute.emplace_back(-s, i);
    }
    std::sort(brute.begin(), brute.end());
    auto r = dense_retrieve(index, q, 100);
    ASSERT_EQ(r.items.size(), 100u);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(r.items[i].id, "d" + std::to_string(brute[i].second));
  }
  EXPECT_TRUE(dense_retrieve(index, std::vector<double>{1, 0, 0, 0}, 0).items.empty());
  EXPECT_EQ(dense_retrieve(index, std::vector<double>{1, 0, 0, 0}, 500).items.size(), 100u);
}

TEST(DenseRetrieve, SelfSimilarityRanksFirst) {
  Model m(tiny(2, 4));
  m.set_trained_steps(2);
  std::mt19937_64 rng(7);
  auto texts = random_texts(30, rng);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < texts.size(); ++i) ids.push_back("t" + std::to_string(i));
  DenseIndex index = build_dense_index(m, ids, texts, 2);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto r = dense_retrieve(m, index, texts[i], 1);
    EXPECT_EQ(r.items[0].id, ids[i]);
  }
}

TEST(HierarchicalKmeans, DegenerateCases) {
  std::vector<std::vector<double>> same(12, {1.0, 2.0});
  auto ids = hierarchical_kmeans_codes(same, 3, 2, 1);
  for (const auto& id : ids) EXPECT_EQ(id, ids[0]);
  EXPECT_EQ(ids[0].size(), 2u);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> pts(20, std::vector<double>(3));
  for (auto& p : pts)
    for (double& v : p) v = n(rng);
  for (const auto& id : hierarchical_kmeans_codes(pts, 1, 3, 1)) EXPECT_EQ(id, (SemanticId{{0, 0, 0}}));

  // Three points, K=4: each gets its own code and the branch stops.
  auto few = hierarchical_kmeans_codes({{0.0}, {1.0}, {2.0}}, 4, 2, 1);
  std::set<int> codes;
  for (const auto& id : few) {
    EXPECT_EQ(id.size(), 1u);
    codes.insert(id.codes[0]);
  }
  EXPECT_EQ(codes.size(), 3u);
  EXPECT_THROW(hierarchical_kmeans_codes({{NAN}}, 2, 1, 1), InvalidInput);
}

TEST(HierarchicalKmeans, SeparatedBlobsRecovered) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 0.3);
  std::vector<std::vector<double>> pts;
  std::vector<int> truth;
  for (int i = 0; i < 100; ++i) {
    const int blob = i % 2;
    pts.push_back({n(rng) + (blob ? 10.0 : -10.0), n(rng), n(rng) + (blob ? 5.0 : 0.0)});
    truth.push_back(blob);
  }
  auto ids = hierarchical_kmeans_codes(pts, 2, 1, 3);
  std::vector<int> got;
  for (const auto& id : ids) got.push_back(id.codes.at(0));
  EXPECT_DOUBLE_EQ(adjusted_rand(got, truth), 1.0);
}

TEST(HierarchicalKmeans, DeterministicForSeed) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> pts(200, std::vector<double>(4));
  for (auto& p : pts)
    for (double& v : p) v = n(rng);
  EXPECT_EQ(hierarchical_kmeans_codes(pts, 4, 2, 5), hierarchical_kmeans_codes(pts, 4, 2, 5));
}
