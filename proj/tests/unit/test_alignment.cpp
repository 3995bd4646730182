#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "stepground/alignment.hpp"
#include "support/oracles.hpp"

using namespace stepground;

namespace {

std::vector<int> move_codes(const std::vector<PathStep>& path) {
  std::vector<int> out;
  for (const auto& p : path) out.push_back(static_cast<int>(p.move));
  return out;
}

void check_lattice_path(const std::vector<PathStep>& path, std::size_t M, std::size_t L) {
  std::size_t i = 0, k = 0;
  for (const auto& p : path) {
    switch (p.move) {
      case Move::diagonal: ++i, ++k; break;
      case Move::vertical: ++i; break;
      case Move::horizontal: ++k; break;
    }
    REQUIRE(p.step == i);
    REQUIRE(p.segment == k);
  }
  CHECK(i == M);
  CHECK(k == L);
}

}  // namespace

TEST_CASE("mono_coverage single cell and two by two") {
  CHECK(mono_coverage(SimilarityMatrix(1, 1, std::vector<double>{0.5})) == doctest::Approx(0.5));
  // tuples (1,1)=1.1, (1,2)=1.7, (2,2)=0.9
  CHECK(mono_coverage(SimilarityMatrix(2, 2, std::vector<double>{0.9, 0.1, 0.2, 0.8})) ==
        doctest::Approx(0.85).epsilon(1e-12));
}

TEST_CASE("mono_coverage rejects empty matrices") {
  CHECK_THROWS_AS(mono_coverage(SimilarityMatrix(0, 3)), Error);
  CHECK_THROWS_AS(mono_coverage(SimilarityMatrix(3, 0)), Error);
}

TEST_CASE("mono_coverage matches the monotone tuple oracle") {
  std::mt19937_64 rng(101);
  std::size_t tuples = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t M = 1 + rng() % 4, L = 1 + rng() % 4;
    const auto W = oracle::random_matrix(rng, M, L);
    const double got = mono_coverage(oracle::to_similarity(W));
    CHECK(std::abs(got - oracle::brute_mono(W)) <= 1e-9);
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
    tuples += oracle::count_monotone_tuples(M, L);
  }
  CHECK(tuples > 300);
}

TEST_CASE("mono_coverage never decreases when a column is duplicated") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t M = 1 + rng() % 5, L = 1 + rng() % 5;
    auto W = oracle::random_matrix(rng, M, L);
    const double before = mono_coverage(oracle::to_similarity(W));
    const std::size_t col = rng() % L;
    const std::size_t at = rng() % (L + 1);
    for (auto& row : W) row.insert(row.begin() + static_cast<std::ptrdiff_t>(at), row[col]);
    CHECK(mono_coverage(oracle::to_similarity(W)) >= before);
  }
}

TEST_CASE("nw_align hand cases") {
  AlignConfig cfg;
  const auto perfect = nw_align(SimilarityMatrix(1, 1, std::vector<double>{1.0}), cfg);
  CHECK(perfect.final_score == doctest::Approx(1.0));
  CHECK(perfect.path.size() == 1);
  CHECK(perfect.normalized == doctest::Approx(1.0));

  // diagonal -1.0 loses to two gaps at -0.1; raw -0.05 clips to the floor
  const auto bad = nw_align(SimilarityMatrix(1, 1, std::vector<double>{-1.0}), cfg);
  CHECK(bad.final_score == doctest::Approx(-0.1));
  CHECK(bad.path.size() == 2);
  CHECK(bad.normalized == 1e-6);
  // both gap orders tie; the backtrace takes the vertical move first, so it
  // comes last in forward order
  CHECK(bad.path[0].move == Move::horizontal);
  CHECK(bad.path[1].move == Move::vertical);
}

TEST_CASE("nw_align rejects empty matrices") {
  CHECK_THROWS_AS(nw_align(SimilarityMatrix(0, 2), AlignConfig{}), Error);
  CHECK_THROWS_AS(nw_align(SimilarityMatrix(2, 0), AlignConfig{}), Error);
}

TEST_CASE("nw_align matches the lattice path oracle, including the tie rule") {
  std::mt19937_64 rng(202);
  AlignConfig cfg;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t M = 1 + rng() % 4, L = 1 + rng() % 4;
    const auto W = oracle::random_matrix(rng, M, L);
    const auto got = nw_align(oracle::to_similarity(W), cfg);
    const auto want = oracle::brute_nw(W, cfg.gap_penalty);
    CHECK(std::abs(got.final_score - want.final_score) <= 1e-9);
    CHECK(got.path.size() == want.path_length);
    CHECK(std::abs(got.normalized - want.normalized) <= 1e-9);
    CHECK(move_codes(got.path) == want.moves);
    check_lattice_path(got.path, M, L);
    CHECK(got.normalized >= cfg.nw_clip_lo);
    CHECK(got.normalized <= cfg.nw_clip_hi);
  }
}

TEST_CASE("nw_align tie rule on exactly tied inputs") {
  // Quantized entries make equal-sum paths common.
  std::mt19937_64 rng(303);
  AlignConfig cfg;
  cfg.gap_penalty = -0.25;
  const double levels[] = {-0.5, -0.25, 0.0, 0.25, 0.5};
  int ties_seen = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t M = 1 + rng() % 4, L = 1 + rng() % 4;
    oracle::Matrix W(M, std::vector<double>(L));
    for (auto& row : W)
      for (auto& v : row) v = levels[rng() % 5];
    const auto got = nw_align(oracle::to_similarity(W), cfg);
    const auto want = oracle::brute_nw(W, cfg.gap_penalty);
    CHECK(got.final_score == want.final_score);
    CHECK(move_codes(got.path) == want.moves);
    if (want.paths_enumerated > 1) ++ties_seen;
  }
  CHECK(ties_seen > 0);
}

TEST_CASE("nw_align final score is transpose invariant") {
  std::mt19937_64 rng(404);
  AlignConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t M = 1 + rng() % 6, L = 1 + rng() % 6;
    const auto W = oracle::to_similarity(oracle::random_matrix(rng, M, L));
    CHECK(nw_align(W, cfg).final_score == nw_align(W.transposed(), cfg).final_score);
  }
}

TEST_CASE("AlignConfig validation") {
  AlignConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.top_k = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.gap_penalty = 0.1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.nw_clip_lo = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.nw_clip_hi = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("stage1 returns the whole corpus when it is smaller than K") {
  std::mt19937_64 rng(5);
  const auto index = oracle::random_corpus(rng, 3, 2, 5, 16);
  const auto s = oracle::random_query(rng, 3, 16);
  const auto hits = stage1_retrieve(s, index, AlignConfig{});
  REQUIRE(hits.size() == 3);
  CHECK(hits[0].score >= hits[1].score);
  CHECK(hits[1].score >= hits[2].score);
}

TEST_CASE("stage1 ties go to the lower record index") {
  HashFeatureEmbedder emb(32, 1);
  std::vector<NarrationRecord> recs = {
      {"a", {{0, 1, "boil water"}, {1, 2, "add pasta"}}},
      {"b", {{0, 1, "paint the wall"}}},
      {"c", {{0, 1, "boil water"}, {1, 2, "add pasta"}}},
  };
  auto index = ingest_records(recs, std::nullopt, emb).index;
  const auto s = StepSequence::embed(emb, {"boil water", "add pasta"});
  AlignConfig cfg;
  cfg.top_k = 1;
  const auto hits = stage1_retrieve(s, index, cfg);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].record_idx == 0);
  cfg.top_k = 3;
  const auto all = stage1_retrieve(s, index, cfg);
  CHECK(all[0].record_idx == 0);
  CHECK(all[1].record_idx == 2);
  CHECK(all[0].score == all[1].score);
}

TEST_CASE("stage1 equals the top-K of a full sort") {
  std::mt19937_64 rng(606);
  for (int trial = 0; trial < 10; ++trial) {
    const auto index = oracle::random_corpus(rng, 100, 1, 8, 24);
    const auto s = oracle::random_query(rng, 1 + rng() % 5, 24);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t r = 0; r < index.size(); ++r) {
      all.push_back({mono_coverage(similarity_matrix(s.view(), index.segment_embeddings(r))), r});
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto hits = stage1_retrieve(s, index, AlignConfig{});
    REQUIRE(hits.size() == 25);
    for (std::size_t i = 0; i < 25; ++i) {
      CHECK(hits[i].record_idx == all[i].second);
      CHECK(hits[i].score == all[i].first);
    }
  }
}

TEST_CASE("stage1 is identical for any worker count") {
  std::mt19937_64 rng(707);
  const auto index = oracle::random_corpus(rng, 500, 1, 12, 16);
  const auto s = oracle::random_query(rng, 4, 16);
  AlignConfig cfg;
  const auto serial = stage1_retrieve(s, index, cfg);
  for (std::size_t w : {2, 3, 4, 8}) {
    cfg.workers = w;
    CHECK(stage1_retrieve(s, index, cfg) == serial);
  }
}

TEST_CASE("stage1 rejects an empty index") {
  const auto empty = CorpusIndex::build({}, EmbeddingMatrix(8, {}), "none");
  std::mt19937_64 rng(1);
  const auto s = oracle::random_query(rng, 2, 8);
  CHECK_THROWS_AS(stage1_retrieve(s, empty, AlignConfig{}), Error);
  CHECK_THROWS_AS(grounding_score(s, empty, AlignConfig{}), Error);
}

TEST_CASE("grounding finds an exact copy of the query") {
  HashFeatureEmbedder emb(64, 7);
  std::vector<std::string> steps = {"crack the egg", "whisk the eggs", "heat the pan"};
  std::vector<NarrationRecord> recs = {
      {"v0", {{0, 1, "open the hood"}, {1, 2, "check the oil"}}},
      {"v1", {{0, 1, "crack the egg"}, {1, 2, "whisk the eggs"}, {2, 3, "heat the pan"}}},
      {"v2", {{0, 1, "water the plant"}}},
  };
  const auto index = ingest_records(recs, std::nullopt, emb).index;
  const auto s = StepSequence::embed(emb, steps);
  const auto g = grounding_score(s, index, AlignConfig{}, true);
  CHECK(g.best.record_idx == 1);
  CHECK(std::abs(g.score - 1.0) <= 1e-6);
  REQUIRE(g.best.path.has_value());
  check_lattice_path(*g.best.path, 3, 3);
}

TEST_CASE("grounding with a pool of one") {
  std::mt19937_64 rng(11);
  const auto index = oracle::random_corpus(rng, 10, 1, 5, 16);
  const auto s = oracle::random_query(rng, 3, 16);
  AlignConfig cfg;
  cfg.top_k = 1;
  const auto g = grounding_score(s, index, cfg);
  REQUIRE(g.pool.size() == 1);
  REQUIRE(g.pool[0].stage2_score.has_value());
  CHECK(g.score == *g.pool[0].stage2_score);
  CHECK(g.best.record_idx == g.pool[0].record_idx);
}

TEST_CASE("grounding equals the two-stage oracle") {
  std::mt19937_64 rng(808);
  for (int trial = 0; trial < 30; ++trial) {
    const auto index = oracle::random_corpus(rng, 30, 1, 4, 12);
    const auto s = oracle::random_query(rng, 1 + rng() % 4, 12);
    AlignConfig cfg;
    cfg.top_k = 5;
    const auto want = oracle::two_stage(s, index, cfg.top_k, cfg.gap_penalty);
    const auto got = grounding_score(s, index, cfg);
    CHECK(std::abs(got.score - want.score) <= 1e-9);
    CHECK(got.best.record_idx == want.best_record);
    REQUIRE(got.pool.size() == want.pool.size());
    for (std::size_t i = 0; i < want.pool.size(); ++i) CHECK(got.pool[i].record_idx == want.pool[i]);
  }
}

TEST_CASE("grounding is permutation invariant with distinct scores") {
  std::mt19937_64 rng(909);
  for (int trial = 0; trial < 10; ++trial) {
    const auto index = oracle::random_corpus(rng, 40, 1, 6, 16);
    const auto s = oracle::random_query(rng, 3, 16);
    std::vector<std::size_t> perm(index.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<NarrationRecord> recs;
    std::vector<float> rows;
    for (std::size_t p : perm) {
      recs.push_back(index.records()[p]);
      const auto v = index.segment_embeddings(p);
      rows.insert(rows.end(), v.data.begin(), v.data.end());
    }
    const auto shuffled = CorpusIndex::build(recs, EmbeddingMatrix(16, rows), "random");
    const auto a = grounding_score(s, index, AlignConfig{});
    const auto b = grounding_score(s, shuffled, AlignConfig{});
    CHECK(a.score == b.score);
    CHECK(perm[b.best.record_idx] == a.best.record_idx);
  }
}

TEST_CASE("adding a record never lowers the score while the corpus fits in K") {
  std::mt19937_64 rng(1001);
  for (int trial = 0; trial < 20; ++trial) {
    const auto big = oracle::random_corpus(rng, 20, 1, 6, 16);
    const auto s = oracle::random_query(rng, 1 + rng() % 4, 16);
    double prev = 0.0;
    for (std::size_t n = 1; n <= big.size(); ++n) {
      std::vector<NarrationRecord> recs(big.records().begin(), big.records().begin() + static_cast<std::ptrdiff_t>(n));
      const auto& last = big.offsets()[n - 1];
      const auto rows = big.embeddings().values().first((last.start_row + last.length) * 16);
      const auto sub = CorpusIndex::build(recs, EmbeddingMatrix(16, {rows.begin(), rows.end()}), "random");
      const double a = grounding_score(s, sub, AlignConfig{}).score;
      CHECK(a >= prev);
      prev = a;
    }
  }
}

TEST_CASE("pool entries carry stage 2 scores and optional paths") {
  std::mt19937_64 rng(12);
  const auto index = oracle::random_corpus(rng, 8, 2, 4, 16);
  const auto s = oracle::random_query(rng, 2, 16);
  const auto without = grounding_score(s, index, AlignConfig{});
  for (const auto& o : without.pool) {
    CHECK(o.stage2_score.has_value());
    CHECK_FALSE(o.path.has_value());
  }
  const auto with = grounding_score(s, index, AlignConfig{}, true);
  for (const auto& o : with.pool) {
    REQUIRE(o.path.has_value());
    check_lattice_path(*o.path, 2, index.offsets()[o.record_idx].length);
  }
}
