#include <doctest.h>

#include <cmath>
#include <random>
#include <thread>

#include "stepground/corpus_store.hpp"
#include "stepground/embedder.hpp"
#include "support/oracles.hpp"

using namespace stepground;

namespace {

double norm(std::span<const float> v) { return std::sqrt(oracle::scalar_dot(v, v)); }

std::string random_text(std::mt19937_64& rng) {
  static const char* words[] = {"crack", "egg", "whisk", "pan", "heat", "the", "a", "tire", "jack",
                                "LUG", "nuts", "soil", "water", "seed", "42", "x", "Pot!", "--"};
  std::string out;
  const std::size_t n = rng() % 8;
  for (std::size_t i = 0; i < n; ++i) {
    if (!out.empty()) out += (rng() % 3 == 0) ? ", " : " ";
    out += words[rng() % std::size(words)];
  }
  return out;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on non-alphanumerics") {
  CHECK(tokenize("Crack the EGG") == std::vector<std::string>{"crack", "the", "egg"});
  CHECK(tokenize("  step-2: heat,pan ") == std::vector<std::string>{"step", "2", "heat", "pan"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("!!! ...").empty());
}

TEST_CASE("embedding is deterministic") {
  HashFeatureEmbedder e(64, 7);
  CHECK(e.embed("crack the egg") == e.embed("crack the egg"));
  HashFeatureEmbedder again(64, 7);
  CHECK(e.embed("crack the egg") == again.embed("crack the egg"));
}

TEST_CASE("empty and token-free text map to e0") {
  HashFeatureEmbedder e(16, 3);
  for (const char* text : {"", "   ", "?!,"}) {
    const auto v = e.embed(text);
    REQUIRE(v.size() == 16);
    CHECK(v[0] == 1.0f);
    for (std::size_t i = 1; i < v.size(); ++i) CHECK(v[i] == 0.0f);
  }
}

TEST_CASE("golden vectors") {
  HashFeatureEmbedder e(64, 7);
  struct Entry {
    std::size_t index;
    float value;
  };
  auto expect = [&](const char* text, std::vector<Entry> entries) {
    std::vector<float> want(64, 0.0f);
    for (const auto& en : entries) want[en.index] = en.value;
    CHECK(e.embed(text) == want);
  };
  expect("crack the egg", {{11, -0.577350259f}, {16, 0.577350259f}, {52, 0.577350259f}});
  expect("Whisk, the EGGS!", {{32, -0.577350259f}, {52, 0.577350259f}, {53, 0.577350259f}});

  HashFeatureEmbedder small(8, 0);
  const std::vector<float> want = {0.0f, 0.0f, -0.44721359f, -0.44721359f, 0.44721359f, 0.0f, 0.44721359f, 0.44721359f};
  CHECK(small.embed("a b c d e") == want);
}

TEST_CASE("embeddings are unit norm") {
  std::mt19937_64 rng(31);
  for (std::size_t dim : {1, 2, 8, 64, 300}) {
    HashFeatureEmbedder e(dim, rng());
    for (int i = 0; i < 200; ++i) {
      const auto v = e.embed(random_text(rng));
      REQUIRE(v.size() == dim);
      CHECK(std::abs(norm(v) - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("different seeds give different hashes") {
  HashFeatureEmbedder a(64, 1), b(64, 2);
  CHECK(a.embed("crack the egg whisk the eggs") != b.embed("crack the egg whisk the eggs"));
}

TEST_CASE("embedder tags round trip") {
  HashFeatureEmbedder e(48, 12345);
  CHECK(e.name() == "hashfeat-d48-s12345");
  auto back = embedder_from_tag(e.name());
  REQUIRE(back);
  CHECK(back->dim() == 48);
  CHECK(back->embed("boil water") == e.embed("boil water"));
  CHECK(embedder_from_tag("jina-v2") == nullptr);
  CHECK(embedder_from_tag("hashfeat-d0-s1") == nullptr);
  CHECK(embedder_from_tag("hashfeat-d12-s") == nullptr);
}

TEST_CASE("zero dimension is rejected") { CHECK_THROWS_AS(HashFeatureEmbedder(0, 1), Error); }

TEST_CASE("embedding is safe to call concurrently") {
  HashFeatureEmbedder e(64, 9);
  const auto want = e.embed("loosen the lug nuts");
  std::vector<int> ok(8, 0);
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&, t] {
        bool all = true;
        for (int i = 0; i < 500; ++i) all = all && e.embed("loosen the lug nuts") == want;
        ok[t] = all;
      });
    }
  }
  for (int v : ok) CHECK(v == 1);
}

TEST_CASE("similarity of a unit vector with itself is one") {
  const std::vector<float> v = {0.6f, 0.8f};
  const RowMatrixView a{v, 1, 2};
  const auto W = similarity_matrix(a, a);
  REQUIRE(W.rows() == 1);
  REQUIRE(W.cols() == 1);
  CHECK(W(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("orthogonal rows have zero similarity") {
  const std::vector<float> a = {1.0f, 0.0f, 0.0f};
  const std::vector<float> b = {0.0f, 0.0f, 1.0f};
  CHECK(similarity_matrix({a, 1, 3}, {b, 1, 3})(0, 0) == 0.0);
}

TEST_CASE("similarity matches the scalar loop oracle") {
  std::mt19937_64 rng(77);
  for (std::size_t d : {1, 3, 4, 5, 7, 64, 129}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto a = oracle::random_rows(rng, 3, d);
      const auto b = oracle::random_rows(rng, 4, d);
      const auto W = similarity_matrix(a.view(), b.view());
      const auto want = oracle::scalar_similarity(a.view(), b.view());
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(W(i, k) - want[i][k]) <= 1e-6);
    }
  }
}

TEST_CASE("similarity is transpose symmetric and bounded") {
  std::mt19937_64 rng(78);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng() % 70;
    const auto a = oracle::random_rows(rng, 1 + rng() % 6, d);
    const auto b = oracle::random_rows(rng, 1 + rng() % 6, d);
    const auto ab = similarity_matrix(a.view(), b.view());
    const auto ba = similarity_matrix(b.view(), a.view());
    for (std::size_t i = 0; i < ab.rows(); ++i) {
      for (std::size_t k = 0; k < ab.cols(); ++k) {
        CHECK(std::abs(ab(i, k) - ba(k, i)) <= 1e-6);
        CHECK(ab(i, k) >= -1.0);
        CHECK(ab(i, k) <= 1.0);
      }
    }
  }
}

TEST_CASE("similarity clamps rounding overshoot") {
  // slightly over-length rows push the raw dot above one
  const std::vector<float> v = {1.00001f, 0.0f};
  const std::vector<float> w = {-1.00001f, 0.0f};
  CHECK(similarity_matrix({v, 1, 2}, {v, 1, 2})(0, 0) == 1.0);
  CHECK(similarity_matrix({v, 1, 2}, {w, 1, 2})(0, 0) == -1.0);
}

TEST_CASE("similarity rejects a dim mismatch") {
  const std::vector<float> a = {1.0f, 0.0f};
  const std::vector<float> b = {1.0f, 0.0f, 0.0f};
  CHECK_THROWS_AS(similarity_matrix({a, 1, 2}, {b, 1, 3}), Error);
}

TEST_CASE("similarity_matrix_into reuses the buffer") {
  std::mt19937_64 rng(79);
  const auto a = oracle::random_rows(rng, 2, 8);
  const auto b = oracle::random_rows(rng, 5, 8);
  SimilarityMatrix out(10, 10, 3.0);
  similarity_matrix_into(a.view(), b.view(), out);
  CHECK(out.rows() == 2);
  CHECK(out.cols() == 5);
  const auto fresh = similarity_matrix(a.view(), b.view());
  CHECK(std::equal(out.values().begin(), out.values().end(), fresh.values().begin(), fresh.values().end()));
}

TEST_CASE("embed_all stacks one row per text") {
  HashFeatureEmbedder e(32, 2);
  const auto m = embed_all(e, {"heat pan", "", "add oil"});
  REQUIRE(m.rows() == 3);
  CHECK(m.dim() == 32);
  const auto r2 = e.embed("add oil");
  CHECK(std::equal(r2.begin(), r2.end(), m.row(2).begin()));
}

TEST_CASE("load_precomputed reads the blob format and renormalizes small drift") {
  const auto dir = std::filesystem::temp_directory_path() / "sg_embedder_precomputed";
  std::filesystem::create_directories(dir);
  const auto path = dir / "q.bin";
  write_embedding_file(path, EmbeddingMatrix(2, {0.6f, 0.8f, 1.004f, 0.0f}));
  const auto m = load_precomputed(path);
  REQUIRE(m.rows() == 2);
  CHECK(std::abs(norm(m.row(1)) - 1.0) <= 1e-6);
  CHECK(m.row(0)[0] == 0.6f);

  write_embedding_file(path, EmbeddingMatrix(2, {0.6f, 0.8f, 1.5f, 0.0f}));
  CHECK_THROWS_AS(load_precomputed(path), Error);
  std::filesystem::remove_all(dir);
}
