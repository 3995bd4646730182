#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "stepground/common.hpp"

namespace stepground {

class EmbeddingMatrix;

/// Text -> unit-norm vector front-end. Implementations must be deterministic
/// and safe to call concurrently.
class Embedder {
 public:
  virtual ~Embedder() = default;

  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::vector<float> embed(std::string_view text) const = 0;
};

/// Signed feature hashing over lowercase alphanumeric word tokens.
///
/// Each token hashes (FNV-1a 64, mixed with the seed) to one bucket and a
/// sign; the bucket sums are L2-normalized. Texts without tokens, or whose
/// buckets cancel exactly, map to e0.
class HashFeatureEmbedder final : public Embedder {
 public:
  static constexpr std::size_t kDefaultDim = 64;

  explicit HashFeatureEmbedder(std::size_t dim = kDefaultDim, std::uint64_t seed = 0);

  std::string name() const override;
  std::size_t dim() const override { return dim_; }
  std::vector<float> embed(std::string_view text) const override;

  std::uint64_t seed() const { return seed_; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Lowercased alphanumeric runs; everything else separates tokens.
std::vector<std::string> tokenize(std::string_view text);

/// Rebuilds an embedder from its name() tag, or nullptr when the tag does
/// not describe a built-in embedder.
std::unique_ptr<Embedder> embedder_from_tag(std::string_view tag);

/// Embeds each text into one row of a count x dim matrix.
EmbeddingMatrix embed_all(const Embedder& embedder, const std::vector<std::string>& texts);

/// Loads externally precomputed vectors stored in the embedding blob format.
/// Rows within 1e-2 of unit norm are renormalized; anything further is rejected.
EmbeddingMatrix load_precomputed(const std::filesystem::path& path);

/// Dense M x L cosine-similarity matrix, row-major doubles.
class SimilarityMatrix {
 public:
  SimilarityMatrix() = default;
  SimilarityMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  SimilarityMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t i, std::size_t k) const { return values_[i * cols_ + k]; }
  double& operator()(std::size_t i, std::size_t k) { return values_[i * cols_ + k]; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values_).subspan(i * cols_, cols_);
  }

  SimilarityMatrix transposed() const;

  /// Reshapes in place, reusing capacity.
  void resize(std::size_t rows, std::size_t cols);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

double dot(std::span<const float> a, std::span<const float> b);

/// W[i][k] = <a_i, b_k>, clamped to [-1, 1].
SimilarityMatrix similarity_matrix(const RowMatrixView& a, const RowMatrixView& b);

/// Same as above, writing into `out` so scans can reuse one buffer.
void similarity_matrix_into(const RowMatrixView& a, const RowMatrixView& b, SimilarityMatrix& out);

}  // namespace stepground
