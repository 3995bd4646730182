#include "stepground/embedder.hpp"

#include <cctype>
#include <charconv>
#include <cmath>

#include "stepground/corpus_store.hpp"

namespace stepground {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class T>
bool parse_uint(std::string_view s, T& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::data_error: return "data_error";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::checksum_mismatch: return "checksum_mismatch";
    case ErrorCode::version_mismatch: return "version_mismatch";
  }
  return "unknown";
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    // Bytes >= 0x80 belong to UTF-8 sequences and stay inside tokens.
    if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

HashFeatureEmbedder::HashFeatureEmbedder(std::size_t dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
  if (dim == 0) throw Error(ErrorCode::invalid_argument, "embedder dim must be positive");
}

std::string HashFeatureEmbedder::name() const {
  return "hashfeat-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

std::vector<float> HashFeatureEmbedder::embed(std::string_view text) const {
  std::vector<double> acc(dim_, 0.0);
  for (const auto& token : tokenize(text)) {
    const std::uint64_t h = splitmix64(fnv1a(token) ^ seed_);
    const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
    acc[h % dim_] += sign;
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);

  std::vector<float> out(dim_, 0.0f);
  if (norm == 0.0) {
    out[0] = 1.0f;
    return out;
  }
  for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
  return out;
}

std::unique_ptr<Embedder> embedder_from_tag(std::string_view tag) {
  constexpr std::string_view prefix = "hashfeat-d";
  if (!tag.starts_with(prefix)) return nullptr;
  tag.remove_prefix(prefix.size());
  const auto sep = tag.find("-s");
  if (sep == std::string_view::npos) return nullptr;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  if (!parse_uint(tag.substr(0, sep), dim) || !parse_uint(tag.substr(sep + 2), seed) || dim == 0) {
    return nullptr;
  }
  return std::make_unique<HashFeatureEmbedder>(dim, seed);
}

EmbeddingMatrix embed_all(const Embedder& embedder, const std::vector<std::string>& texts) {
  std::vector<float> values;
  values.reserve(texts.size() * embedder.dim());
  for (const auto& text : texts) {
    auto v = embedder.embed(text);
    values.insert(values.end(), v.begin(), v.end());
  }
  return EmbeddingMatrix(embedder.dim(), std::move(values));
}

EmbeddingMatrix load_precomputed(const std::filesystem::path& path) {
  std::size_t renormalized = 0;
  return normalize_precomputed(read_embedding_file(path), renormalized);
}

SimilarityMatrix::SimilarityMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw Error(ErrorCode::invalid_argument, "similarity matrix size does not match shape");
  }
}

SimilarityMatrix SimilarityMatrix::transposed() const {
  SimilarityMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t k = 0; k < cols_; ++k) t(k, i) = (*this)(i, k);
  return t;
}

void SimilarityMatrix::resize(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  values_.resize(rows * cols);
}

double dot(std::span<const float> a, std::span<const float> b) {
  // Four independent accumulators; the summation order is fixed so results
  // are identical on every call.
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * b[i];
    s1 += static_cast<double>(a[i + 1]) * b[i + 1];
    s2 += static_cast<double>(a[i + 2]) * b[i + 2];
    s3 += static_cast<double>(a[i + 3]) * b[i + 3];
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * b[i];
  return (s0 + s1) + (s2 + s3);
}

void similarity_matrix_into(const RowMatrixView& a, const RowMatrixView& b, SimilarityMatrix& out) {
  if (a.cols != b.cols) {
    throw Error(ErrorCode::invalid_argument, "embedding dim mismatch: " + std::to_string(a.cols) +
                                                 " vs " + std::to_string(b.cols));
  }
  out.resize(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const auto ai = a.row(i);
    for (std::size_t k = 0; k < b.rows; ++k) {
      out(i, k) = std::clamp(dot(ai, b.row(k)), -1.0, 1.0);
    }
  }
}

SimilarityMatrix similarity_matrix(const RowMatrixView& a, const RowMatrixView& b) {
  SimilarityMatrix out;
  similarity_matrix_into(a, b, out);
  return out;
}

}  // namespace stepground
