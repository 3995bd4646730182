#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "stepground/common.hpp"
#include "stepground/embedder.hpp"

namespace stepground {

inline constexpr std::uint32_t kIndexFormatVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-4;
inline constexpr double kRenormalizeTolerance = 1e-2;

struct NarrationSegment {
  double start_s = 0.0;
  double end_s = 0.0;
  std::string text;

  friend bool operator==(const NarrationSegment&, const NarrationSegment&) = default;
};

struct NarrationRecord {
  std::string video_id;
  std::vector<NarrationSegment> segments;

  friend bool operator==(const NarrationRecord&, const NarrationRecord&) = default;
};

/// count x dim row-major float32 matrix.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t dim, std::vector<float> values);

  std::size_t dim() const { return dim_; }
  std::size_t rows() const { return dim_ == 0 ? 0 : values_.size() / dim_; }
  std::span<const float> values() const { return values_; }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values_).subspan(i * dim_, dim_);
  }
  RowMatrixView view() const { return {values_, rows(), dim_}; }
  RowMatrixView view(std::size_t start_row, std::size_t count) const {
    return {std::span<const float>(values_).subspan(start_row * dim_, count * dim_), count, dim_};
  }

  /// Index of the first row whose L2 norm is off by more than `tolerance`.
  std::optional<std::size_t> first_non_unit_row(double tolerance) const;

  /// Byte-level equality of the payload.
  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

 private:
  std::size_t dim_ = 0;
  std::vector<float> values_;
};

struct RecordSpan {
  std::size_t start_row = 0;
  std::size_t length = 0;

  friend bool operator==(const RecordSpan&, const RecordSpan&) = default;
};

struct IndexManifest {
  std::size_t dim = 0;
  std::size_t record_count = 0;
  std::size_t segment_count = 0;
  std::uint32_t format_version = kIndexFormatVersion;
  std::string embedder_tag;
  std::uint64_t checksum = 0;

  friend bool operator==(const IndexManifest&, const IndexManifest&) = default;
};

/// Immutable narration corpus plus its segment embeddings.
///
/// Record j owns rows [offsets[j].start_row, start_row + length) of the
/// embedding matrix; offsets tile the matrix in record order.
class CorpusIndex {
 public:
  /// Validates every invariant (non-empty records, sorted segments, non-empty
  /// text, unique ids, unit rows, row count) and computes offsets + manifest.
  static CorpusIndex build(std::vector<NarrationRecord> records, EmbeddingMatrix embeddings,
                           std::string embedder_tag);

  const std::vector<NarrationRecord>& records() const { return records_; }
  const std::vector<RecordSpan>& offsets() const { return offsets_; }
  const IndexManifest& manifest() const { return manifest_; }
  const EmbeddingMatrix& embeddings() const { return embeddings_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t dim() const { return embeddings_.dim(); }

  /// Zero-copy view of the L x d rows belonging to one record.
  RowMatrixView segment_embeddings(std::size_t record_idx) const;

  friend bool operator==(const CorpusIndex&, const CorpusIndex&) = default;

 private:
  CorpusIndex() = default;

  std::vector<NarrationRecord> records_;
  std::vector<RecordSpan> offsets_;
  IndexManifest manifest_;
  EmbeddingMatrix embeddings_;
};

struct ComputeEmbeddings {};
using EmbeddingSource = std::variant<ComputeEmbeddings, std::filesystem::path>;

struct IngestReport {
  std::size_t records_read = 0;
  std::size_t dropped_empty_records = 0;
  std::size_t dropped_blank_records = 0;
  std::size_t dropped_blank_segments = 0;
  std::size_t renormalized_rows = 0;

  std::size_t dropped_records() const { return dropped_empty_records + dropped_blank_records; }
};

struct IngestResult {
  CorpusIndex index;
  IngestReport report;
};

/// Parses line-delimited narration JSON. Blank lines are skipped; any other
/// malformed line raises parse_error naming its 1-based line number.
std::vector<NarrationRecord> parse_narrations(std::istream& in);

/// Cleans raw records and attaches embeddings.
///
/// `precomputed`, when given, holds one row per raw input segment in file
/// order (dropped segments included). Segments are stably sorted by
/// (start_s, end_s); empty-text segments are removed and records left with
/// nothing are dropped.
IngestResult ingest_records(std::vector<NarrationRecord> raw,
                            std::optional<EmbeddingMatrix> precomputed,
                            const Embedder& embedder);

IngestResult ingest_corpus(const std::filesystem::path& narrations_file,
                           const EmbeddingSource& embeddings_source, const Embedder& embedder);

void write_index(const CorpusIndex& index, const std::filesystem::path& dir);
CorpusIndex read_index(const std::filesystem::path& dir);

// Embedding blob: "SGEB" magic, u32 version, u32 dim, u64 rows, rows*dim
// little-endian f32, u64 FNV-1a checksum of the payload bytes.
inline constexpr std::uint32_t kBlobVersion = 1;

/// Renormalizes rows whose norm is within kRenormalizeTolerance of 1 and
/// rejects anything further off (data_error naming the row).
EmbeddingMatrix normalize_precomputed(const EmbeddingMatrix& matrix, std::size_t& renormalized);

std::uint64_t payload_checksum(const EmbeddingMatrix& matrix);
void write_embedding_blob(std::ostream& out, const EmbeddingMatrix& matrix);
EmbeddingMatrix read_embedding_blob(std::istream& in);
void write_embedding_file(const std::filesystem::path& path, const EmbeddingMatrix& matrix);
EmbeddingMatrix read_embedding_file(const std::filesystem::path& path);

}  // namespace stepground
