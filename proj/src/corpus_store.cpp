#include "stepground/corpus_store.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace stepground {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 4> kBlobMagic = {'S', 'G', 'E', 'B'};
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kEmbeddingsFile = "embeddings.bin";
constexpr const char* kRecordsFile = "records.jsonl";

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::ostream& out, T value) {
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(bytes.data(), bytes.size());
}

template <class T>
T get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw Error(ErrorCode::data_error, std::string("embedding blob truncated while reading ") + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

std::vector<unsigned char> payload_bytes(std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(bytes.data(), values.data(), bytes.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
  }
  return bytes;
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double row_norm(std::span<const float> row) {
  double s = 0.0;
  for (float v : row) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

bool is_blank(const std::string& text) {
  return text.find_first_not_of(" \t\r\n\f\v") == std::string::npos;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used, 16);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw Error(ErrorCode::data_error, "manifest checksum is not a hex string: " + s);
  }
  return v;
}

NarrationSegment parse_segment(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("segment is not an object");
  const auto& start = j.at("start_s");
  const auto& end = j.at("end_s");
  const auto& text = j.at("text");
  if (!start.is_number() || !end.is_number()) throw std::invalid_argument("start_s/end_s must be numbers");
  if (!text.is_string()) throw std::invalid_argument("text must be a string");
  NarrationSegment seg{start.get<double>(), end.get<double>(), text.get<std::string>()};
  if (!(seg.start_s >= 0.0) || !std::isfinite(seg.end_s)) {
    throw std::invalid_argument("start_s must be a finite number >= 0");
  }
  if (!(seg.end_s >= seg.start_s)) throw std::invalid_argument("end_s must be >= start_s");
  return seg;
}

json segment_to_json(const NarrationSegment& s) {
  return json{{"start_s", s.start_s}, {"end_s", s.end_s}, {"text", s.text}};
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::vector<float> values)
    : dim_(dim), values_(std::move(values)) {
  if (dim_ == 0) throw Error(ErrorCode::invalid_argument, "embedding dim must be positive");
  if (values_.size() % dim_ != 0) {
    throw Error(ErrorCode::invalid_argument, "embedding payload is not a whole number of rows");
  }
}

std::optional<std::size_t> EmbeddingMatrix::first_non_unit_row(double tolerance) const {
  for (std::size_t i = 0; i < rows(); ++i) {
    if (!(std::abs(row_norm(row(i)) - 1.0) <= tolerance)) return i;
  }
  return std::nullopt;
}

bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  return a.dim_ == b.dim_ && a.values_.size() == b.values_.size() &&
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
}

CorpusIndex CorpusIndex::build(std::vector<NarrationRecord> records, EmbeddingMatrix embeddings,
                               std::string embedder_tag) {
  if (embeddings.dim() == 0) throw Error(ErrorCode::invalid_argument, "index needs a positive dim");
  CorpusIndex index;
  index.offsets_.reserve(records.size());
  std::unordered_set<std::string> ids;
  std::size_t row = 0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.segments.empty()) {
      throw Error(ErrorCode::data_error, "record '" + rec.video_id + "' has no segments");
    }
    if (!ids.insert(rec.video_id).second) {
      throw Error(ErrorCode::data_error, "duplicate video_id '" + rec.video_id + "'");
    }
    for (std::size_t s = 0; s < rec.segments.size(); ++s) {
      const auto& seg = rec.segments[s];
      if (seg.text.empty()) {
        throw Error(ErrorCode::data_error, "record '" + rec.video_id + "' has an empty segment");
      }
      if (!(seg.start_s >= 0.0) || !(seg.end_s >= seg.start_s)) {
        throw Error(ErrorCode::data_error, "record '" + rec.video_id + "' has an invalid time span");
      }
      if (s > 0) {
        const auto& prev = rec.segments[s - 1];
        if (std::pair(prev.start_s, prev.end_s) > std::pair(seg.start_s, seg.end_s)) {
          throw Error(ErrorCode::data_error, "record '" + rec.video_id + "' segments are not sorted");
        }
      }
    }
    index.offsets_.push_back({row, rec.segments.size()});
    row += rec.segments.size();
  }
  if (embeddings.rows() != row) {
    throw Error(ErrorCode::data_error, "embedding row count mismatch: expected " + std::to_string(row) +
                                           ", found " + std::to_string(embeddings.rows()));
  }
  if (auto bad = embeddings.first_non_unit_row(kUnitNormTolerance)) {
    throw Error(ErrorCode::data_error, "embedding row " + std::to_string(*bad) + " is not unit norm");
  }
  index.manifest_.dim = embeddings.dim();
  index.manifest_.record_count = records.size();
  index.manifest_.segment_count = row;
  index.manifest_.format_version = kIndexFormatVersion;
  index.manifest_.embedder_tag = std::move(embedder_tag);
  index.manifest_.checksum = payload_checksum(embeddings);
  index.records_ = std::move(records);
  index.embeddings_ = std::move(embeddings);
  return index;
}

RowMatrixView CorpusIndex::segment_embeddings(std::size_t record_idx) const {
  if (record_idx >= records_.size()) {
    throw Error(ErrorCode::out_of_range, "record index " + std::to_string(record_idx) +
                                             " out of range (size " + std::to_string(records_.size()) + ")");
  }
  const auto& span = offsets_[record_idx];
  return embeddings_.view(span.start_row, span.length);
}

std::vector<NarrationRecord> parse_narrations(std::istream& in) {
  std::vector<NarrationRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    try {
      const json j = json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("line is not a JSON object");
      const auto& id = j.at("video_id");
      const auto& segs = j.at("segments");
      if (!id.is_string()) throw std::invalid_argument("video_id must be a string");
      if (!segs.is_array()) throw std::invalid_argument("segments must be an array");
      NarrationRecord rec{id.get<std::string>(), {}};
      rec.segments.reserve(segs.size());
      for (const auto& s : segs) rec.segments.push_back(parse_segment(s));
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::parse_error,
                  "narrations line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

EmbeddingMatrix normalize_precomputed(const EmbeddingMatrix& matrix, std::size_t& renormalized) {
  renormalized = 0;
  std::vector<float> values(matrix.values().begin(), matrix.values().end());
  const std::size_t d = matrix.dim();
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    const double norm = row_norm(matrix.row(r));
    const double dev = std::abs(norm - 1.0);
    if (dev <= kUnitNormTolerance) continue;
    if (!(dev <= kRenormalizeTolerance)) {
      throw Error(ErrorCode::data_error, "precomputed embedding row " + std::to_string(r) +
                                             " has norm " + std::to_string(norm) + ", too far from 1");
    }
    for (std::size_t c = 0; c < d; ++c) {
      values[r * d + c] = static_cast<float>(matrix.row(r)[c] / norm);
    }
    ++renormalized;
  }
  return EmbeddingMatrix(d, std::move(values));
}

IngestResult ingest_records(std::vector<NarrationRecord> raw, std::optional<EmbeddingMatrix> precomputed,
                            const Embedder& embedder) {
  IngestReport report;
  report.records_read = raw.size();
  const std::size_t raw_segments = std::accumulate(
      raw.begin(), raw.end(), std::size_t{0},
      [](std::size_t acc, const NarrationRecord& r) { return acc + r.segments.size(); });

  if (precomputed) {
    if (precomputed->rows() != raw_segments) {
      throw Error(ErrorCode::data_error, "embedding row count mismatch: expected " +
                                             std::to_string(raw_segments) + ", found " +
                                             std::to_string(precomputed->rows()));
    }
    if (precomputed->dim() != embedder.dim()) {
      throw Error(ErrorCode::data_error, "embedding dim mismatch: embedder " +
                                             std::to_string(embedder.dim()) + ", file " +
                                             std::to_string(precomputed->dim()));
    }
    precomputed = normalize_precomputed(*precomputed, report.renormalized_rows);
  }

  const std::size_t d = embedder.dim();
  std::vector<NarrationRecord> kept;
  std::vector<float> values;
  std::unordered_set<std::string> ids;
  std::size_t raw_row = 0;
  for (auto& rec : raw) {
    const std::size_t first_row = raw_row;
    raw_row += rec.segments.size();
    if (rec.segments.empty()) {
      ++report.dropped_empty_records;
      continue;
    }
    std::vector<std::size_t> order(rec.segments.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto& sa = rec.segments[a];
      const auto& sb = rec.segments[b];
      return std::pair(sa.start_s, sa.end_s) < std::pair(sb.start_s, sb.end_s);
    });

    NarrationRecord clean{rec.video_id, {}};
    std::vector<std::size_t> rows;
    for (std::size_t idx : order) {
      if (is_blank(rec.segments[idx].text)) continue;
      clean.segments.push_back(std::move(rec.segments[idx]));
      rows.push_back(first_row + idx);
    }
    if (clean.segments.empty()) {
      ++report.dropped_blank_records;
      continue;
    }
    report.dropped_blank_segments += rec.segments.size() - clean.segments.size();
    if (!ids.insert(clean.video_id).second) {
      throw Error(ErrorCode::data_error, "duplicate video_id '" + clean.video_id + "'");
    }
    for (std::size_t k = 0; k < clean.segments.size(); ++k) {
      if (precomputed) {
        const auto row = precomputed->row(rows[k]);
        values.insert(values.end(), row.begin(), row.end());
      } else {
        const auto v = embedder.embed(clean.segments[k].text);
        if (v.size() != d) throw Error(ErrorCode::data_error, "embedder returned wrong dim");
        values.insert(values.end(), v.begin(), v.end());
      }
    }
    kept.push_back(std::move(clean));
  }
  return {CorpusIndex::build(std::move(kept), EmbeddingMatrix(d, std::move(values)), embedder.name()),
          report};
}

IngestResult ingest_corpus(const fs::path& narrations_file, const EmbeddingSource& embeddings_source,
                           const Embedder& embedder) {
  std::ifstream in(narrations_file);
  if (!in) throw Error(ErrorCode::io_error, "cannot open narrations file " + narrations_file.string());
  auto raw = parse_narrations(in);
  std::optional<EmbeddingMatrix> precomputed;
  if (const auto* path = std::get_if<fs::path>(&embeddings_source)) {
    precomputed = read_embedding_file(*path);
  }
  return ingest_records(std::move(raw), std::move(precomputed), embedder);
}

std::uint64_t payload_checksum(const EmbeddingMatrix& matrix) {
  return fnv1a(payload_bytes(matrix.values()));
}

void write_embedding_blob(std::ostream& out, const EmbeddingMatrix& matrix) {
  out.write(kBlobMagic.data(), kBlobMagic.size());
  put_le<std::uint32_t>(out, kBlobVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.dim()));
  put_le<std::uint64_t>(out, matrix.rows());
  const auto bytes = payload_bytes(matrix.values());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  put_le<std::uint64_t>(out, fnv1a(bytes));
  if (!out) throw Error(ErrorCode::io_error, "failed writing embedding blob");
}

EmbeddingMatrix read_embedding_blob(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kBlobMagic) {
    throw Error(ErrorCode::data_error, "not an embedding blob (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kBlobVersion) {
    throw Error(ErrorCode::version_mismatch, "embedding blob version " + std::to_string(version) +
                                                 ", expected " + std::to_string(kBlobVersion));
  }
  const auto dim = get_le<std::uint32_t>(in, "dim");
  const auto rows = get_le<std::uint64_t>(in, "row count");
  if (dim == 0) throw Error(ErrorCode::data_error, "embedding blob has dim 0");
  if (rows > (std::uint64_t{1} << 40) / dim) {
    throw Error(ErrorCode::data_error, "embedding blob header declares an implausible size");
  }
  const std::size_t count = static_cast<std::size_t>(rows) * dim;
  std::vector<unsigned char> bytes(count * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw Error(ErrorCode::data_error, "embedding blob truncated: expected " +
                                           std::to_string(bytes.size()) + " payload bytes, found " +
                                           std::to_string(in.gcount()));
  }
  const auto stored = get_le<std::uint64_t>(in, "checksum");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::data_error, "embedding blob has trailing bytes");
  }
  if (stored != fnv1a(bytes)) throw Error(ErrorCode::checksum_mismatch, "embedding blob checksum mismatch");

  std::vector<float> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), bytes.data(), bytes.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
  }
  return EmbeddingMatrix(dim, std::move(values));
}

void write_embedding_file(const fs::path& path, const EmbeddingMatrix& matrix) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  write_embedding_blob(out, matrix);
}

EmbeddingMatrix read_embedding_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open embedding file " + path.string());
  return read_embedding_blob(in);
}

void write_index(const CorpusIndex& index, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());

  write_embedding_file(dir / kEmbeddingsFile, index.embeddings());

  std::ofstream records(dir / kRecordsFile, std::ios::trunc);
  if (!records) throw Error(ErrorCode::io_error, "cannot write records file in " + dir.string());
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto& rec = index.records()[r];
    json segs = json::array();
    for (const auto& s : rec.segments) segs.push_back(segment_to_json(s));
    json line{{"video_id", rec.video_id},
              {"start_row", index.offsets()[r].start_row},
              {"length", index.offsets()[r].length},
              {"segments", std::move(segs)}};
    records << line.dump() << '\n';
  }
  if (!records) throw Error(ErrorCode::io_error, "failed writing records file");

  const auto& m = index.manifest();
  json manifest{{"format_version", m.format_version},
                {"dim", m.dim},
                {"record_count", m.record_count},
                {"segment_count", m.segment_count},
                {"embedder_tag", m.embedder_tag},
                {"checksum", hex64(m.checksum)}};
  std::ofstream mf(dir / kManifestFile, std::ios::trunc);
  if (!mf) throw Error(ErrorCode::io_error, "cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << '\n';
  if (!mf) throw Error(ErrorCode::io_error, "failed writing manifest");
}

CorpusIndex read_index(const fs::path& dir) {
  std::ifstream mf(dir / kManifestFile);
  if (!mf) throw Error(ErrorCode::io_error, "no manifest.json in " + dir.string());
  IndexManifest m;
  try {
    const json j = json::parse(mf);
    m.format_version = j.at("format_version").get<std::uint32_t>();
    if (m.format_version != kIndexFormatVersion) {
      throw Error(ErrorCode::version_mismatch, "index format version " +
                                                   std::to_string(m.format_version) + ", expected " +
                                                   std::to_string(kIndexFormatVersion));
    }
    m.dim = j.at("dim").get<std::size_t>();
    m.record_count = j.at("record_count").get<std::size_t>();
    m.segment_count = j.at("segment_count").get<std::size_t>();
    m.embedder_tag = j.at("embedder_tag").get<std::string>();
    m.checksum = parse_hex64(j.at("checksum").get<std::string>());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("malformed manifest.json: ") + e.what());
  }

  auto embeddings = read_embedding_file(dir / kEmbeddingsFile);
  if (payload_checksum(embeddings) != m.checksum) {
    throw Error(ErrorCode::checksum_mismatch, "embedding blob does not match manifest checksum");
  }
  if (embeddings.dim() != m.dim) {
    throw Error(ErrorCode::data_error, "embedding dim " + std::to_string(embeddings.dim()) +
                                           " does not match manifest dim " + std::to_string(m.dim));
  }

  std::ifstream rf(dir / kRecordsFile);
  if (!rf) throw Error(ErrorCode::io_error, "no records.jsonl in " + dir.string());
  std::vector<NarrationRecord> records;
  std::vector<RecordSpan> spans;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(rf, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    try {
      const json j = json::parse(line);
      NarrationRecord rec{j.at("video_id").get<std::string>(), {}};
      for (const auto& s : j.at("segments")) rec.segments.push_back(parse_segment(s));
      spans.push_back({j.at("start_row").get<std::size_t>(), j.at("length").get<std::size_t>()});
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::parse_error, "records.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }

  auto index = CorpusIndex::build(std::move(records), std::move(embeddings), m.embedder_tag);
  if (index.offsets() != spans) throw Error(ErrorCode::data_error, "records.jsonl offsets are inconsistent");
  if (index.manifest() != m) throw Error(ErrorCode::data_error, "manifest counts do not match index contents");
  return index;
}

}  // namespace stepground
