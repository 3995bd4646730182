#include "stepground/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stepground {

namespace {

void require_nonempty(const SimilarityMatrix& W, const char* who) {
  if (W.rows() == 0 || W.cols() == 0) {
    throw Error(ErrorCode::invalid_argument, std::string(who) + ": empty similarity matrix (" +
                                                 std::to_string(W.rows()) + "x" +
                                                 std::to_string(W.cols()) + ")");
  }
}

bool ranks_before(const Stage1Hit& a, const Stage1Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.record_idx < b.record_idx;
}

// Rolling-row form of the coverage recursion over a reusable buffer.
double mono_coverage_rolling(const SimilarityMatrix& W, std::vector<double>& row) {
  const std::size_t M = W.rows();
  const std::size_t L = W.cols();
  row.assign(L, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    const auto w = W.row(i);
    double running = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < L; ++k) {
      running = std::max(running, row[k]);
      row[k] = w[k] + running;
    }
  }
  return *std::max_element(row.begin(), row.end()) / static_cast<double>(M);
}

}  // namespace

StepSequence::StepSequence(std::vector<std::string> steps, EmbeddingMatrix embeddings)
    : steps_(std::move(steps)), embeddings_(std::move(embeddings)) {
  if (embeddings_.rows() != steps_.size()) {
    throw Error(ErrorCode::invalid_argument, "step count " + std::to_string(steps_.size()) +
                                                 " does not match embedding rows " +
                                                 std::to_string(embeddings_.rows()));
  }
  if (auto bad = embeddings_.first_non_unit_row(kUnitNormTolerance)) {
    throw Error(ErrorCode::invalid_argument, "step embedding " + std::to_string(*bad) + " is not unit norm");
  }
}

StepSequence StepSequence::embed(const Embedder& embedder, std::vector<std::string> steps) {
  auto matrix = embed_all(embedder, steps);
  return StepSequence(std::move(steps), std::move(matrix));
}

void AlignConfig::validate() const {
  if (top_k < 1) throw Error(ErrorCode::invalid_argument, "top_k must be >= 1");
  if (!(gap_penalty <= 0.0)) throw Error(ErrorCode::invalid_argument, "gap_penalty must be <= 0");
  if (!(nw_clip_lo > 0.0 && nw_clip_lo < nw_clip_hi && nw_clip_hi <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "need 0 < nw_clip_lo < nw_clip_hi <= 1");
  }
}

double mono_coverage(const SimilarityMatrix& W) {
  require_nonempty(W, "mono_coverage");
  std::vector<double> row;
  return mono_coverage_rolling(W, row);
}

std::vector<Stage1Hit> stage1_retrieve(const StepSequence& s, const CorpusIndex& index,
                                       const AlignConfig& cfg) {
  cfg.validate();
  if (index.empty()) throw Error(ErrorCode::invalid_argument, "stage1_retrieve: corpus index is empty");
  if (s.empty()) throw Error(ErrorCode::invalid_argument, "stage1_retrieve: empty step sequence");
  if (s.dim() != index.dim()) {
    throw Error(ErrorCode::invalid_argument, "query dim " + std::to_string(s.dim()) +
                                                 " does not match index dim " + std::to_string(index.dim()));
  }

  const std::size_t n = index.size();
  std::vector<double> scores(n);
  const auto query = s.view();
  parallel_for(n, cfg.workers, [&](std::size_t begin, std::size_t end) {
    SimilarityMatrix W;
    std::vector<double> row;
    for (std::size_t r = begin; r < end; ++r) {
      similarity_matrix_into(query, index.segment_embeddings(r), W);
      scores[r] = mono_coverage_rolling(W, row);
    }
  });

  std::vector<Stage1Hit> hits(n);
  for (std::size_t r = 0; r < n; ++r) hits[r] = {r, scores[r]};
  const std::size_t k = std::min(cfg.top_k, n);
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), ranks_before);
  hits.resize(k);
  return hits;
}

NwResult nw_align(const SimilarityMatrix& W, const AlignConfig& cfg) {
  require_nonempty(W, "nw_align");
  const std::size_t M = W.rows();
  const std::size_t L = W.cols();
  const double g = cfg.gap_penalty;
  const std::size_t stride = L + 1;
  std::vector<double> F((M + 1) * stride);
  auto at = [&](std::size_t i, std::size_t k) -> double& { return F[i * stride + k]; };

  // Boundaries accumulate one gap at a time, the same way an interior path does.
  at(0, 0) = 0.0;
  for (std::size_t k = 1; k <= L; ++k) at(0, k) = at(0, k - 1) + g;
  for (std::size_t i = 1; i <= M; ++i) {
    at(i, 0) = at(i - 1, 0) + g;
    for (std::size_t k = 1; k <= L; ++k) {
      at(i, k) = std::max({at(i - 1, k - 1) + W(i - 1, k - 1), at(i - 1, k) + g, at(i, k - 1) + g});
    }
  }

  NwResult result;
  result.final_score = at(M, L);
  std::size_t i = M;
  std::size_t k = L;
  while (i > 0 || k > 0) {
    const double here = at(i, k);
    if (i > 0 && k > 0 && at(i - 1, k - 1) + W(i - 1, k - 1) == here) {
      result.path.push_back({i, k, Move::diagonal});
      --i;
      --k;
    } else if (i > 0 && (k == 0 || at(i - 1, k) + g == here)) {
      result.path.push_back({i, k, Move::vertical});
      --i;
    } else {
      result.path.push_back({i, k, Move::horizontal});
      --k;
    }
  }
  std::reverse(result.path.begin(), result.path.end());

  const double steps = static_cast<double>(std::max<std::size_t>(result.path.size(), 1));
  result.normalized = std::clamp(result.final_score / steps, cfg.nw_clip_lo, cfg.nw_clip_hi);
  return result;
}

GroundingResult grounding_score(const StepSequence& s, const CorpusIndex& index, const AlignConfig& cfg,
                                bool keep_paths) {
  const auto hits = stage1_retrieve(s, index, cfg);
  GroundingResult result;
  result.pool.reserve(hits.size());
  SimilarityMatrix W;
  const auto query = s.view();
  std::size_t best = 0;
  for (std::size_t p = 0; p < hits.size(); ++p) {
    similarity_matrix_into(query, index.segment_embeddings(hits[p].record_idx), W);
    auto nw = nw_align(W, cfg);
    AlignmentOutcome outcome{hits[p].record_idx, hits[p].score, nw.normalized, std::nullopt};
    if (keep_paths) outcome.path = std::move(nw.path);
    result.pool.push_back(std::move(outcome));

    const auto& cur = result.pool[p];
    const auto& top = result.pool[best];
    if (*cur.stage2_score > *top.stage2_score ||
        (*cur.stage2_score == *top.stage2_score && cur.record_idx < top.record_idx)) {
      best = p;
    }
  }
  result.best = result.pool[best];
  result.score = *result.best.stage2_score;
  return result;
}

}  // namespace stepground
