#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "stepground/corpus_store.hpp"
#include "stepground/embedder.hpp"

namespace stepground {

/// Ordered steps plus one unit-norm embedding row per step.
class StepSequence {
 public:
  StepSequence() = default;
  StepSequence(std::vector<std::string> steps, EmbeddingMatrix embeddings);

  static StepSequence embed(const Embedder& embedder, std::vector<std::string> steps);

  const std::vector<std::string>& steps() const { return steps_; }
  const EmbeddingMatrix& embeddings() const { return embeddings_; }
  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  std::size_t dim() const { return embeddings_.dim(); }
  RowMatrixView view() const { return embeddings_.view(); }

 private:
  std::vector<std::string> steps_;
  EmbeddingMatrix embeddings_;
};

struct AlignConfig {
  std::size_t top_k = 25;
  double gap_penalty = -0.05;
  double nw_clip_lo = 1e-6;
  double nw_clip_hi = 1.0;
  /// Stage 1 scan threads. Results do not depend on this value.
  std::size_t workers = 1;

  void validate() const;
};

enum class Move { diagonal, vertical, horizontal };

/// One move of a lattice path; (step, segment) is the cell the move lands on,
/// counted as consumed prefix lengths (0..M, 0..L).
struct PathStep {
  std::size_t step = 0;
  std::size_t segment = 0;
  Move move = Move::diagonal;

  friend bool operator==(const PathStep&, const PathStep&) = default;
};

struct NwResult {
  double final_score = 0.0;      ///< F[M][L]
  std::vector<PathStep> path;    ///< forward order, (0,0) excluded, ends at (M,L)
  double normalized = 0.0;       ///< clip(F / max(|path|, 1), lo, hi)
};

struct Stage1Hit {
  std::size_t record_idx = 0;
  double score = 0.0;

  friend bool operator==(const Stage1Hit&, const Stage1Hit&) = default;
};

struct AlignmentOutcome {
  std::size_t record_idx = 0;
  double stage1_score = 0.0;
  std::optional<double> stage2_score;
  std::optional<std::vector<PathStep>> path;
};

struct GroundingResult {
  double score = 0.0;
  AlignmentOutcome best;
  std::vector<AlignmentOutcome> pool;
};

/// (1/M) * best sum of W[i][k_i] over nondecreasing k_1 <= ... <= k_M.
/// O(ML) time, O(L) extra memory.
double mono_coverage(const SimilarityMatrix& W);

/// Top-min(K, |N|) records by mono_coverage, descending, ties to the lower
/// record index. Identical output for any worker count.
std::vector<Stage1Hit> stage1_retrieve(const StepSequence& s, const CorpusIndex& index,
                                       const AlignConfig& cfg);

/// Global alignment on similarities with a linear gap penalty.
///
/// Boundaries pay the gap penalty (F[i][0] = i*g, F[0][k] = k*g). The
/// backtrace prefers diagonal, then vertical (consume a step), then
/// horizontal (consume a segment).
NwResult nw_align(const SimilarityMatrix& W, const AlignConfig& cfg);

/// Two-stage grounding score: Stage 1 pool, Stage 2 re-score, max over pool.
GroundingResult grounding_score(const StepSequence& s, const CorpusIndex& index,
                                const AlignConfig& cfg, bool keep_paths = false);

}  // namespace stepground
