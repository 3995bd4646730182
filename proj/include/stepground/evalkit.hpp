#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stepground/embedder.hpp"

namespace stepground::eval {

/// The six rubric axes, in reporting order.
enum class Criterion : std::size_t {
  logical_progression,
  temporal_alignment,
  spatial_grounding,
  continuation,
  clarity,
  semantic_alignment,
};

inline constexpr std::size_t kCriteria = 6;
inline constexpr int kMaxScore = 5;
inline constexpr int kFluffCap = 2;
inline constexpr double kMaxTotal = kCriteria * kMaxScore;

std::string_view criterion_key(Criterion c);

using Scores = std::array<int, kCriteria>;

struct PenaltyFlags {
  bool fluff = false;
  bool fatal = false;
};

struct JudgedExample {
  std::string dataset;
  Scores scores{};
  PenaltyFlags flags;
};

/// Fatal zeroes everything; fluff caps semantic alignment and clarity at 2.
/// Raw scores outside 0..5 raise invalid_argument.
JudgedExample apply_penalties(std::string dataset, const Scores& raw, PenaltyFlags flags);

/// sum of the six scores / 30 * 100.
double example_percent(const JudgedExample& example);

/// Dataset name -> split name, in insertion order.
using SplitMap = std::vector<std::pair<std::string, std::string>>;

struct DatasetScore {
  std::string dataset;
  std::string split;
  std::size_t count = 0;
  double percent = 0.0;
};

struct SplitScore {
  std::string split;
  std::vector<std::string> datasets;
  double percent = 0.0;
};

struct MacroReport {
  std::vector<DatasetScore> datasets;  ///< grouped by split, in split-map order
  std::vector<SplitScore> splits;      ///< in order of first appearance in the map
};

/// Per-dataset mean, then unweighted mean over datasets per split.
MacroReport macro_accuracy(const std::vector<JudgedExample>& examples, const SplitMap& split);

/// Same aggregation starting from already-averaged dataset percentages.
MacroReport macro_from_dataset_scores(const std::vector<std::pair<std::string, double>>& scores,
                                      const SplitMap& split);

/// Rounds half away from zero to one decimal.
double round_to_tenth(double value);

nlohmann::json report_json(const MacroReport& report);
/// One header line and one value line: datasets in report order, then one
/// macro column per split.
std::string report_csv(const MacroReport& report, const std::string& label);

struct TranscriptOptions {
  /// Accept records carrying only "raw_output" text, parsed by key-value regex.
  bool fallback_regex = false;
};

struct TranscriptWarning {
  std::size_t line = 0;
  std::string message;
};

struct Transcript {
  std::vector<JudgedExample> examples;
  std::vector<TranscriptWarning> warnings;
};

/// Line-delimited judged records:
/// {"dataset": s, "scores": {<criterion>: int, ...}, "fluff": bool, "fatal": bool}
/// or, with fallback_regex, {"dataset": s, "raw_output": "<judge text>", ...}.
Transcript read_transcript(std::istream& in, const TranscriptOptions& options = {});

/// Extracts `key: value` / `"key": value` integers for every criterion,
/// clamped to [0, 5]; missing keys become 0 and are listed in `missing`.
Scores parse_scores_fallback(std::string_view text, std::vector<std::string>& missing);

SplitMap read_split_map(std::istream& in);

/// Mean of d(i, j) over all unordered pairs i < j. The matrix must be exactly
/// symmetric with entries in [0, 1]; the diagonal is ignored.
double diversity_score(const std::vector<std::vector<double>>& pairwise);

/// Mean of per-prompt diversity scores.
double model_diversity(const std::vector<std::vector<std::vector<double>>>& prompts);

class Taxonomy {
 public:
  Taxonomy(std::vector<std::string> actions, const Embedder& embedder);

  const std::vector<std::string>& actions() const { return actions_; }
  std::size_t size() const { return actions_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(rows_).subspan(i * dim_, dim_);
  }

 private:
  std::vector<std::string> actions_;
  std::size_t dim_ = 0;
  std::vector<float> rows_;
};

/// Argmax of <v, row_a> over taxonomy rows; ties go to the lowest index.
std::size_t nearest_action(std::span<const float> v, const Taxonomy& taxonomy);

std::size_t remap_to_taxonomy(std::string_view step, const Taxonomy& taxonomy, const Embedder& embedder);

}  // namespace stepground::eval
