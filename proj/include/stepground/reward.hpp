#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stepground/alignment.hpp"

namespace stepground {

struct RewardConfig {
  double tau = 0.10;   ///< progress gate
  double alpha = 2.0;  ///< penalty slope below the gate
  double eps = 1e-6;   ///< floor on the remaining gap 1 - a_hist

  void validate() const;
};

struct RewardBreakdown {
  double a_full = 0.0;
  double a_hist = 0.0;
  double rho = 0.0;
  double reward = 0.0;
  bool gated = false;
  std::size_t best_record_full = 0;
  std::size_t best_record_hist = 0;
};

struct AdvantageGroup {
  std::vector<double> rewards;
  std::vector<double> advantages;
  double mean = 0.0;
  double std = 0.0;
};

/// Step-level concatenation; embedding rows are copied, never recomputed.
StepSequence concat_steps(const StepSequence& history, const StepSequence& completion);

/// rho = (a_full - a_hist) / max(1 - a_hist, eps).
double relative_progress(double a_full, double a_hist, const RewardConfig& cfg);

/// Gated reward: a_full when rho >= tau, else clip(alpha * (rho - tau), -1, 0).
/// Record ids are left at 0.
RewardBreakdown reward_from_scores(double a_full, double a_hist, const RewardConfig& cfg);

RewardBreakdown compute_reward(const StepSequence& history, const StepSequence& completion,
                               const CorpusIndex& index, const AlignConfig& acfg,
                               const RewardConfig& rcfg);

/// Reward for one completion against an already-grounded history.
RewardBreakdown reward_with_baseline(const GroundingResult& hist, const StepSequence& history,
                                     const StepSequence& completion, const CorpusIndex& index,
                                     const AlignConfig& acfg, const RewardConfig& rcfg);

/// Scores a group of completions against one history, grounding the history
/// only once.
std::vector<RewardBreakdown> compute_group_rewards(const StepSequence& history,
                                                   std::span<const StepSequence> completions,
                                                   const CorpusIndex& index, const AlignConfig& acfg,
                                                   const RewardConfig& rcfg);

/// Within-group standardization with the population standard deviation.
/// Groups whose rewards are all equal get zero advantages.
AdvantageGroup group_advantages(std::span<const double> rewards);

}  // namespace stepground
