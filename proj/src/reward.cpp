#include "stepground/reward.hpp"

#include <algorithm>
#include <cmath>

namespace stepground {

namespace {

constexpr double kStdFloor = 1e-12;

RewardBreakdown finish(const GroundingResult& full, const GroundingResult& hist, const RewardConfig& cfg) {
  auto out = reward_from_scores(full.score, hist.score, cfg);
  out.best_record_full = full.best.record_idx;
  out.best_record_hist = hist.best.record_idx;
  return out;
}

}  // namespace

void RewardConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(ErrorCode::invalid_argument, "tau must be in (0, 1)");
  if (!(alpha > 0.0)) throw Error(ErrorCode::invalid_argument, "alpha must be > 0");
  if (!(eps > 0.0)) throw Error(ErrorCode::invalid_argument, "eps must be > 0");
}

StepSequence concat_steps(const StepSequence& history, const StepSequence& completion) {
  if (history.empty() && completion.empty()) {
    throw Error(ErrorCode::invalid_argument, "concat_steps: both sequences are empty");
  }
  if (history.empty()) return completion;
  if (completion.empty()) return history;
  if (history.dim() != completion.dim()) {
    throw Error(ErrorCode::invalid_argument, "concat_steps: embedding dims differ");
  }
  std::vector<std::string> steps = history.steps();
  steps.insert(steps.end(), completion.steps().begin(), completion.steps().end());
  std::vector<float> values(history.embeddings().values().begin(), history.embeddings().values().end());
  values.insert(values.end(), completion.embeddings().values().begin(), completion.embeddings().values().end());
  return StepSequence(std::move(steps), EmbeddingMatrix(history.dim(), std::move(values)));
}

double relative_progress(double a_full, double a_hist, const RewardConfig& cfg) {
  return (a_full - a_hist) / std::max(1.0 - a_hist, cfg.eps);
}

RewardBreakdown reward_from_scores(double a_full, double a_hist, const RewardConfig& cfg) {
  cfg.validate();
  RewardBreakdown out;
  out.a_full = a_full;
  out.a_hist = a_hist;
  out.rho = relative_progress(a_full, a_hist, cfg);
  out.gated = out.rho >= cfg.tau;
  out.reward = out.gated ? a_full : std::clamp(cfg.alpha * (out.rho - cfg.tau), -1.0, 0.0);
  return out;
}

RewardBreakdown compute_reward(const StepSequence& history, const StepSequence& completion,
                               const CorpusIndex& index, const AlignConfig& acfg, const RewardConfig& rcfg) {
  return compute_group_rewards(history, std::span(&completion, 1), index, acfg, rcfg).front();
}

std::vector<RewardBreakdown> compute_group_rewards(const StepSequence& history,
                                                   std::span<const StepSequence> completions,
                                                   const CorpusIndex& index, const AlignConfig& acfg,
                                                   const RewardConfig& rcfg) {
  rcfg.validate();
  if (history.empty()) {
    throw Error(ErrorCode::invalid_argument, "compute_reward: history must contain at least one step");
  }
  const auto hist = grounding_score(history, index, acfg);
  std::vector<RewardBreakdown> out;
  out.reserve(completions.size());
  for (const auto& completion : completions) {
    out.push_back(reward_with_baseline(hist, history, completion, index, acfg, rcfg));
  }
  return out;
}

RewardBreakdown reward_with_baseline(const GroundingResult& hist, const StepSequence& history,
                                     const StepSequence& completion, const CorpusIndex& index,
                                     const AlignConfig& acfg, const RewardConfig& rcfg) {
  // An empty completion leaves s_full = s_hist, so the baseline is reused.
  if (completion.empty()) return finish(hist, hist, rcfg);
  return finish(grounding_score(concat_steps(history, completion), index, acfg), hist, rcfg);
}

AdvantageGroup group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw Error(ErrorCode::invalid_argument, "group_advantages needs at least 2 rewards, got " +
                                                 std::to_string(rewards.size()));
  }
  AdvantageGroup group;
  group.rewards.assign(rewards.begin(), rewards.end());
  const double n = static_cast<double>(rewards.size());
  double sum = 0.0;
  for (double r : rewards) sum += r;
  group.mean = sum / n;

  const bool all_equal = std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; });
  if (all_equal) {
    group.mean = rewards[0];
    group.std = 0.0;
    group.advantages.assign(rewards.size(), 0.0);
    return group;
  }
  double ss = 0.0;
  for (double r : rewards) ss += (r - group.mean) * (r - group.mean);
  group.std = std::sqrt(ss / n);
  const double denom = std::max(group.std, kStdFloor);
  group.advantages.reserve(rewards.size());
  for (double r : rewards) group.advantages.push_back((r - group.mean) / denom);
  return group;
}

}  // namespace stepground
