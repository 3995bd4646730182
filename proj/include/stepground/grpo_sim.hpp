#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stepground/alignment.hpp"
#include "stepground/corpus_store.hpp"
#include "stepground/embedder.hpp"
#include "stepground/reward.hpp"

namespace stepground::sim {

using StepId = std::size_t;

/// Deterministic generator: mt19937_64 with hand-rolled conversions so the
/// draws do not depend on the standard library's distribution classes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();                       ///< [0, 1)
  std::size_t below(std::size_t n);       ///< [0, n)
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream id so sub-streams do not overlap.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct TaskTemplate {
  std::string name;
  std::vector<StepId> steps;
  /// p means steps[p] and steps[p + 1] may appear in either order.
  std::vector<std::size_t> swappable;
};

struct ProcedureGrammar {
  std::vector<std::string> vocab;
  std::vector<TaskTemplate> tasks;
  /// Per-segment probability of a perturbation; half of perturbations drop the
  /// segment, half paraphrase it with a filler word. The first and last
  /// segments of a narration are never dropped.
  double noise = 0.0;
  std::vector<std::string> fillers = {"now", "then", "next", "gently", "quickly"};

  void validate() const;
  std::size_t max_task_length() const;

  /// Three household tasks over a 15-step vocabulary; the first two tasks
  /// carry one swappable pair each.
  static ProcedureGrammar default_world();
};

struct Prompt {
  std::size_t task = 0;
  std::vector<StepId> history;
  std::vector<StepId> reference;  ///< the rest of the ordering the history was cut from
};

struct WorldOptions {
  std::size_t prompt_count = 60;
  // Wide enough that the world's few dozen word tokens rarely share a hash
  // bucket; at 64 a shared bucket can make a restated history look like progress.
  std::size_t embed_dim = 256;
  std::uint64_t embed_seed = 7;
};

struct WorldStats {
  std::size_t segments_considered = 0;
  std::size_t interior_segments = 0;  ///< the only ones a drop can remove
  std::size_t dropped = 0;
  std::size_t paraphrased = 0;
};

struct World {
  ProcedureGrammar grammar;
  HashFeatureEmbedder embedder;
  CorpusIndex index;
  std::vector<Prompt> prompts;
  /// Per record: the template ordering it was emitted from (before drops).
  std::vector<std::vector<StepId>> orderings;
  WorldStats stats;

  StepSequence sequence(std::span<const StepId> steps) const;
};

/// Samples a template ordering, honoring each swappable pair with prob 1/2.
std::vector<StepId> sample_ordering(const TaskTemplate& task, Rng& rng);

World generate_world(const ProcedureGrammar& grammar, std::size_t n_narrations, std::uint64_t seed,
                     const WorldOptions& options = {});

/// Tabular softmax policy over (task, absolute position, previous step).
///
/// Token ids 0..vocab-1 are steps and `end_token()` stops the completion.
/// The previous-step context `no_previous()` is used when nothing precedes.
class ToyPolicy {
 public:
  ToyPolicy(std::size_t tasks, std::size_t positions, std::size_t vocab, double temperature = 1.0);

  std::size_t tasks() const { return tasks_; }
  std::size_t positions() const { return positions_; }
  std::size_t vocab() const { return vocab_; }
  std::size_t token_count() const { return vocab_ + 1; }
  std::size_t end_token() const { return vocab_; }
  std::size_t no_previous() const { return vocab_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t);

  std::size_t context_offset(std::size_t task, std::size_t position, std::size_t prev) const;
  std::span<double> logits(std::size_t task, std::size_t position, std::size_t prev);
  std::span<const double> logits(std::size_t task, std::size_t position, std::size_t prev) const;
  std::vector<double> probabilities(std::size_t task, std::size_t position, std::size_t prev) const;

  std::vector<double>& table() { return logits_; }
  const std::vector<double>& table() const { return logits_; }

 private:
  std::size_t tasks_;
  std::size_t positions_;
  std::size_t vocab_;
  double temperature_;
  std::vector<double> logits_;
};

std::vector<double> softmax(std::span<const double> logits, double temperature);

/// One sampled completion: emitted tokens (possibly ending in END) and the
/// step ids among them.
struct Trajectory {
  std::vector<std::size_t> tokens;
  std::vector<StepId> steps;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

std::vector<Trajectory> rollout(const ToyPolicy& policy, const Prompt& prompt, std::size_t G,
                                std::size_t horizon, std::uint64_t seed);

struct SimConfig {
  std::size_t group_size = 4;
  double kl_beta = 0.04;
  double clip_ratio = 0.30;
  double learning_rate = 5.0;
  std::size_t iterations = 300;
  std::uint64_t seed = 1;
  std::size_t horizon = 6;
  std::size_t batch_size = 8;
  std::size_t narrations = 500;
  std::size_t prompts = 60;
  std::size_t workers = 1;
  /// Logit bonus that the initial and reference policies give to the steps of
  /// the prompt's task (in any order) and to END. Stands in for a base model
  /// that knows which actions belong to a task but not how to sequence them.
  double task_prior = 2.0;

  void validate() const;
};

/// One prompt's group: its sampled completions and their advantages.
struct GroupSample {
  const Prompt* prompt = nullptr;
  std::vector<Trajectory> completions;
  std::vector<double> advantages;
};

/// Clipped-ratio surrogate with a reverse-KL penalty to `ref`:
/// mean over groups and completions of the per-token mean of
/// min(r A, clip(r, 1-eps, 1+eps) A) - beta * KL(pi(.|ctx) || ref(.|ctx)),
/// with r = pi(a|ctx) / old(a|ctx).
double surrogate_objective(const ToyPolicy& policy, const ToyPolicy& old_policy, const ToyPolicy& ref,
                           std::span<const GroupSample> groups, const SimConfig& cfg);

/// Analytic gradient of surrogate_objective with respect to policy.table().
std::vector<double> surrogate_gradient(const ToyPolicy& policy, const ToyPolicy& old_policy,
                                       const ToyPolicy& ref, std::span<const GroupSample> groups,
                                       const SimConfig& cfg);

/// Memoized reward oracle for a world's prompts.
class RewardEnv {
 public:
  RewardEnv(const World& world, AlignConfig acfg = {}, RewardConfig rcfg = {});

  /// Rewards for a set of completions of one prompt, in input order.
  std::vector<RewardBreakdown> score(std::size_t prompt_idx, std::span<const std::vector<StepId>> completions);

  /// Scores several groups at once; prompt groups are processed in parallel.
  std::vector<std::vector<RewardBreakdown>> score_batch(
      std::span<const std::size_t> prompt_ids,
      std::span<const std::vector<std::vector<StepId>>> completions, std::size_t workers);

  const World& world() const { return world_; }

 private:
  const World& world_;
  AlignConfig acfg_;
  RewardConfig rcfg_;
  std::map<std::pair<std::size_t, std::vector<StepId>>, RewardBreakdown> memo_;
};

struct StepStats {
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double gate_rate = 0.0;
};

struct StepResult {
  ToyPolicy policy;
  StepStats stats;
  std::vector<GroupSample> groups;
};

/// Step size actually applied: learning_rate / (1 + learning_rate * kl_beta).
double effective_step(const SimConfig& cfg);

/// One GRPO update on a batch of prompts: rollout, reward, standardize,
/// single gradient-ascent step on the surrogate.
StepResult grpo_step(const ToyPolicy& policy, const ToyPolicy& ref, std::span<const std::size_t> batch,
                     RewardEnv& env, const SimConfig& cfg, std::uint64_t seed);

ToyPolicy make_policy(const World& world, const SimConfig& cfg);

struct TrainResult {
  std::vector<double> curve;  ///< mean batch reward per iteration
  std::vector<StepStats> stats;
  ToyPolicy policy;
};

TrainResult train(const World& world, const SimConfig& cfg, const AlignConfig& acfg = {},
                  const RewardConfig& rcfg = {});

/// Generates the world from cfg (narrations, prompts, seed) and trains on it.
struct Simulation {
  World world;
  TrainResult result;
};
Simulation simulate(const ProcedureGrammar& grammar, const SimConfig& cfg, const AlignConfig& acfg = {},
                    const RewardConfig& rcfg = {});

struct CompletionMode {
  std::vector<StepId> steps;
  double probability = 0.0;
};

/// Every completion whose probability is at least min_prob, most likely first.
std::vector<CompletionMode> completion_modes(const ToyPolicy& policy, const Prompt& prompt,
                                             std::size_t horizon, double min_prob);

/// Canned reward-hacking completion: the history restated verbatim.
std::vector<StepId> history_copy_completion(const Prompt& prompt);

double mean_of_fraction(std::span<const double> curve, double fraction, bool from_end);

}  // namespace stepground::sim
