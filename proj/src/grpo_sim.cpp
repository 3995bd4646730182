#include "stepground/grpo_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace stepground::sim {

namespace {

struct TokenContext {
  std::size_t task;
  std::size_t position;
  std::size_t prev;
};

TokenContext context_of(const Prompt& prompt, const Trajectory& traj, std::size_t t) {
  const std::size_t prev = t == 0 ? prompt.history.back() : traj.steps[t - 1];
  return {prompt.task, prompt.history.size() + t, prev};
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(q[j]));
  }
  return kl;
}

std::string paraphrase(const ProcedureGrammar& g, StepId step, Rng& rng) {
  return g.fillers[rng.below(g.fillers.size())] + " " + g.vocab[step];
}

}  // namespace

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::below(std::size_t n) {
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void ProcedureGrammar::validate() const {
  if (vocab.empty()) throw Error(ErrorCode::invalid_argument, "grammar vocab is empty");
  if (tasks.empty()) throw Error(ErrorCode::invalid_argument, "grammar has no tasks");
  if (!(noise >= 0.0 && noise <= 1.0)) throw Error(ErrorCode::invalid_argument, "noise must be in [0, 1]");
  if (noise > 0.0 && fillers.empty()) throw Error(ErrorCode::invalid_argument, "noise needs paraphrase fillers");
  for (const auto& t : tasks) {
    if (t.steps.size() < 3) throw Error(ErrorCode::invalid_argument, "task '" + t.name + "' has fewer than 3 steps");
    for (StepId s : t.steps) {
      if (s >= vocab.size()) throw Error(ErrorCode::invalid_argument, "task '" + t.name + "' uses unknown step");
    }
    std::set<std::size_t> used;
    for (std::size_t p : t.swappable) {
      if (p + 1 >= t.steps.size()) throw Error(ErrorCode::invalid_argument, "swappable pair out of range");
      if (!used.insert(p).second || !used.insert(p + 1).second) {
        throw Error(ErrorCode::invalid_argument, "task '" + t.name + "' has overlapping swappable pairs");
      }
    }
  }
}

std::size_t ProcedureGrammar::max_task_length() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n = std::max(n, t.steps.size());
  return n;
}

ProcedureGrammar ProcedureGrammar::default_world() {
  ProcedureGrammar g;
  g.vocab = {
      // omelette
      "crack eggs", "whisk yolks thoroughly", "melt butter", "pour batter", "fold omelette",
      // tire change
      "engage parking brake", "loosen lug nuts", "jack vehicle upward", "swap flat tire", "tighten bolts",
      // planting
      "dig hole", "add compost", "place seedling", "cover roots soil", "water generously",
  };
  g.tasks = {
      {"make omelette", {0, 1, 2, 3, 4}, {1}},
      {"change tire", {5, 6, 7, 8, 9}, {1}},
      {"plant seedling", {10, 11, 12, 13, 14}, {}},
  };
  g.noise = 0.2;
  return g;
}

StepSequence World::sequence(std::span<const StepId> steps) const {
  std::vector<std::string> texts;
  texts.reserve(steps.size());
  for (StepId s : steps) texts.push_back(grammar.vocab.at(s));
  return StepSequence::embed(embedder, std::move(texts));
}

std::vector<StepId> sample_ordering(const TaskTemplate& task, Rng& rng) {
  auto order = task.steps;
  for (std::size_t p : task.swappable) {
    if (rng.bernoulli(0.5)) std::swap(order[p], order[p + 1]);
  }
  return order;
}

World generate_world(const ProcedureGrammar& grammar, std::size_t n_narrations, std::uint64_t seed,
                     const WorldOptions& options) {
  grammar.validate();
  if (n_narrations < 1) throw Error(ErrorCode::invalid_argument, "generate_world needs n_narrations >= 1");

  Rng rng(derive_seed(seed, 1));
  WorldStats stats;
  std::vector<NarrationRecord> records;
  std::vector<std::vector<StepId>> orderings;
  records.reserve(n_narrations);
  for (std::size_t n = 0; n < n_narrations; ++n) {
    const std::size_t task = rng.below(grammar.tasks.size());
    auto order = sample_ordering(grammar.tasks[task], rng);
    NarrationRecord rec{"sim-" + std::to_string(task) + "-" + std::to_string(n), {}};
    double t = 0.0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const StepId step = order[pos];
      const bool interior = pos > 0 && pos + 1 < order.size();
      ++stats.segments_considered;
      if (interior) ++stats.interior_segments;
      std::string text = grammar.vocab[step];
      if (rng.bernoulli(grammar.noise)) {
        // Narrations keep their opening and closing steps, so a drawn drop
        // on an endpoint leaves the segment untouched.
        if (rng.bernoulli(0.5)) {
          if (interior) {
            ++stats.dropped;
            continue;
          }
        } else {
          ++stats.paraphrased;
          text = paraphrase(grammar, step, rng);
        }
      }
      const double duration = 2.0 + 6.0 * rng.uniform();
      rec.segments.push_back({t, t + duration, std::move(text)});
      t += duration + rng.uniform();
    }
    records.push_back(std::move(rec));
    orderings.push_back(std::move(order));
  }

  HashFeatureEmbedder embedder(options.embed_dim, options.embed_seed);
  auto ingested = ingest_records(std::move(records), std::nullopt, embedder);

  Rng prompt_rng(derive_seed(seed, 2));
  std::vector<Prompt> prompts;
  prompts.reserve(options.prompt_count);
  for (std::size_t p = 0; p < options.prompt_count; ++p) {
    const std::size_t task = prompt_rng.below(grammar.tasks.size());
    auto order = sample_ordering(grammar.tasks[task], prompt_rng);
    const std::size_t cut = 1 + prompt_rng.below(order.size() - 1);
    prompts.push_back({task, std::vector<StepId>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut)),
                       std::vector<StepId>(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end())});
  }

  return World{grammar, embedder, std::move(ingested.index), std::move(prompts), std::move(orderings), stats};
}

ToyPolicy::ToyPolicy(std::size_t tasks, std::size_t positions, std::size_t vocab, double temperature)
    : tasks_(tasks), positions_(positions), vocab_(vocab), temperature_(temperature) {
  if (tasks == 0 || positions == 0 || vocab == 0) {
    throw Error(ErrorCode::invalid_argument, "policy dimensions must be positive");
  }
  set_temperature(temperature);
  logits_.assign(tasks_ * positions_ * (vocab_ + 1) * token_count(), 0.0);
}

void ToyPolicy::set_temperature(double t) {
  if (!(t > 0.0)) throw Error(ErrorCode::invalid_argument, "temperature must be positive");
  temperature_ = t;
}

std::size_t ToyPolicy::context_offset(std::size_t task, std::size_t position, std::size_t prev) const {
  if (task >= tasks_ || position >= positions_ || prev > vocab_) {
    throw Error(ErrorCode::out_of_range, "policy context out of range");
  }
  return ((task * positions_ + position) * (vocab_ + 1) + prev) * token_count();
}

std::span<double> ToyPolicy::logits(std::size_t task, std::size_t position, std::size_t prev) {
  return std::span<double>(logits_).subspan(context_offset(task, position, prev), token_count());
}

std::span<const double> ToyPolicy::logits(std::size_t task, std::size_t position, std::size_t prev) const {
  return std::span<const double>(logits_).subspan(context_offset(task, position, prev), token_count());
}

std::vector<double> ToyPolicy::probabilities(std::size_t task, std::size_t position, std::size_t prev) const {
  return softmax(logits(task, position, prev), temperature_);
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    p[j] = std::exp((logits[j] - top) / temperature);
    z += p[j];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<Trajectory> rollout(const ToyPolicy& policy, const Prompt& prompt, std::size_t G,
                                std::size_t horizon, std::uint64_t seed) {
  if (G < 2) throw Error(ErrorCode::invalid_argument, "rollout needs G >= 2");
  if (prompt.history.empty()) throw Error(ErrorCode::invalid_argument, "rollout needs a non-empty history");
  Rng rng(seed);
  std::vector<Trajectory> out(G);
  for (auto& traj : out) {
    for (std::size_t t = 0; t < horizon; ++t) {
      const auto ctx = context_of(prompt, traj, t);
      if (ctx.position >= policy.positions()) break;
      const auto p = policy.probabilities(ctx.task, ctx.position, ctx.prev);
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t token = p.size() - 1;
      for (std::size_t j = 0; j < p.size(); ++j) {
        acc += p[j];
        if (u < acc) {
          token = j;
          break;
        }
      }
      traj.tokens.push_back(token);
      if (token == policy.end_token()) break;
      traj.steps.push_back(token);
    }
  }
  return out;
}

void SimConfig::validate() const {
  if (group_size < 2) throw Error(ErrorCode::invalid_argument, "group_size must be >= 2");
  if (!(kl_beta >= 0.0)) throw Error(ErrorCode::invalid_argument, "kl_beta must be >= 0");
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw Error(ErrorCode::invalid_argument, "clip_ratio must be in (0, 1)");
  if (!(learning_rate >= 0.0)) throw Error(ErrorCode::invalid_argument, "learning_rate must be >= 0");
  if (horizon < 1) throw Error(ErrorCode::invalid_argument, "horizon must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (prompts < 1) throw Error(ErrorCode::invalid_argument, "need at least one prompt");
}

double surrogate_objective(const ToyPolicy& policy, const ToyPolicy& old_policy, const ToyPolicy& ref,
                           std::span<const GroupSample> groups, const SimConfig& cfg) {
  double total = 0.0;
  for (const auto& group : groups) {
    const double group_weight = 1.0 / (static_cast<double>(groups.size()) * group.completions.size());
    for (std::size_t g = 0; g < group.completions.size(); ++g) {
      const auto& traj = group.completions[g];
      if (traj.tokens.empty()) continue;
      const double w = group_weight / static_cast<double>(traj.tokens.size());
      const double A = group.advantages[g];
      for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        const auto ctx = context_of(*group.prompt, traj, t);
        const auto p = policy.probabilities(ctx.task, ctx.position, ctx.prev);
        const auto p_old = old_policy.probabilities(ctx.task, ctx.position, ctx.prev);
        const auto q = ref.probabilities(ctx.task, ctx.position, ctx.prev);
        const std::size_t a = traj.tokens[t];
        const double r = p[a] / p_old[a];
        const double clipped = std::clamp(r, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        total += w * (std::min(r * A, clipped * A) - cfg.kl_beta * kl_divergence(p, q));
      }
    }
  }
  return total;
}

std::vector<double> surrogate_gradient(const ToyPolicy& policy, const ToyPolicy& old_policy,
                                       const ToyPolicy& ref, std::span<const GroupSample> groups,
                                       const SimConfig& cfg) {
  std::vector<double> grad(policy.table().size(), 0.0);
  const double inv_t = 1.0 / policy.temperature();
  for (const auto& group : groups) {
    const double group_weight = 1.0 / (static_cast<double>(groups.size()) * group.completions.size());
    for (std::size_t g = 0; g < group.completions.size(); ++g) {
      const auto& traj = group.completions[g];
      if (traj.tokens.empty()) continue;
      const double w = group_weight / static_cast<double>(traj.tokens.size());
      const double A = group.advantages[g];
      for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        const auto ctx = context_of(*group.prompt, traj, t);
        const std::size_t base = policy.context_offset(ctx.task, ctx.position, ctx.prev);
        const auto p = policy.probabilities(ctx.task, ctx.position, ctx.prev);
        const auto p_old = old_policy.probabilities(ctx.task, ctx.position, ctx.prev);
        const auto q = ref.probabilities(ctx.task, ctx.position, ctx.prev);
        const std::size_t a = traj.tokens[t];
        const double r = p[a] / p_old[a];
        const double clipped = std::clamp(r, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        // The unclipped branch carries the gradient whenever it is the minimum.
        if (r * A <= clipped * A) {
          for (std::size_t j = 0; j < p.size(); ++j) {
            grad[base + j] += w * A * r * ((j == a ? 1.0 : 0.0) - p[j]) * inv_t;
          }
        }
        if (cfg.kl_beta > 0.0) {
          const double kl = kl_divergence(p, q);
          for (std::size_t j = 0; j < p.size(); ++j) {
            if (p[j] <= 0.0) continue;
            grad[base + j] -= w * cfg.kl_beta * p[j] * (std::log(p[j]) - std::log(q[j]) - kl) * inv_t;
          }
        }
      }
    }
  }
  return grad;
}

RewardEnv::RewardEnv(const World& world, AlignConfig acfg, RewardConfig rcfg)
    : world_(world), acfg_(acfg), rcfg_(rcfg) {
  acfg_.validate();
  rcfg_.validate();
}

std::vector<RewardBreakdown> RewardEnv::score(std::size_t prompt_idx,
                                              std::span<const std::vector<StepId>> completions) {
  const std::vector<std::vector<StepId>> copy(completions.begin(), completions.end());
  const std::size_t ids[] = {prompt_idx};
  return score_batch(ids, std::span(&copy, 1), 1).front();
}

std::vector<std::vector<RewardBreakdown>> RewardEnv::score_batch(
    std::span<const std::size_t> prompt_ids, std::span<const std::vector<std::vector<StepId>>> completions,
    std::size_t workers) {
  // Collect distinct unseen (prompt, completion) keys per group.
  std::vector<std::vector<std::vector<StepId>>> pending(prompt_ids.size());
  std::set<std::pair<std::size_t, std::vector<StepId>>> queued;
  for (std::size_t b = 0; b < prompt_ids.size(); ++b) {
    for (const auto& c : completions[b]) {
      auto key = std::make_pair(prompt_ids[b], c);
      if (memo_.contains(key) || queued.contains(key)) continue;
      queued.insert(key);
      pending[b].push_back(c);
    }
  }

  std::vector<std::vector<RewardBreakdown>> fresh(prompt_ids.size());
  parallel_for(prompt_ids.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      if (pending[b].empty()) continue;
      const auto& prompt = world_.prompts.at(prompt_ids[b]);
      const auto history = world_.sequence(prompt.history);
      std::vector<StepSequence> seqs;
      seqs.reserve(pending[b].size());
      for (const auto& c : pending[b]) seqs.push_back(world_.sequence(c));
      fresh[b] = compute_group_rewards(history, seqs, world_.index, acfg_, rcfg_);
    }
  });

  for (std::size_t b = 0; b < prompt_ids.size(); ++b) {
    for (std::size_t i = 0; i < pending[b].size(); ++i) {
      memo_.emplace(std::make_pair(prompt_ids[b], pending[b][i]), fresh[b][i]);
    }
  }

  std::vector<std::vector<RewardBreakdown>> out(prompt_ids.size());
  for (std::size_t b = 0; b < prompt_ids.size(); ++b) {
    for (const auto& c : completions[b]) out[b].push_back(memo_.at({prompt_ids[b], c}));
  }
  return out;
}

double effective_step(const SimConfig& cfg) {
  return cfg.learning_rate / (1.0 + cfg.learning_rate * cfg.kl_beta);
}

StepResult grpo_step(const ToyPolicy& policy, const ToyPolicy& ref, std::span<const std::size_t> batch,
                     RewardEnv& env, const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& prompts = env.world().prompts;
  std::vector<GroupSample> groups(batch.size());
  std::vector<std::vector<std::vector<StepId>>> step_lists(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    groups[b].prompt = &prompts.at(batch[b]);
    groups[b].completions = rollout(policy, *groups[b].prompt, cfg.group_size, cfg.horizon, derive_seed(seed, b));
    for (const auto& traj : groups[b].completions) step_lists[b].push_back(traj.steps);
  }

  const auto rewards = env.score_batch(batch, step_lists, cfg.workers);

  StepStats stats;
  std::size_t scored = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<double> r;
    for (const auto& br : rewards[b]) {
      r.push_back(br.reward);
      stats.mean_reward += br.reward;
      stats.gate_rate += br.gated ? 1.0 : 0.0;
      ++scored;
    }
    groups[b].advantages = group_advantages(r).advantages;
  }
  stats.mean_reward /= static_cast<double>(scored);
  stats.gate_rate /= static_cast<double>(scored);

  // Mean per-token KL to the reference, weighted like the surrogate.
  for (const auto& group : groups) {
    const double gw = 1.0 / (static_cast<double>(groups.size()) * group.completions.size());
    for (const auto& traj : group.completions) {
      for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        const auto ctx = context_of(*group.prompt, traj, t);
        stats.mean_kl += gw / static_cast<double>(traj.tokens.size()) *
                         kl_divergence(policy.probabilities(ctx.task, ctx.position, ctx.prev),
                                       ref.probabilities(ctx.task, ctx.position, ctx.prev));
      }
    }
  }

  ToyPolicy next = policy;
  if (cfg.learning_rate > 0.0) {
    // Plain ascent along the exact gradient, with the step shrunk as the KL
    // weight grows so a stiff penalty cannot make the update overshoot.
    const auto grad = surrogate_gradient(policy, policy, ref, groups, cfg);
    const double step = effective_step(cfg);
    auto& table = next.table();
    for (std::size_t i = 0; i < table.size(); ++i) table[i] += step * grad[i];
  }
  return {std::move(next), stats, std::move(groups)};
}

ToyPolicy make_policy(const World& world, const SimConfig& cfg) {
  ToyPolicy policy(world.grammar.tasks.size(), world.grammar.max_task_length() + cfg.horizon,
                   world.grammar.vocab.size());
  if (cfg.task_prior != 0.0) {
    for (std::size_t task = 0; task < policy.tasks(); ++task) {
      for (std::size_t pos = 0; pos < policy.positions(); ++pos) {
        for (std::size_t prev = 0; prev <= policy.vocab(); ++prev) {
          auto logits = policy.logits(task, pos, prev);
          for (StepId s : world.grammar.tasks[task].steps) logits[s] = cfg.task_prior;
          logits[policy.end_token()] = cfg.task_prior;
        }
      }
    }
  }
  return policy;
}

TrainResult train(const World& world, const SimConfig& cfg, const AlignConfig& acfg, const RewardConfig& rcfg) {
  cfg.validate();
  if (world.prompts.empty()) throw Error(ErrorCode::invalid_argument, "world has no prompts");
  RewardEnv env(world, acfg, rcfg);
  const ToyPolicy ref = make_policy(world, cfg);
  TrainResult result{{}, {}, ref};
  Rng batch_rng(derive_seed(cfg.seed, 3));
  std::vector<std::size_t> batch(cfg.batch_size);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (auto& b : batch) b = batch_rng.below(world.prompts.size());
    auto step = grpo_step(result.policy, ref, batch, env, cfg, derive_seed(cfg.seed, 1000 + it));
    result.curve.push_back(step.stats.mean_reward);
    result.stats.push_back(step.stats);
    result.policy = std::move(step.policy);
  }
  return result;
}

Simulation simulate(const ProcedureGrammar& grammar, const SimConfig& cfg, const AlignConfig& acfg,
                    const RewardConfig& rcfg) {
  cfg.validate();
  WorldOptions options;
  options.prompt_count = cfg.prompts;
  auto world = generate_world(grammar, cfg.narrations, cfg.seed, options);
  auto result = train(world, cfg, acfg, rcfg);
  return {std::move(world), std::move(result)};
}

std::vector<CompletionMode> completion_modes(const ToyPolicy& policy, const Prompt& prompt, std::size_t horizon,
                                             double min_prob) {
  std::vector<CompletionMode> modes;
  Trajectory traj;
  auto visit = [&](auto&& self, double prob) -> void {
    const std::size_t t = traj.tokens.size();
    const auto ctx = context_of(prompt, traj, t);
    if (t == horizon || ctx.position >= policy.positions()) {
      modes.push_back({traj.steps, prob});
      return;
    }
    const auto p = policy.probabilities(ctx.task, ctx.position, ctx.prev);
    for (std::size_t token = 0; token < p.size(); ++token) {
      const double next = prob * p[token];
      if (next < min_prob) continue;
      traj.tokens.push_back(token);
      if (token == policy.end_token()) {
        modes.push_back({traj.steps, next});
      } else {
        traj.steps.push_back(token);
        self(self, next);
        traj.steps.pop_back();
      }
      traj.tokens.pop_back();
    }
  };
  visit(visit, 1.0);
  std::stable_sort(modes.begin(), modes.end(),
                   [](const auto& a, const auto& b) { return a.probability > b.probability; });
  return modes;
}

std::vector<StepId> history_copy_completion(const Prompt& prompt) { return prompt.history; }

double mean_of_fraction(std::span<const double> curve, double fraction, bool from_end) {
  if (curve.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(curve.size() * fraction)));
  const auto part = from_end ? curve.last(n) : curve.first(n);
  return std::accumulate(part.begin(), part.end(), 0.0) / static_cast<double>(n);
}

}  // namespace stepground::sim
