#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include "stepground/alignment.hpp"
#include "stepground/corpus_store.hpp"
#include "stepground/embedder.hpp"
#include "stepground/evalkit.hpp"
#include "stepground/grpo_sim.hpp"
#include "stepground/reward.hpp"
#include "stepground/scoring_service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stepground;

namespace {

// Stable exit-code contract.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitPartial = 3;

bool g_json_diagnostics = false;
int g_verbosity = 0;

void diagnose(const std::string& level, const std::string& code, const std::string& message) {
  if (g_json_diagnostics) {
    std::cerr << json{{"level", level}, {"code", code}, {"message", message}}.dump() << "\n";
  } else {
    std::cerr << level << ": " << message << "\n";
  }
}

void info(const std::string& message) {
  if (g_verbosity > 0) diagnose("info", "info", message);
}

// Thrown for flag combinations the parser cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Writes to a file, or to stdout for "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path == "-") return;
    file_.open(path, std::ios::binary | std::ios::trunc);
    if (!file_) throw Error(ErrorCode::io_error, "cannot open '" + path + "' for writing");
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

std::unique_ptr<Embedder> query_embedder(const CorpusIndex& index) {
  auto e = embedder_from_tag(index.manifest().embedder_tag);
  if (!e) {
    throw Error(ErrorCode::data_error, "index embedder '" + index.manifest().embedder_tag +
                                           "' is not built in; text steps cannot be embedded");
  }
  return e;
}

/// Stands in for an external encoder whose vectors were precomputed; it only
/// names the index.
class ExternalEncoder final : public Embedder {
 public:
  ExternalEncoder(std::string tag, std::size_t dim) : tag_(std::move(tag)), dim_(dim) {}
  std::string name() const override { return tag_; }
  std::size_t dim() const override { return dim_; }
  std::vector<float> embed(std::string_view) const override {
    throw Error(ErrorCode::invalid_argument, "external encoder '" + tag_ + "' cannot embed text here");
  }

 private:
  std::string tag_;
  std::size_t dim_;
};

// ---- index build ----

struct IndexBuildArgs {
  std::string narrations;
  std::string embeddings;
  std::string out;
  bool force = false;
  std::size_t dim = HashFeatureEmbedder::kDefaultDim;
  std::uint64_t embed_seed = 7;
  std::string embedder_tag;
};

int run_index_build(const IndexBuildArgs& a) {
  const fs::path out(a.out);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw UsageError("output path '" + a.out + "' exists and is not a directory");
    if (!fs::is_empty(out)) {
      if (!a.force) throw UsageError("output directory '" + a.out + "' is not empty; pass --force to replace it");
      fs::remove_all(out);
    }
  }

  std::unique_ptr<Embedder> embedder;
  EmbeddingSource source = ComputeEmbeddings{};
  if (!a.embeddings.empty()) {
    source = fs::path(a.embeddings);
    if (!a.embedder_tag.empty()) {
      embedder = embedder_from_tag(a.embedder_tag);
      if (!embedder) embedder = std::make_unique<ExternalEncoder>(a.embedder_tag, read_embedding_file(a.embeddings).dim());
    }
  } else if (!a.embedder_tag.empty()) {
    embedder = embedder_from_tag(a.embedder_tag);
    if (!embedder) throw UsageError("embedder '" + a.embedder_tag + "' is not built in; supply --embeddings");
  }
  if (!embedder) embedder = std::make_unique<HashFeatureEmbedder>(a.dim, a.embed_seed);

  const auto result = ingest_corpus(a.narrations, source, *embedder);
  write_index(result.index, out);
  const auto& m = result.index.manifest();
  const auto& r = result.report;
  std::cout << json{{"out", out.string()},
                    {"records", m.record_count},
                    {"segments", m.segment_count},
                    {"dim", m.dim},
                    {"embedder_tag", m.embedder_tag},
                    {"records_read", r.records_read},
                    {"dropped_records", r.dropped_records()},
                    {"dropped_blank_segments", r.dropped_blank_segments},
                    {"renormalized_rows", r.renormalized_rows}}
                   .dump()
            << "\n";
  return kExitOk;
}

// ---- align ----

struct AlignArgs {
  std::string index;
  std::vector<std::string> steps;
  std::size_t top_k = 25;
  double gap = -0.05;
  std::size_t workers = 1;
  bool paths = false;
};

int run_align(const AlignArgs& a) {
  const auto index = read_index(a.index);
  const auto embedder = query_embedder(index);
  AlignConfig cfg;
  cfg.top_k = a.top_k;
  cfg.gap_penalty = a.gap;
  cfg.workers = a.workers;
  const auto seq = StepSequence::embed(*embedder, a.steps);
  const auto result = grounding_score(seq, index, cfg, a.paths);
  json pool = json::array();
  for (const auto& o : result.pool) {
    auto j = to_json(o);
    j["video_id"] = index.records()[o.record_idx].video_id;
    pool.push_back(std::move(j));
  }
  json best = to_json(result.best);
  best["video_id"] = index.records()[result.best.record_idx].video_id;
  std::cout << json{{"score", result.score}, {"best", best}, {"pool", pool}}.dump() << "\n";
  return kExitOk;
}

// ---- score / serve shared options ----

struct ServiceArgs {
  std::string index;
  std::size_t workers = 1;
  std::size_t max_steps = 4096;
  std::size_t top_k = 25;
  double gap = -0.05;
  double tau = 0.10;
  double alpha = 2.0;
  double eps = 1e-6;
};

ServiceDefaults service_defaults(const ServiceArgs& a) {
  ServiceDefaults d;
  d.workers = a.workers;
  d.max_steps = a.max_steps;
  d.align.top_k = a.top_k;
  d.align.gap_penalty = a.gap;
  d.reward.tau = a.tau;
  d.reward.alpha = a.alpha;
  d.reward.eps = a.eps;
  d.align.validate();
  d.reward.validate();
  return d;
}

void add_service_options(CLI::App* cmd, ServiceArgs& a, bool with_env) {
  auto env = [&](CLI::Option* o, const char* name) {
    if (with_env) o->envname(name);
    return o;
  };
  env(cmd->add_option("--index", a.index, "index directory")->required(), "STEPGROUND_INDEX");
  env(cmd->add_option("--workers", a.workers, "worker threads")->capture_default_str(), "STEPGROUND_WORKERS");
  env(cmd->add_option("--max-steps", a.max_steps, "step cap per request")->capture_default_str(),
      "STEPGROUND_MAX_STEPS");
  env(cmd->add_option("--top-k", a.top_k, "stage 1 pool size")->capture_default_str(), "STEPGROUND_TOP_K");
  env(cmd->add_option("--gap", a.gap, "stage 2 gap penalty")->capture_default_str(), "STEPGROUND_GAP");
  env(cmd->add_option("--tau", a.tau, "progress gate")->capture_default_str(), "STEPGROUND_TAU");
  env(cmd->add_option("--alpha", a.alpha, "penalty slope")->capture_default_str(), "STEPGROUND_ALPHA");
  env(cmd->add_option("--eps", a.eps, "gap floor")->capture_default_str(), "STEPGROUND_EPS");
}

struct ScoreArgs {
  ServiceArgs service;
  std::string requests = "-";
  std::string out = "-";
  bool timing = false;
};

int run_score(const ScoreArgs& a) {
  const auto index = read_index(a.service.index);
  ServiceDefaults defaults = service_defaults(a.service);
  // parallelism goes across requests; each request is handled serially
  const std::size_t workers = defaults.workers;
  defaults.workers = 1;
  const Scorer scorer(index, defaults);

  std::vector<std::string> lines;
  {
    std::ifstream file;
    std::istream* in = &std::cin;
    if (a.requests != "-") {
      file.open(a.requests);
      if (!file) throw Error(ErrorCode::io_error, "cannot open '" + a.requests + "'");
      in = &file;
    }
    std::string line;
    while (std::getline(*in, line)) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
    }
  }

  std::vector<json> responses(lines.size());
  parallel_for(lines.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      responses[i] = json::parse(scorer.handle_line(lines[i]));
      if (!a.timing) responses[i].erase("timing_ms");
    }
  });

  Output out(a.out);
  std::size_t failed = 0;
  for (const auto& r : responses) {
    out.stream() << r.dump() << "\n";
    if (!r.value("ok", false)) ++failed;
  }
  out.stream().flush();
  info("scored " + std::to_string(lines.size()) + " requests, " + std::to_string(failed) + " failed");
  if (failed > 0) {
    diagnose("warning", "partial", std::to_string(failed) + " of " + std::to_string(lines.size()) + " requests failed");
    return kExitPartial;
  }
  return kExitOk;
}

// ---- serve ----

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

struct ServeArgs {
  ServiceArgs service;
  std::string bind = "127.0.0.1:7070";
};

int run_serve(const ServeArgs& a) {
  const auto index = read_index(a.service.index);
  Scorer scorer(index, service_defaults(a.service));
  std::mutex log_mutex;
  if (g_verbosity > 0) {
    scorer.set_request_log([&](const json& entry) {
      std::lock_guard lock(log_mutex);
      diagnose("info", "request", entry.dump());
    });
  }
  const auto [host, port] = parse_bind_address(a.bind);
  ScoringServer server(scorer, host, port);
  server.start();
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << json{{"listening", host + ":" + std::to_string(server.port())}, {"health", scorer.healthcheck()}}.dump()
            << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  info("server stopped");
  return kExitOk;
}

// ---- probe ----

struct ProbeArgs {
  std::string connect = "127.0.0.1:7070";
  int timeout_ms = 2000;
  std::string index;
};

int run_probe(const ProbeArgs& a) {
  const auto [host, port] = parse_bind_address(a.connect);
  ScoringClient client(host, port, std::chrono::milliseconds(a.timeout_ms));
  const auto response = client.call(json{{"id", "probe"}, {"op", "health"}});
  if (!response.value("ok", false)) throw Error(ErrorCode::data_error, "health request failed: " + response.dump());
  const auto& health = response.at("health");
  std::cout << health.dump() << "\n";
  if (!a.index.empty()) {
    const auto index = read_index(a.index);
    const auto& m = index.manifest();
    if (health.at("record_count") != m.record_count || health.at("segment_count") != m.segment_count) {
      diagnose("error", "data_error", "server counts do not match index '" + a.index + "'");
      return kExitData;
    }
  }
  return kExitOk;
}

// ---- simulate ----

struct SimulateArgs {
  sim::SimConfig cfg;
  double noise = sim::ProcedureGrammar::default_world().noise;
  std::string curve = "-";
  std::string summary;
  double mode_min_prob = 0.1;
};

json modes_json(const std::vector<sim::CompletionMode>& modes) {
  json out = json::array();
  for (const auto& m : modes) out.push_back(json{{"steps", m.steps}, {"probability", m.probability}});
  return out;
}

int run_simulate(const SimulateArgs& a) {
  auto grammar = sim::ProcedureGrammar::default_world();
  grammar.noise = a.noise;
  const auto simulation = sim::simulate(grammar, a.cfg);
  const auto& result = simulation.result;

  {
    Output out(a.curve);
    out.stream() << "iteration,mean_reward,mean_kl,gate_rate\n";
    out.stream().precision(17);
    for (std::size_t i = 0; i < result.curve.size(); ++i) {
      const auto& s = result.stats[i];
      out.stream() << i << ',' << s.mean_reward << ',' << s.mean_kl << ',' << s.gate_rate << '\n';
    }
  }

  if (!a.summary.empty()) {
    const double first = sim::mean_of_fraction(result.curve, 0.1, false);
    const double last = sim::mean_of_fraction(result.curve, 0.1, true);
    json tasks = json::array();
    for (std::size_t t = 0; t < grammar.tasks.size(); ++t) {
      const auto& task = grammar.tasks[t];
      if (task.swappable.empty()) continue;
      sim::Prompt prompt{t, {task.steps.begin(), task.steps.begin() + static_cast<std::ptrdiff_t>(task.swappable[0])}, {}};
      if (prompt.history.empty()) prompt.history.push_back(task.steps[0]);
      tasks.push_back(json{{"task", task.name},
                           {"history", prompt.history},
                           {"modes", modes_json(sim::completion_modes(result.policy, prompt, a.cfg.horizon,
                                                                      a.mode_min_prob))}});
    }
    // copying the history back should never pay
    sim::RewardEnv env(simulation.world);
    double copy_sum = 0.0;
    for (std::size_t i = 0; i < simulation.world.prompts.size(); ++i) {
      const std::vector<std::vector<sim::StepId>> copy{sim::history_copy_completion(simulation.world.prompts[i])};
      copy_sum += env.score(i, copy)[0].reward;
    }
    const double copy_mean = simulation.world.prompts.empty() ? 0.0 : copy_sum / simulation.world.prompts.size();
    const auto& st = simulation.world.stats;
    Output out(a.summary);
    out.stream() << json{{"seed", a.cfg.seed},
                         {"iterations", a.cfg.iterations},
                         {"learning_rate", a.cfg.learning_rate},
                         {"kl_beta", a.cfg.kl_beta},
                         {"clip_ratio", a.cfg.clip_ratio},
                         {"group_size", a.cfg.group_size},
                         {"batch_size", a.cfg.batch_size},
                         {"narrations", a.cfg.narrations},
                         {"prompts", a.cfg.prompts},
                         {"noise", a.noise},
                         {"first_10pct_mean", first},
                         {"last_10pct_mean", last},
                         {"gain", last - first},
                         {"history_copy_mean_reward", copy_mean},
                         {"world", {{"segments", st.segments_considered},
                                    {"dropped", st.dropped},
                                    {"paraphrased", st.paraphrased}}},
                         {"swappable_tasks", tasks}}
                            .dump(2)
                     << "\n";
  }
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  std::string transcript;
  std::string split_map;
  bool fallback_regex = false;
  std::string label = "model";
  std::string csv;
  std::string json_out;
};

int run_eval(const EvalArgs& a) {
  std::ifstream tin(a.transcript);
  if (!tin) throw Error(ErrorCode::io_error, "cannot open '" + a.transcript + "'");
  std::ifstream sin(a.split_map);
  if (!sin) throw Error(ErrorCode::io_error, "cannot open '" + a.split_map + "'");
  const auto transcript = eval::read_transcript(tin, {a.fallback_regex});
  for (const auto& w : transcript.warnings) {
    diagnose("warning", "transcript", "line " + std::to_string(w.line) + ": " + w.message);
  }
  const auto report = eval::macro_accuracy(transcript.examples, eval::read_split_map(sin));
  if (!a.csv.empty()) {
    Output out(a.csv);
    out.stream() << eval::report_csv(report, a.label);
  }
  if (!a.json_out.empty() || a.csv.empty()) {
    Output out(a.json_out.empty() ? "-" : a.json_out);
    out.stream() << eval::report_json(report).dump() << "\n";
  }
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  return code == ErrorCode::invalid_argument ? kExitUsage : kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Corpus-grounded step alignment, rewards and evaluation tools"};
  app.require_subcommand(1);
  app.add_flag("--json", g_json_diagnostics, "machine-readable diagnostics on stderr");
  app.add_flag("-v,--verbose", g_verbosity, "more diagnostics");

  auto* index_cmd = app.add_subcommand("index", "corpus index operations");
  index_cmd->require_subcommand(1);
  IndexBuildArgs build;
  auto* build_cmd = index_cmd->add_subcommand("build", "ingest narrations into an index directory");
  build_cmd->add_option("--narrations", build.narrations, "line-delimited narration JSON")
      ->required()
      ->check(CLI::ExistingFile);
  build_cmd->add_option("--embeddings", build.embeddings, "precomputed segment embeddings (blob)")
      ->check(CLI::ExistingFile);
  build_cmd->add_option("--out", build.out, "output directory")->required();
  build_cmd->add_flag("--force", build.force, "replace a non-empty output directory");
  build_cmd->add_option("--dim", build.dim, "hash embedder dimension")->capture_default_str()->check(CLI::PositiveNumber);
  build_cmd->add_option("--embed-seed", build.embed_seed, "hash embedder seed")->capture_default_str();
  build_cmd->add_option("--embedder-tag", build.embedder_tag, "embedder name recorded in the manifest");

  AlignArgs align;
  auto* align_cmd = app.add_subcommand("align", "ground a step sequence against an index");
  align_cmd->add_option("--index", align.index, "index directory")->required();
  align_cmd->add_option("--step", align.steps, "step text (repeat in order)")->required();
  align_cmd->add_option("--top-k", align.top_k, "stage 1 pool size")->capture_default_str();
  align_cmd->add_option("--gap", align.gap, "stage 2 gap penalty")->capture_default_str();
  align_cmd->add_option("--workers", align.workers, "stage 1 threads")->capture_default_str();
  align_cmd->add_flag("--paths", align.paths, "include alignment paths");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "score a file of requests offline");
  add_service_options(score_cmd, score.service, false);
  score_cmd->add_option("--requests", score.requests, "request lines ('-' for stdin)")->capture_default_str();
  score_cmd->add_option("--out", score.out, "response lines ('-' for stdout)")->capture_default_str();
  score_cmd->add_flag("--timing", score.timing, "keep timing_ms in responses");

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "run the scoring service");
  add_service_options(serve_cmd, serve.service, true);
  serve_cmd->add_option("--bind", serve.bind, "host:port to listen on")->envname("STEPGROUND_BIND")->capture_default_str();

  ProbeArgs probe;
  auto* probe_cmd = app.add_subcommand("probe", "healthcheck a running service");
  probe_cmd->add_option("--connect", probe.connect, "host:port")->envname("STEPGROUND_BIND")->capture_default_str();
  probe_cmd->add_option("--timeout-ms", probe.timeout_ms, "connect/read timeout")->capture_default_str();
  probe_cmd->add_option("--index", probe.index, "index directory whose counts must match");

  SimulateArgs simulate;
  auto* sim_cmd = app.add_subcommand("simulate", "train the toy policy on a synthetic world");
  auto& c = simulate.cfg;
  sim_cmd->add_option("--seed", c.seed)->capture_default_str();
  sim_cmd->add_option("--iterations", c.iterations)->capture_default_str();
  sim_cmd->add_option("--narrations", c.narrations, "world size")->capture_default_str();
  sim_cmd->add_option("--prompts", c.prompts)->capture_default_str();
  sim_cmd->add_option("--group-size", c.group_size)->capture_default_str();
  sim_cmd->add_option("--batch", c.batch_size)->capture_default_str();
  sim_cmd->add_option("--horizon", c.horizon)->capture_default_str();
  sim_cmd->add_option("--lr", c.learning_rate)->capture_default_str();
  sim_cmd->add_option("--beta", c.kl_beta, "KL weight")->capture_default_str();
  sim_cmd->add_option("--clip", c.clip_ratio)->capture_default_str();
  sim_cmd->add_option("--task-prior", c.task_prior)->capture_default_str();
  sim_cmd->add_option("--workers", c.workers)->capture_default_str();
  sim_cmd->add_option("--noise", simulate.noise)->capture_default_str();
  sim_cmd->add_option("--curve", simulate.curve, "CSV curve output ('-' for stdout)")->capture_default_str();
  sim_cmd->add_option("--summary", simulate.summary, "JSON summary output");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "aggregate a judged transcript into macro accuracy");
  eval_cmd->add_option("--transcript", ev.transcript)->required();
  eval_cmd->add_option("--split-map", ev.split_map)->required();
  eval_cmd->add_flag("--fallback-regex", ev.fallback_regex, "parse raw_output records by key-value regex");
  eval_cmd->add_option("--label", ev.label, "row label for the CSV report")->capture_default_str();
  eval_cmd->add_option("--csv", ev.csv, "CSV report output");
  eval_cmd->add_option("--json-out", ev.json_out, "JSON report output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    diagnose("error", "usage", e.what());
    return kExitUsage;
  }

  try {
    if (*build_cmd) return run_index_build(build);
    if (*align_cmd) return run_align(align);
    if (*score_cmd) return run_score(score);
    if (*serve_cmd) return run_serve(serve);
    if (*probe_cmd) return run_probe(probe);
    if (*sim_cmd) return run_simulate(simulate);
    if (*eval_cmd) return run_eval(ev);
  } catch (const UsageError& e) {
    diagnose("error", "usage", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    diagnose("error", std::string(to_string(e.code())), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    diagnose("error", "internal", e.what());
    return kExitData;
  }
  return kExitUsage;
}
