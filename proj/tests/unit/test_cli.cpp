#include <doctest.h>

#include <array>
#include <cstdio>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

struct ScratchDir {
  fs::path root;
  ScratchDir() {
    std::random_device rd;
    root = fs::temp_directory_path() / ("stepground-cli-" + std::to_string(rd()));
    fs::create_directories(root);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

fs::path scratch(const std::string& name) {
  static const ScratchDir dir;
  return dir.root / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  static int counter = 0;
  const auto err = scratch("stderr-" + std::to_string(counter++));
  const std::string cmd = std::string("'") + STEPGROUND_CLI + "' " + args + " 2>'" + err.string() + "'";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

std::string data(const std::string& name) { return (fs::path(STEPGROUND_TEST_DATA) / name).string(); }

const fs::path& built_index() {
  static const fs::path idx = [] {
    const auto p = scratch("idx");
    const auto r = cli("index build --narrations '" + data("narrations_small.jsonl") + "' --out '" + p.string() + "'");
    REQUIRE(r.code == 0);
    return p;
  }();
  return idx;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("index build reports counts and refuses to clobber") {
  const auto out = scratch("idx-build");
  auto r = cli("index build --narrations '" + data("narrations_small.jsonl") + "' --out '" + out.string() + "'");
  REQUIRE(r.code == 0);
  const auto report = json::parse(r.out);
  CHECK(report["records"] == 3);
  CHECK(report["segments"] == 7);
  CHECK(report["embedder_tag"] == "hashfeat-d64-s7");
  CHECK(fs::exists(out / "records.jsonl"));

  r = cli("index build --narrations '" + data("narrations_small.jsonl") + "' --out '" + out.string() + "'");
  CHECK(r.code == 1);
  CHECK(r.err.find("--force") != std::string::npos);

  r = cli("index build --force --dim 32 --narrations '" + data("narrations_small.jsonl") + "' --out '" + out.string() +
          "'");
  CHECK(r.code == 0);
  CHECK(json::parse(r.out)["dim"] == 32);
}

TEST_CASE("malformed narrations fail with the line number") {
  const auto r = cli("index build --narrations '" + data("narrations_bad_line2.jsonl") + "' --out '" +
                     scratch("idx-bad").string() + "'");
  CHECK(r.code == 2);
  CHECK(r.err.find("line 2") != std::string::npos);
}

TEST_CASE("json diagnostics are one object per line") {
  const auto r = cli("--json index build --narrations '" + data("narrations_bad_line2.jsonl") + "' --out '" +
                     scratch("idx-bad-json").string() + "'");
  CHECK(r.code == 2);
  const auto diag = json::parse(lines_of(r.err).at(0));
  CHECK(diag["level"] == "error");
  CHECK(diag["code"] == "parse_error");
}

TEST_CASE("usage errors exit with 1") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("align --step x").code == 1);
  CHECK(cli("index build --out x").code == 1);
}

TEST_CASE("align prints the pool") {
  const auto r = cli("align --index '" + built_index().string() +
                     "' --step 'crack the eggs into a bowl' --step 'whisk the eggs' --top-k 2 --paths");
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["pool"].size() == 2);
  CHECK(j["best"]["video_id"] == "omelette-01");
  CHECK(j["best"].contains("path"));
  CHECK(j["score"].get<double>() > 0.9);
}

TEST_CASE("score keeps request order and is repeatable") {
  const auto req = scratch("req.jsonl");
  {
    std::ofstream out(req);
    out << json{{"id", "a"}, {"history", {"crack the eggs into a bowl"}}, {"completions", {{"whisk the eggs"}, json::array()}}}
               .dump()
        << "\n\n"
        << json{{"id", "b"}, {"history", {"fill the pot with soil"}}, {"completions", {{"water the pot gently"}}}}
               .dump()
        << "\n";
  }
  const std::string args = "score --index '" + built_index().string() + "' --requests '" + req.string() + "'";
  const auto first = cli(args);
  REQUIRE(first.code == 0);
  const auto lines = lines_of(first.out);
  REQUIRE(lines.size() == 2);
  CHECK(json::parse(lines[0])["id"] == "a");
  CHECK(json::parse(lines[1])["id"] == "b");
  CHECK_FALSE(json::parse(lines[0]).contains("timing_ms"));
  CHECK(json::parse(lines[0])["advantages"].size() == 2);

  CHECK(cli(args + " --workers 4").out == first.out);
  CHECK(json::parse(lines_of(cli(args + " --timing").out)[0]).contains("timing_ms"));

  const auto out_file = scratch("resp.jsonl");
  CHECK(cli(args + " --out '" + out_file.string() + "'").code == 0);
  CHECK(slurp(out_file) == first.out);
}

TEST_CASE("score exits 3 when some requests fail") {
  const auto req = scratch("req-partial.jsonl");
  {
    std::ofstream out(req);
    out << json{{"id", 1}, {"history", json::array()}, {"completions", {{"a"}}}}.dump() << "\n";
    out << json{{"id", 2}, {"history", {"a"}}, {"completions", {{"b"}}}}.dump() << "\n";
  }
  const auto r = cli("score --index '" + built_index().string() + "' --requests '" + req.string() + "'");
  CHECK(r.code == 3);
  const auto lines = lines_of(r.out);
  REQUIRE(lines.size() == 2);
  CHECK(json::parse(lines[0])["error"]["code"] == "bad_request");
  CHECK(json::parse(lines[1])["ok"] == true);
}

TEST_CASE("simulate writes the same curve for the same seed") {
  const std::string args = "simulate --iterations 15 --seed 4 --workers 2";
  const auto a = cli(args);
  REQUIRE(a.code == 0);
  const auto rows = lines_of(a.out);
  REQUIRE(rows.size() == 16);
  CHECK(rows[0] == "iteration,mean_reward,mean_kl,gate_rate");
  CHECK(cli(args).out == a.out);
  CHECK(cli("simulate --iterations 15 --seed 5").out != a.out);

  const auto summary = scratch("summary.json");
  REQUIRE(cli(args + " --curve /dev/null --summary '" + summary.string() + "'").code == 0);
  const auto s = json::parse(slurp(summary));
  CHECK(s["iterations"] == 15);
  CHECK(s["swappable_tasks"].size() == 2);
  CHECK(s["history_copy_mean_reward"].get<double>() < 0.0);
}

TEST_CASE("eval reproduces the macro averages") {
  const auto r = cli("eval --transcript '" + data("judged_transcript.jsonl") + "' --split-map '" + data("split_map.json") +
                     "' --label rl --csv -");
  REQUIRE(r.code == 0);
  const auto rows = lines_of(r.out);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].rfind("model,", 0) == 0);
  CHECK(rows[1].rfind("rl,", 0) == 0);
  CHECK(rows[1].find(",46.6,") != std::string::npos);

  const auto j = json::parse(cli("eval --transcript '" + data("judged_transcript.jsonl") + "' --split-map '" +
                                 data("split_map.json") + "'")
                                 .out);
  CHECK(j.is_object());
}

TEST_CASE("serve answers probe and stops on SIGTERM") {
  const auto log = scratch("serve.out");
  const std::string cmd = "sh -c 'echo $$; exec \"" + std::string(STEPGROUND_CLI) + "\" serve --index \"" +
                          built_index().string() + "\" --bind 127.0.0.1:0' 2>/dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 8192> buf{};
  REQUIRE(std::fgets(buf.data(), buf.size(), pipe) != nullptr);
  const pid_t pid = std::stoi(buf.data());
  // make sure a failed REQUIRE below does not leave the server running
  struct Reaper {
    pid_t pid;
    FILE* pipe;
    ~Reaper() {
      if (pipe) {
        ::kill(pid, SIGKILL);
        ::pclose(pipe);
      }
    }
  } reaper{pid, pipe};
  REQUIRE(std::fgets(buf.data(), buf.size(), pipe) != nullptr);
  const auto banner = json::parse(std::string(buf.data()));
  const std::string addr = banner["listening"];
  CHECK(banner["health"]["record_count"] == 3);

  auto r = cli("probe --connect " + addr + " --index '" + built_index().string() + "'");
  CHECK(r.code == 0);
  CHECK(json::parse(r.out)["segment_count"] == 7);

  // an index with a different record count must be flagged
  const auto other = scratch("idx-other");
  {
    std::ofstream n(scratch("one.jsonl"));
    n << R"({"video_id": "solo", "segments": [{"start_s": 0, "end_s": 1, "text": "just one step"}]})" << "\n";
  }
  REQUIRE(cli("index build --narrations '" + scratch("one.jsonl").string() + "' --out '" + other.string() + "'").code ==
          0);
  CHECK(cli("probe --connect " + addr + " --index '" + other.string() + "'").code == 2);

  ::kill(pid, SIGTERM);
  const int status = ::pclose(pipe);
  reaper.pipe = nullptr;
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);

  r = cli("--json probe --connect " + addr + " --timeout-ms 300");
  CHECK(r.code == 2);
  CHECK(json::parse(lines_of(r.err).at(0))["code"] == "io_error");
}
