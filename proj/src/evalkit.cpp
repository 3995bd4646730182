#include "stepground/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <regex>
#include <sstream>

namespace stepground::eval {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kCriteria> kKeys = {
    "logical_progression", "temporal_alignment", "spatial_grounding",
    "continuation",        "clarity",            "semantic_alignment",
};

std::size_t find_split(const SplitMap& split, const std::string& dataset) {
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i].first == dataset) return i;
  }
  return split.size();
}

MacroReport aggregate(const std::vector<double>& sums, const std::vector<std::size_t>& counts,
                      const SplitMap& split) {
  MacroReport report;
  std::vector<std::string> order;
  for (const auto& [dataset, name] : split) {
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  }
  for (const auto& name : order) {
    SplitScore s{name, {}, 0.0};
    double total = 0.0;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i].second != name) continue;
      if (counts[i] == 0) {
        throw Error(ErrorCode::data_error, "empty dataset group: '" + split[i].first + "'");
      }
      const double pct = sums[i] / static_cast<double>(counts[i]);
      report.datasets.push_back({split[i].first, name, counts[i], pct});
      s.datasets.push_back(split[i].first);
      total += pct;
    }
    s.percent = total / static_cast<double>(s.datasets.size());
    report.splits.push_back(std::move(s));
  }
  return report;
}

void check_split_map(const SplitMap& split) {
  for (std::size_t i = 0; i < split.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (split[i].first == split[j].first) {
        throw Error(ErrorCode::invalid_argument, "dataset '" + split[i].first + "' listed twice in split map");
      }
    }
  }
}

std::string format_tenth(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << round_to_tenth(v);
  return os.str();
}

}  // namespace

std::string_view criterion_key(Criterion c) { return kKeys[static_cast<std::size_t>(c)]; }

JudgedExample apply_penalties(std::string dataset, const Scores& raw, PenaltyFlags flags) {
  for (std::size_t i = 0; i < kCriteria; ++i) {
    if (raw[i] < 0 || raw[i] > kMaxScore) {
      throw Error(ErrorCode::invalid_argument, std::string("score for ") + std::string(kKeys[i]) + " is " +
                                                   std::to_string(raw[i]) + ", outside 0..5");
    }
  }
  JudgedExample ex{std::move(dataset), raw, flags};
  if (flags.fatal) {
    ex.scores.fill(0);
  } else if (flags.fluff) {
    for (auto c : {Criterion::semantic_alignment, Criterion::clarity}) {
      auto& s = ex.scores[static_cast<std::size_t>(c)];
      s = std::min(s, kFluffCap);
    }
  }
  return ex;
}

double example_percent(const JudgedExample& example) {
  const int total = std::accumulate(example.scores.begin(), example.scores.end(), 0);
  return static_cast<double>(total) / kMaxTotal * 100.0;
}

MacroReport macro_accuracy(const std::vector<JudgedExample>& examples, const SplitMap& split) {
  check_split_map(split);
  std::vector<double> sums(split.size(), 0.0);
  std::vector<std::size_t> counts(split.size(), 0);
  for (const auto& ex : examples) {
    const std::size_t i = find_split(split, ex.dataset);
    if (i == split.size()) {
      throw Error(ErrorCode::invalid_argument, "dataset '" + ex.dataset + "' is not in the split map");
    }
    sums[i] += example_percent(ex);
    ++counts[i];
  }
  return aggregate(sums, counts, split);
}

MacroReport macro_from_dataset_scores(const std::vector<std::pair<std::string, double>>& scores,
                                      const SplitMap& split) {
  check_split_map(split);
  std::vector<double> sums(split.size(), 0.0);
  std::vector<std::size_t> counts(split.size(), 0);
  for (const auto& [dataset, pct] : scores) {
    const std::size_t i = find_split(split, dataset);
    if (i == split.size()) {
      throw Error(ErrorCode::invalid_argument, "dataset '" + dataset + "' is not in the split map");
    }
    sums[i] += pct;
    ++counts[i];
  }
  return aggregate(sums, counts, split);
}

double round_to_tenth(double value) {
  // Scale with a tiny nudge so 46.55 (stored as 46.549999...) rounds up.
  const double scaled = value * 10.0;
  const double nudge = std::abs(scaled) * 1e-12;
  return std::round(scaled + (scaled >= 0 ? nudge : -nudge)) / 10.0;
}

json report_json(const MacroReport& report) {
  json datasets = json::array();
  for (const auto& d : report.datasets) {
    datasets.push_back(json{{"dataset", d.dataset}, {"split", d.split}, {"count", d.count},
                            {"percent", d.percent}, {"rounded", round_to_tenth(d.percent)}});
  }
  json splits = json::array();
  for (const auto& s : report.splits) {
    splits.push_back(json{{"split", s.split}, {"datasets", s.datasets}, {"percent", s.percent},
                          {"rounded", round_to_tenth(s.percent)}});
  }
  return json{{"datasets", std::move(datasets)}, {"splits", std::move(splits)}};
}

std::string report_csv(const MacroReport& report, const std::string& label) {
  std::ostringstream header;
  std::ostringstream values;
  header << "model";
  values << label;
  for (const auto& d : report.datasets) {
    header << ',' << d.dataset;
    values << ',' << format_tenth(d.percent);
  }
  for (const auto& s : report.splits) {
    header << ",macro_" << s.split;
    values << ',' << format_tenth(s.percent);
  }
  return header.str() + "\n" + values.str() + "\n";
}

Scores parse_scores_fallback(std::string_view text, std::vector<std::string>& missing) {
  Scores scores{};
  const std::string haystack(text);
  for (std::size_t i = 0; i < kCriteria; ++i) {
    std::string key(kKeys[i]);
    std::replace(key.begin(), key.end(), '_', '.');  // '_' or ' ' or '-' between words
    const std::regex pattern("[\"']?" + key + "[\"']?\\s*[:=]\\s*[\"']?(-?[0-9]+)", std::regex::icase);
    std::smatch m;
    if (std::regex_search(haystack, m, pattern)) {
      long v = 0;
      try {
        v = std::stol(m[1].str());
      } catch (const std::out_of_range&) {
        v = m[1].str().starts_with('-') ? 0 : kMaxScore;
      }
      scores[i] = static_cast<int>(std::clamp<long>(v, 0, kMaxScore));
    } else {
      missing.emplace_back(kKeys[i]);
      scores[i] = 0;
    }
  }
  return scores;
}

Transcript read_transcript(std::istream& in, const TranscriptOptions& options) {
  Transcript t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      const std::string dataset = j.at("dataset").get<std::string>();
      PenaltyFlags flags{j.value("fluff", false), j.value("fatal", false)};
      Scores raw{};
      if (j.contains("scores")) {
        const auto& s = j.at("scores");
        for (std::size_t i = 0; i < kCriteria; ++i) raw[i] = s.at(std::string(kKeys[i])).get<int>();
      } else if (options.fallback_regex && j.contains("raw_output")) {
        std::vector<std::string> missing;
        raw = parse_scores_fallback(j.at("raw_output").get<std::string>(), missing);
        for (const auto& key : missing) t.warnings.push_back({line_no, "missing '" + key + "', scored 0"});
      } else {
        throw std::invalid_argument("record has no 'scores' object");
      }
      t.examples.push_back(apply_penalties(dataset, raw, flags));
    } catch (const Error& e) {
      throw Error(e.code(), "transcript line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::parse_error, "transcript line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return t;
}

SplitMap read_split_map(std::istream& in) {
  SplitMap split;
  try {
    const auto j = nlohmann::ordered_json::parse(in);
    if (!j.is_object()) throw std::invalid_argument("split map must be a JSON object");
    for (const auto& [dataset, name] : j.items()) split.emplace_back(dataset, name.get<std::string>());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("split map: ") + e.what());
  }
  check_split_map(split);
  return split;
}

double diversity_score(const std::vector<std::vector<double>>& pairwise) {
  const std::size_t n = pairwise.size();
  if (n < 2) throw Error(ErrorCode::invalid_argument, "diversity needs at least 2 generations");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pairwise[i].size() != n) throw Error(ErrorCode::invalid_argument, "pairwise matrix is not square");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = pairwise[i][j];
      if (v != pairwise[j][i]) {
        throw Error(ErrorCode::invalid_argument, "pairwise matrix is not symmetric at (" + std::to_string(i) +
                                                     ", " + std::to_string(j) + ")");
      }
      if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::invalid_argument, "pairwise score outside [0, 1]");
      total += v;
    }
  }
  return 2.0 * total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double model_diversity(const std::vector<std::vector<std::vector<double>>>& prompts) {
  if (prompts.empty()) throw Error(ErrorCode::invalid_argument, "model diversity needs at least one prompt");
  double total = 0.0;
  for (const auto& p : prompts) total += diversity_score(p);
  return total / static_cast<double>(prompts.size());
}

Taxonomy::Taxonomy(std::vector<std::string> actions, const Embedder& embedder)
    : actions_(std::move(actions)), dim_(embedder.dim()) {
  if (actions_.empty()) throw Error(ErrorCode::invalid_argument, "taxonomy is empty");
  rows_.reserve(actions_.size() * dim_);
  for (const auto& a : actions_) {
    const auto v = embedder.embed(a);
    rows_.insert(rows_.end(), v.begin(), v.end());
  }
}

std::size_t nearest_action(std::span<const float> v, const Taxonomy& taxonomy) {
  if (v.size() != taxonomy.dim()) throw Error(ErrorCode::invalid_argument, "vector dim does not match taxonomy");
  std::size_t best = 0;
  double best_score = dot(v, taxonomy.row(0));
  for (std::size_t a = 1; a < taxonomy.size(); ++a) {
    const double s = dot(v, taxonomy.row(a));
    if (s > best_score) {
      best_score = s;
      best = a;
    }
  }
  return best;
}

std::size_t remap_to_taxonomy(std::string_view step, const Taxonomy& taxonomy, const Embedder& embedder) {
  return nearest_action(embedder.embed(step), taxonomy);
}

}  // namespace stepground::eval
