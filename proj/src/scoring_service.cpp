#include "stepground/scoring_service.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <iomanip>
#include <sstream>

namespace stepground {

using nlohmann::json;

namespace {

// Raised while validating a request; carries the wire error code.
struct RequestError {
  std::string code;
  std::string message;
};

std::string corpus_tag(const CorpusIndex& index) {
  std::ostringstream os;
  os << index.manifest().embedder_tag << ":" << std::hex << std::setw(16) << std::setfill('0')
     << index.manifest().checksum;
  return os.str();
}

std::vector<std::string> string_list(const json& j, const char* what) {
  if (!j.is_array()) throw RequestError{wire::kBadRequest, std::string(what) + " must be an array of strings"};
  std::vector<std::string> out;
  out.reserve(j.size());
  for (const auto& s : j) {
    if (!s.is_string()) throw RequestError{wire::kBadRequest, std::string(what) + " must contain only strings"};
    out.push_back(s.get<std::string>());
  }
  return out;
}

EmbeddingMatrix inline_matrix(const json& j, std::size_t rows, std::size_t dim, const char* what) {
  if (!j.is_array() || j.size() != rows) {
    throw RequestError{wire::kEmbeddingMismatch,
                       std::string(what) + " must have one row per step (" + std::to_string(rows) + ")"};
  }
  std::vector<float> values;
  values.reserve(rows * dim);
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != dim) {
      throw RequestError{wire::kEmbeddingMismatch,
                         std::string(what) + " rows must have the index dim " + std::to_string(dim)};
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw RequestError{wire::kEmbeddingMismatch, std::string(what) + " must be numeric"};
      values.push_back(v.get<float>());
    }
  }
  EmbeddingMatrix m(dim, std::move(values));
  if (auto bad = m.first_non_unit_row(kUnitNormTolerance)) {
    throw RequestError{wire::kEmbeddingMismatch,
                       std::string(what) + " row " + std::to_string(*bad) + " is not unit norm"};
  }
  return m;
}

template <class T>
void override_field(const json& cfg, const char* key, T& field) {
  if (!cfg.contains(key)) return;
  const auto& v = cfg.at(key);
  if (!v.is_number()) throw RequestError{wire::kBadRequest, std::string("config.") + key + " must be a number"};
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_unsigned()) {
      throw RequestError{wire::kBadRequest, std::string("config.") + key + " must be a positive integer"};
    }
  }
  field = v.get<T>();
}

json defaults_json(const ServiceDefaults& d) {
  return json{{"top_k", d.align.top_k},       {"gap_penalty", d.align.gap_penalty},
              {"nw_clip_lo", d.align.nw_clip_lo}, {"nw_clip_hi", d.align.nw_clip_hi},
              {"tau", d.reward.tau},          {"alpha", d.reward.alpha},
              {"eps", d.reward.eps},          {"max_steps", d.max_steps}};
}

bool wait_fd(int fd, short events, std::chrono::milliseconds timeout) {
  pollfd p{fd, events, 0};
  const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  return rc > 0;
}

bool write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace

json to_json(const RewardBreakdown& r) {
  return json{{"a_full", r.a_full},
              {"a_hist", r.a_hist},
              {"rho", r.rho},
              {"reward", r.reward},
              {"gated", r.gated},
              {"best_record_full", r.best_record_full},
              {"best_record_hist", r.best_record_hist}};
}

json to_json(const AlignmentOutcome& o) {
  json j{{"record_idx", o.record_idx}, {"stage1_score", o.stage1_score}};
  j["stage2_score"] = o.stage2_score ? json(*o.stage2_score) : json(nullptr);
  if (o.path) {
    json path = json::array();
    for (const auto& p : *o.path) {
      const char* move = p.move == Move::diagonal ? "diagonal" : p.move == Move::vertical ? "vertical" : "horizontal";
      path.push_back(json{{"step", p.step}, {"segment", p.segment}, {"move", move}});
    }
    j["path"] = std::move(path);
  }
  return j;
}

json error_response(const json& id, const std::string& code, const std::string& message) {
  return json{{"id", id}, {"ok", false}, {"error", json{{"code", code}, {"message", message}}}};
}

Scorer::Scorer(const CorpusIndex& index, ServiceDefaults defaults)
    : Scorer(index, std::move(defaults), embedder_from_tag(index.manifest().embedder_tag)) {}

Scorer::Scorer(const CorpusIndex& index, ServiceDefaults defaults, std::unique_ptr<Embedder> embedder)
    : index_(index), defaults_(std::move(defaults)), embedder_(std::move(embedder)) {
  defaults_.align.validate();
  defaults_.reward.validate();
  if (index_.empty()) throw Error(ErrorCode::invalid_argument, "scoring service needs a non-empty index");
  if (embedder_ && embedder_->dim() != index_.dim()) {
    throw Error(ErrorCode::invalid_argument, "embedder dim does not match index dim");
  }
}

json Scorer::healthcheck() const {
  const auto& m = index_.manifest();
  return json{{"corpus_tag", corpus_tag(index_)},
              {"embedder_tag", m.embedder_tag},
              {"record_count", m.record_count},
              {"segment_count", m.segment_count},
              {"dim", m.dim},
              {"format_version", m.format_version},
              {"version", kServiceVersion},
              {"defaults", defaults_json(defaults_)}};
}

json Scorer::handle(const json& request) const {
  json response = handle_unlogged(request);
  if (log_) {
    json entry{{"id", response.value("id", json(nullptr))}, {"ok", response.value("ok", false)}};
    if (request.is_object()) {
      entry["op"] = request.value("op", std::string("score"));
      if (request.contains("goal") && request.at("goal").is_string()) entry["goal"] = request.at("goal");
    }
    if (response.contains("error")) entry["error"] = response["error"]["code"];
    log_(entry);
  }
  return response;
}

json Scorer::handle_unlogged(const json& request) const {
  const json id = request.is_object() && request.contains("id") ? request.at("id") : json(nullptr);
  try {
    if (!request.is_object()) throw RequestError{wire::kBadRequest, "request must be a JSON object"};
    const std::string op = request.value("op", std::string("score"));
    if (op == "health") return json{{"id", id}, {"ok", true}, {"health", healthcheck()}};
    if (op != "score") throw RequestError{wire::kBadRequest, "unknown op '" + op + "'"};
    return score_request(request);
  } catch (const RequestError& e) {
    return error_response(id, e.code, e.message);
  } catch (const Error& e) {
    return error_response(id, e.code() == ErrorCode::invalid_argument ? wire::kBadRequest : wire::kInternal,
                          e.what());
  } catch (const std::exception& e) {
    return error_response(id, wire::kInternal, e.what());
  }
}

json Scorer::score_request(const json& request) const {
  const auto started = std::chrono::steady_clock::now();
  const json id = request.contains("id") ? request.at("id") : json(nullptr);
  if (!request.contains("history")) throw RequestError{wire::kBadRequest, "missing field 'history'"};
  if (!request.contains("completions")) throw RequestError{wire::kBadRequest, "missing field 'completions'"};
  if (request.contains("goal") && !request.at("goal").is_string()) {
    throw RequestError{wire::kBadRequest, "goal must be a string"};
  }

  auto history_steps = string_list(request.at("history"), "history");
  if (history_steps.empty()) throw RequestError{wire::kBadRequest, "history must contain at least one step"};
  const auto& comps = request.at("completions");
  if (!comps.is_array() || comps.empty()) {
    throw RequestError{wire::kBadRequest, "completions must be a non-empty array of step lists"};
  }
  std::vector<std::vector<std::string>> completion_steps;
  std::size_t total = history_steps.size();
  for (const auto& c : comps) {
    completion_steps.push_back(string_list(c, "completion"));
    total += completion_steps.back().size();
  }
  if (total > defaults_.max_steps) {
    throw RequestError{wire::kTooLarge, "request has " + std::to_string(total) + " steps, cap is " +
                                            std::to_string(defaults_.max_steps)};
  }

  AlignConfig acfg = defaults_.align;
  RewardConfig rcfg = defaults_.reward;
  acfg.workers = 1;
  if (request.contains("config")) {
    const auto& cfg = request.at("config");
    if (!cfg.is_object()) throw RequestError{wire::kBadRequest, "config must be an object"};
    override_field(cfg, "top_k", acfg.top_k);
    override_field(cfg, "gap_penalty", acfg.gap_penalty);
    override_field(cfg, "nw_clip_lo", acfg.nw_clip_lo);
    override_field(cfg, "nw_clip_hi", acfg.nw_clip_hi);
    override_field(cfg, "tau", rcfg.tau);
    override_field(cfg, "alpha", rcfg.alpha);
    override_field(cfg, "eps", rcfg.eps);
    try {
      acfg.validate();
      rcfg.validate();
    } catch (const Error& e) {
      throw RequestError{wire::kBadRequest, e.what()};
    }
  }

  const bool inline_history = request.contains("history_embeddings");
  const bool inline_completions = request.contains("completion_embeddings");
  if ((!inline_history || !inline_completions) && !embedder_) {
    throw RequestError{wire::kEmbeddingMismatch, "index embedder '" + index_.manifest().embedder_tag +
                                                     "' is not built in; supply inline embeddings"};
  }
  const std::size_t d = index_.dim();
  auto make_seq = [&](std::vector<std::string> steps, const json* inline_rows, const char* what) {
    if (steps.empty()) return StepSequence();
    if (inline_rows) {
      auto m = inline_matrix(*inline_rows, steps.size(), d, what);
      return StepSequence(std::move(steps), std::move(m));
    }
    return StepSequence::embed(*embedder_, std::move(steps));
  };

  const StepSequence history =
      make_seq(std::move(history_steps), inline_history ? &request.at("history_embeddings") : nullptr,
               "history_embeddings");
  if (inline_completions) {
    const auto& rows = request.at("completion_embeddings");
    if (!rows.is_array() || rows.size() != completion_steps.size()) {
      throw RequestError{wire::kEmbeddingMismatch, "completion_embeddings must have one entry per completion"};
    }
  }
  std::vector<StepSequence> completions;
  completions.reserve(completion_steps.size());
  for (std::size_t c = 0; c < completion_steps.size(); ++c) {
    completions.push_back(make_seq(std::move(completion_steps[c]),
                                   inline_completions ? &request.at("completion_embeddings").at(c) : nullptr,
                                   "completion_embeddings"));
  }

  const auto hist = grounding_score(history, index_, acfg);
  std::vector<RewardBreakdown> rewards(completions.size());
  parallel_for(completions.size(), defaults_.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      rewards[c] = reward_with_baseline(hist, history, completions[c], index_, acfg, rcfg);
    }
  });

  json results = json::array();
  std::vector<double> values;
  for (const auto& r : rewards) {
    results.push_back(to_json(r));
    values.push_back(r.reward);
  }
  json response{{"id", id}, {"ok", true}, {"results", std::move(results)}, {"corpus_tag", corpus_tag(index_)}};
  if (values.size() >= 2) {
    const auto group = group_advantages(values);
    response["advantages"] = group.advantages;
    response["advantage_mean"] = group.mean;
    response["advantage_std"] = group.std;
  }
  const auto elapsed = std::chrono::steady_clock::now() - started;
  response["timing_ms"] = std::chrono::duration<double, std::milli>(elapsed).count();
  return response;
}

std::string Scorer::handle_line(const std::string& line) const {
  json request;
  try {
    request = json::parse(line);
  } catch (const json::parse_error& e) {
    if (log_) log_(json{{"id", nullptr}, {"ok", false}, {"error", wire::kParseError}});
    return error_response(nullptr, wire::kParseError, e.what()).dump();
  }
  return handle(request).dump();
}

std::pair<std::string, std::uint16_t> parse_bind_address(const std::string& bind) {
  std::string host = "127.0.0.1";
  std::string port = bind;
  if (const auto colon = bind.rfind(':'); colon != std::string::npos) {
    host = bind.substr(0, colon);
    port = bind.substr(colon + 1);
  }
  int value = -1;
  try {
    std::size_t used = 0;
    value = std::stoi(port, &used);
    if (used != port.size()) value = -1;
  } catch (const std::exception&) {
    value = -1;
  }
  if (value < 0 || value > 65535) throw Error(ErrorCode::invalid_argument, "bad bind address '" + bind + "'");
  return {host.empty() ? "127.0.0.1" : host, static_cast<std::uint16_t>(value)};
}

ScoringServer::ScoringServer(const Scorer& scorer, std::string host, std::uint16_t port)
    : scorer_(scorer), host_(std::move(host)), port_(port) {}

ScoringServer::~ScoringServer() { stop(); }

void ScoringServer::start() {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(port_);
  if (::getaddrinfo(host_.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::io_error, "cannot resolve bind host '" + host_ + "'");
  }
  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listen_fd_ < 0) {
    ::freeaddrinfo(res);
    throw Error(ErrorCode::io_error, std::string("socket: ") + std::strerror(errno));
  }
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  const int rc = ::bind(listen_fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(listen_fd_, 64) != 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw Error(ErrorCode::io_error, "cannot listen on " + host_ + ":" + port + ": " + why);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void ScoringServer::wait() {
  while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

void ScoringServer::stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(conn_mutex_);
    for (int fd : connection_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : connections_) {
    if (t.joinable()) t.join();
  }
  connections_.clear();
  connection_fds_.clear();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

void ScoringServer::accept_loop() {
  while (running_) {
    if (!wait_fd(listen_fd_, POLLIN, std::chrono::milliseconds(50))) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::lock_guard lock(conn_mutex_);
    connection_fds_.push_back(fd);
    connections_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

void ScoringServer::serve_connection(int fd) {
  std::string buffer;
  char chunk[8192];
  while (running_) {
    if (!wait_fd(fd, POLLIN, std::chrono::milliseconds(100))) continue;
    const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
    if (n <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t start = 0;
    for (auto nl = buffer.find('\n', start); nl != std::string::npos; nl = buffer.find('\n', start)) {
      std::string line = buffer.substr(start, nl - start);
      start = nl + 1;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      if (!write_all(fd, scorer_.handle_line(line) + "\n")) {
        start = buffer.size();
        break;
      }
    }
    buffer.erase(0, start);
  }
  // The fd stays registered until stop() so it is never closed twice.
  ::shutdown(fd, SHUT_RDWR);
  std::lock_guard lock(conn_mutex_);
  auto it = std::find(connection_fds_.begin(), connection_fds_.end(), fd);
  if (it != connection_fds_.end()) {
    connection_fds_.erase(it);
    ::close(fd);
  }
}

ScoringClient::ScoringClient(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout)
    : timeout_(timeout) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::io_error, "cannot resolve host '" + host + "'");
  }
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw Error(ErrorCode::io_error, std::string("socket: ") + std::strerror(errno));
  }
  const int flags = ::fcntl(fd_, F_GETFL, 0);
  ::fcntl(fd_, F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 && errno == EINPROGRESS) {
    if (!wait_fd(fd_, POLLOUT, timeout_)) {
      ::close(fd_);
      fd_ = -1;
      throw Error(ErrorCode::io_error, "timed out connecting to " + host + ":" + std::to_string(port));
    }
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
    rc = err == 0 ? 0 : -1;
    errno = err;
  }
  if (rc != 0) {
    const std::string why = std::strerror(errno);
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorCode::io_error, "cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
  }
  ::fcntl(fd_, F_SETFL, flags);
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

ScoringClient::~ScoringClient() {
  if (fd_ >= 0) ::close(fd_);
}

void ScoringClient::send_line(const std::string& line) {
  if (!write_all(fd_, line + "\n")) throw Error(ErrorCode::io_error, "connection closed while sending");
}

std::string ScoringClient::read_line() {
  char chunk[8192];
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    if (!wait_fd(fd_, POLLIN, timeout_)) throw Error(ErrorCode::io_error, "timed out waiting for response");
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n <= 0) throw Error(ErrorCode::io_error, "connection closed by server");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

json ScoringClient::call(const json& request) {
  send_line(request.dump());
  return json::parse(read_line());
}

}  // namespace stepground
