#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stepground/alignment.hpp"
#include "stepground/corpus_store.hpp"
#include "stepground/embedder.hpp"
#include "stepground/reward.hpp"

namespace stepground {

inline constexpr const char* kServiceVersion = "1.0.0";

/// Wire field names and error codes are part of the protocol; see README.
namespace wire {
inline constexpr const char* kBadRequest = "bad_request";
inline constexpr const char* kParseError = "parse_error";
inline constexpr const char* kTooLarge = "too_large";
inline constexpr const char* kEmbeddingMismatch = "embedding_mismatch";
inline constexpr const char* kInternal = "internal";
}  // namespace wire

struct ServiceDefaults {
  AlignConfig align;
  RewardConfig reward;
  std::size_t max_steps = 4096;  ///< history + all completion steps per request
  std::size_t workers = 1;       ///< parallelism across completions of one request
};

nlohmann::json to_json(const RewardBreakdown& r);
nlohmann::json to_json(const AlignmentOutcome& o);

/// Stateless request handler over one immutable index. Thread-safe.
class Scorer {
 public:
  /// Uses the embedder named by the index manifest when it is a built-in one;
  /// otherwise requests must carry inline embeddings.
  Scorer(const CorpusIndex& index, ServiceDefaults defaults);
  Scorer(const CorpusIndex& index, ServiceDefaults defaults, std::unique_ptr<Embedder> embedder);

  /// Handles one request object. Never throws: failures become error
  /// responses with the id echoed.
  nlohmann::json handle(const nlohmann::json& request) const;

  /// Parses one protocol line and returns the response line (no newline).
  std::string handle_line(const std::string& line) const;

  nlohmann::json healthcheck() const;

  const ServiceDefaults& defaults() const { return defaults_; }

  /// Called once per handled request with {id, op, goal, ok, error}. The goal
  /// is recorded here and nowhere else; it never affects scoring. May be
  /// called from several connection threads at once.
  using RequestLog = std::function<void(const nlohmann::json&)>;
  void set_request_log(RequestLog log) { log_ = std::move(log); }

 private:
  nlohmann::json handle_unlogged(const nlohmann::json& request) const;
  nlohmann::json score_request(const nlohmann::json& request) const;

  const CorpusIndex& index_;
  ServiceDefaults defaults_;
  std::unique_ptr<Embedder> embedder_;
  RequestLog log_;
};

nlohmann::json error_response(const nlohmann::json& id, const std::string& code, const std::string& message);

/// Newline-delimited JSON over TCP. One thread per connection; responses on a
/// connection are written in request order.
class ScoringServer {
 public:
  ScoringServer(const Scorer& scorer, std::string host, std::uint16_t port);
  ~ScoringServer();

  ScoringServer(const ScoringServer&) = delete;
  ScoringServer& operator=(const ScoringServer&) = delete;

  /// Binds and starts the accept loop in the background.
  void start();
  /// Blocks until stop() is called from another thread.
  void wait();
  void stop();

  /// Actual bound port (useful when constructed with port 0).
  std::uint16_t port() const { return port_; }

 private:
  void accept_loop();
  void serve_connection(int fd);

  const Scorer& scorer_;
  std::string host_;
  std::uint16_t port_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex conn_mutex_;
  std::vector<std::thread> connections_;
  std::vector<int> connection_fds_;
};

/// Blocking line client with a per-operation timeout.
class ScoringClient {
 public:
  ScoringClient(const std::string& host, std::uint16_t port,
                std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  ~ScoringClient();

  ScoringClient(const ScoringClient&) = delete;
  ScoringClient& operator=(const ScoringClient&) = delete;

  void send_line(const std::string& line);
  std::string read_line();
  nlohmann::json call(const nlohmann::json& request);

 private:
  int fd_ = -1;
  std::string buffer_;
  std::chrono::milliseconds timeout_;
};

/// Splits "host:port"; a bare port means 127.0.0.1.
std::pair<std::string, std::uint16_t> parse_bind_address(const std::string& bind);

}  // namespace stepground
