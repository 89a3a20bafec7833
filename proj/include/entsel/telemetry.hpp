#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace entsel {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint16_t kDefaultPort = 8732;

/// One newline-terminated JSON document on the wire:
///   {"type": ..., "version": 1, "step": N, "payload": {...}}
struct WireMessage {
  std::string type;
  std::int64_t step = 0;
  nlohmann::json payload = nlohmann::json::object();
  int version = kProtocolVersion;

  nlohmann::json to_json() const;
  /// Serialized form without the trailing newline.
  std::string dump() const;
};

/// nullopt for malformed JSON or a document without a string "type".
std::optional<WireMessage> parse_message(const std::string& line);

WireMessage make_hello();

struct Command {
  enum class Kind { kTakeover, kAction, kPause, kResume };
  Kind kind = Kind::kTakeover;
  bool on = false;
  std::vector<double> action;
};

/// Reads takeover/action/pause/resume; fields may sit at the top level or
/// under "payload". Other types yield nullopt.
std::optional<Command> parse_command(const WireMessage& msg);

/// Multi-producer queue with a single consumer (the trainer).
class CommandQueue {
 public:
  void push(Command c);
  std::vector<Command> drain();
  /// Blocks until a command arrives or the timeout passes.
  std::optional<Command> wait_pop(std::chrono::milliseconds timeout);
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Command> items_;
};

class MessageSink {
 public:
  virtual ~MessageSink() = default;
  /// Must not block on consumers.
  virtual void publish(const WireMessage& msg) = 0;
};

/// Appends every outbound message to a JSON-lines file, stamped with
/// "ts_ms" (milliseconds since the recorder was created) for replay cadence.
class RecordingSink : public MessageSink {
 public:
  explicit RecordingSink(const std::filesystem::path& path);
  void publish(const WireMessage& msg) override;

 private:
  std::mutex mu_;
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

struct ServerOptions {
  std::uint16_t port = kDefaultPort;  // 0 picks a free port
  std::size_t client_queue_limit = 1024;
  std::size_t publish_queue_limit = 4096;
  std::chrono::milliseconds snapshot_interval{100};
  std::optional<std::filesystem::path> static_dir;  // plain HTTP GETs are served from here
};

/// Live WebSocket broadcaster. Sends hello on connect, then fans out every
/// published message. Snapshots are latest-wins and rate capped; inbound
/// commands land on the command queue.
class TelemetryServer : public MessageSink {
 public:
  TelemetryServer(ServerOptions opts, CommandQueue& commands);
  ~TelemetryServer() override;
  TelemetryServer(const TelemetryServer&) = delete;
  TelemetryServer& operator=(const TelemetryServer&) = delete;

  void start();
  void stop();
  std::uint16_t port() const;

  void publish(const WireMessage& msg) override;

  std::size_t client_count() const;
  std::uint64_t malformed_count() const;
  std::uint64_t dropped_count() const;

  class Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

struct FixtureOptions {
  std::uint16_t port = kDefaultPort;
  bool max_speed = false;
  std::optional<std::filesystem::path> static_dir;
};

/// Serves a recorded session: every connecting client gets hello, the
/// recorded messages at their recorded cadence (or back to back), then a
/// clean close. Inbound commands are logged and otherwise ignored.
class FixtureServer {
 public:
  FixtureServer(const std::filesystem::path& recording, FixtureOptions opts);
  ~FixtureServer();
  FixtureServer(const FixtureServer&) = delete;
  FixtureServer& operator=(const FixtureServer&) = delete;

  void start();
  void stop();
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  std::uint16_t port() const;
  std::size_t message_count() const;
  std::vector<std::string> inbound_log() const;

  class Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace entsel
