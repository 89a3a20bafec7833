#include "entsel/telemetry.hpp"

#include <functional>
#include <map>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "entsel/log.hpp"

namespace entsel {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

// --- messages --------------------------------------------------------------

nlohmann::json WireMessage::to_json() const {
  return {{"type", type}, {"version", version}, {"step", step}, {"payload", payload}};
}

std::string WireMessage::dump() const { return to_json().dump(); }

std::optional<WireMessage> parse_message(const std::string& line) {
  auto j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  const auto type = j.find("type");
  if (type == j.end() || !type->is_string()) return std::nullopt;
  WireMessage m;
  m.type = type->get<std::string>();
  if (auto v = j.find("version"); v != j.end() && v->is_number_integer()) m.version = v->get<int>();
  if (auto s = j.find("step"); s != j.end() && s->is_number_integer()) m.step = s->get<std::int64_t>();
  if (auto p = j.find("payload"); p != j.end() && p->is_object()) {
    m.payload = *p;
  } else {
    // Flat inbound form, e.g. {"type":"takeover","on":true}.
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "type" && it.key() != "version" && it.key() != "step") m.payload[it.key()] = it.value();
    }
  }
  return m;
}

WireMessage make_hello() {
  WireMessage m;
  m.type = "hello";
  m.payload = {{"server", "entsel"}, {"protocol", kProtocolVersion}};
  return m;
}

std::optional<Command> parse_command(const WireMessage& msg) {
  Command c;
  if (msg.type == "takeover") {
    c.kind = Command::Kind::kTakeover;
    const auto on = msg.payload.find("on");
    if (on == msg.payload.end() || !on->is_boolean()) return std::nullopt;
    c.on = on->get<bool>();
    return c;
  }
  if (msg.type == "action") {
    c.kind = Command::Kind::kAction;
    const auto a = msg.payload.find("a");
    if (a == msg.payload.end() || !a->is_array()) return std::nullopt;
    for (const auto& v : *a) {
      if (!v.is_number()) return std::nullopt;
      c.action.push_back(v.get<double>());
    }
    return c;
  }
  if (msg.type == "pause") {
    c.kind = Command::Kind::kPause;
    return c;
  }
  if (msg.type == "resume") {
    c.kind = Command::Kind::kResume;
    return c;
  }
  return std::nullopt;
}

void CommandQueue::push(Command c) {
  {
    std::lock_guard lock(mu_);
    items_.push_back(std::move(c));
  }
  cv_.notify_one();
}

std::vector<Command> CommandQueue::drain() {
  std::lock_guard lock(mu_);
  std::vector<Command> out(std::make_move_iterator(items_.begin()),
                           std::make_move_iterator(items_.end()));
  items_.clear();
  return out;
}

std::optional<Command> CommandQueue::wait_pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_for(lock, timeout, [this] { return !items_.empty(); })) return std::nullopt;
  Command c = std::move(items_.front());
  items_.pop_front();
  return c;
}

std::size_t CommandQueue::size() const {
  std::lock_guard lock(mu_);
  return items_.size();
}

RecordingSink::RecordingSink(const std::filesystem::path& path)
    : out_(path), start_(std::chrono::steady_clock::now()) {
  if (!out_) throw std::runtime_error("cannot write recording " + path.string());
}

void RecordingSink::publish(const WireMessage& msg) {
  auto j = msg.to_json();
  j["ts_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - start_)
                   .count();
  std::lock_guard lock(mu_);
  out_ << j.dump() << '\n';
  out_.flush();
}

// --- sessions --------------------------------------------------------------

namespace {

std::string mime_type(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js" || ext == ".mjs") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  return "application/octet-stream";
}

/// One client connection: a plain HTTP request, upgraded to WebSocket when
/// asked. All methods run on the owning io_context thread.
class Session : public std::enable_shared_from_this<Session> {
 public:
  struct Hooks {
    std::function<void(const std::shared_ptr<Session>&)> on_open;
    std::function<void(const std::shared_ptr<Session>&, const std::string&)> on_text;
    std::function<void(const std::shared_ptr<Session>&)> on_close;
    std::optional<std::filesystem::path> static_dir;
    std::size_t queue_limit = 1024;
    std::atomic<std::uint64_t>* dropped = nullptr;
  };

  Session(tcp::socket socket, std::shared_ptr<const Hooks> hooks)
      : stream_(std::move(socket)), hooks_(std::move(hooks)) {}

  void run() {
    http::async_read(stream_, buffer_, request_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       self->on_request(ec);
                     });
  }

  void send(std::shared_ptr<const std::string> text) {
    if (!open_ || closing_) return;
    // Slow client: drop the oldest queued message, never the one in flight.
    if (queue_.size() >= hooks_->queue_limit && queue_.size() > 1) {
      queue_.erase(queue_.begin() + 1);
      if (hooks_->dropped) ++*hooks_->dropped;
    }
    queue_.push_back(std::move(text));
    if (!writing_) do_write();
  }

  void close_after_flush() {
    closing_ = true;
    if (!writing_) do_close();
  }

  void abort() {
    beast::error_code ec;
    if (ws_) {
      beast::get_lowest_layer(*ws_).socket().close(ec);
    } else {
      stream_.socket().close(ec);
    }
  }

 private:
  void on_request(beast::error_code ec) {
    if (ec) return;
    if (websocket::is_upgrade(request_)) {
      ws_.emplace(std::move(stream_));
      beast::get_lowest_layer(*ws_).expires_never();
      ws_->set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
      ws_->async_accept(request_, [self = shared_from_this()](beast::error_code e) { self->on_accept(e); });
      return;
    }
    serve_http();
  }

  void on_accept(beast::error_code ec) {
    if (ec) return;
    open_ = true;
    if (hooks_->on_open) hooks_->on_open(shared_from_this());
    do_read();
  }

  void do_read() {
    ws_->async_read(read_buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->on_read(ec);
    });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      finish();
      return;
    }
    const std::string text = beast::buffers_to_string(read_buffer_.data());
    read_buffer_.consume(read_buffer_.size());
    if (hooks_->on_text) hooks_->on_text(shared_from_this(), text);
    do_read();
  }

  void do_write() {
    if (queue_.empty()) {
      writing_ = false;
      if (closing_) do_close();
      return;
    }
    writing_ = true;
    ws_->text(true);
    ws_->async_write(asio::buffer(*queue_.front()),
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (ec) {
                         self->writing_ = false;
                         self->finish();
                         return;
                       }
                       self->queue_.pop_front();
                       self->do_write();
                     });
  }

  void do_close() {
    if (!open_ || close_sent_) return;
    close_sent_ = true;
    ws_->async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
  }

  void finish() {
    if (finished_) return;
    finished_ = true;
    open_ = false;
    if (hooks_->on_close) hooks_->on_close(shared_from_this());
  }

  void serve_http() {
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(request_.version());
    res->keep_alive(false);
    std::string target(request_.target());
    if (const auto q = target.find('?'); q != std::string::npos) target.resize(q);
    if (target.empty() || target.back() == '/') target += "index.html";
    bool found = false;
    if (hooks_->static_dir && target.find("..") == std::string::npos) {
      const auto path = *hooks_->static_dir / target.substr(1);
      std::ifstream in(path, std::ios::binary);
      if (in) {
        res->body().assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        res->set(http::field::content_type, mime_type(path));
        res->result(http::status::ok);
        found = true;
      }
    }
    if (!found) {
      res->result(http::status::not_found);
      res->set(http::field::content_type, "text/plain");
      res->body() = "not found\n";
    }
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
    });
  }

  beast::tcp_stream stream_;
  std::optional<websocket::stream<beast::tcp_stream>> ws_;
  beast::flat_buffer buffer_;
  beast::flat_buffer read_buffer_;
  http::request<http::string_body> request_;
  std::shared_ptr<const Hooks> hooks_;
  std::deque<std::shared_ptr<const std::string>> queue_;
  bool open_ = false;
  bool writing_ = false;
  bool closing_ = false;
  bool close_sent_ = false;
  bool finished_ = false;
};

std::shared_ptr<const std::string> frame(const WireMessage& m) {
  return std::make_shared<const std::string>(m.dump() + "\n");
}

/// Owns the io_context thread and the accept loop shared by both servers.
class Acceptor {
 public:
  Acceptor(std::uint16_t port, std::shared_ptr<const Session::Hooks> hooks)
      : acceptor_(ioc_), hooks_(std::move(hooks)) {
    const tcp::endpoint ep(asio::ip::make_address("127.0.0.1"), port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(asio::socket_base::max_listen_connections);
  }

  ~Acceptor() { stop(); }

  asio::io_context& ioc() { return ioc_; }
  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  void start() {
    if (thread_.joinable()) return;
    do_accept();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    asio::post(ioc_, [this] {
      beast::error_code ec;
      acceptor_.close(ec);
      for (const auto& s : live_) s->abort();
      ioc_.stop();
    });
    if (thread_.joinable()) {
      thread_.join();
    } else {
      ioc_.stop();
    }
    live_.clear();
  }

  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  void track(const std::shared_ptr<Session>& s) { live_.insert(s); }
  void untrack(const std::shared_ptr<Session>& s) { live_.erase(s); }
  const std::set<std::shared_ptr<Session>>& live() const { return live_; }

 private:
  void do_accept() {
    acceptor_.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<Session>(std::move(socket), hooks_)->run();
      do_accept();
    });
  }

  asio::io_context ioc_;
  tcp::acceptor acceptor_;
  std::shared_ptr<const Session::Hooks> hooks_;
  std::thread thread_;
  std::atomic<bool> stopped_{false};
  std::set<std::shared_ptr<Session>> live_;
};

}  // namespace

// --- live server -------------------------------------------------------------

class TelemetryServer::Impl {
 public:
  Impl(ServerOptions opts, CommandQueue& commands) : opts_(std::move(opts)), commands_(commands) {
    auto hooks = std::make_shared<Session::Hooks>();
    hooks->static_dir = opts_.static_dir;
    hooks->queue_limit = opts_.client_queue_limit;
    hooks->dropped = &dropped_;
    hooks->on_open = [this](const std::shared_ptr<Session>& s) {
      acceptor_->track(s);
      clients_ = acceptor_->live().size();
      s->send(frame(make_hello()));
    };
    hooks->on_close = [this](const std::shared_ptr<Session>& s) {
      acceptor_->untrack(s);
      clients_ = acceptor_->live().size();
    };
    hooks->on_text = [this](const std::shared_ptr<Session>& s, const std::string& text) {
      on_text(s, text);
    };
    acceptor_ = std::make_unique<Acceptor>(opts_.port, hooks);
    snapshot_timer_ = std::make_unique<asio::steady_timer>(acceptor_->ioc());
  }

  void publish(const WireMessage& msg) {
    Pending p{msg.type == "snapshot", frame(msg)};
    std::lock_guard lock(mu_);
    if (pending_.size() >= opts_.publish_queue_limit) {
      pending_.pop_front();
      ++dropped_;
    }
    pending_.push_back(std::move(p));
    if (!drain_posted_) {
      drain_posted_ = true;
      asio::post(acceptor_->ioc(), [this] { drain(); });
    }
  }

  struct Pending {
    bool snapshot;
    std::shared_ptr<const std::string> text;
  };

  void drain() {
    std::deque<Pending> batch;
    {
      std::lock_guard lock(mu_);
      batch.swap(pending_);
      drain_posted_ = false;
    }
    for (auto& p : batch) {
      if (p.snapshot) {
        latest_snapshot_ = std::move(p.text);
        flush_snapshot();
      } else {
        broadcast(p.text);
      }
    }
  }

  void flush_snapshot() {
    if (!latest_snapshot_) return;
    const auto now = std::chrono::steady_clock::now();
    if (now - last_snapshot_ >= opts_.snapshot_interval) {
      broadcast(latest_snapshot_);
      latest_snapshot_.reset();
      last_snapshot_ = now;
      return;
    }
    if (timer_armed_) return;
    timer_armed_ = true;
    snapshot_timer_->expires_at(last_snapshot_ + opts_.snapshot_interval);
    snapshot_timer_->async_wait([this](beast::error_code ec) {
      timer_armed_ = false;
      if (!ec) flush_snapshot();
    });
  }

  void broadcast(const std::shared_ptr<const std::string>& text) {
    for (const auto& s : acceptor_->live()) s->send(text);
  }

  void on_text(const std::shared_ptr<Session>& s, const std::string& text) {
    const auto msg = parse_message(text);
    if (!msg) {
      ++malformed_;
      spdlog::warn("telemetry: dropped malformed message");
      return;
    }
    if (msg->type == "hello") {
      if (msg->version != kProtocolVersion) {
        WireMessage err;
        err.type = "error";
        err.payload = {{"reason", "protocol version mismatch"}, {"expected", kProtocolVersion}};
        s->send(frame(err));
        s->close_after_flush();
      }
      return;
    }
    if (auto cmd = parse_command(*msg)) {
      commands_.push(std::move(*cmd));
      return;
    }
    spdlog::warn("telemetry: ignoring inbound message of type '{}'", msg->type);
  }

  ServerOptions opts_;
  CommandQueue& commands_;
  std::unique_ptr<Acceptor> acceptor_;
  std::unique_ptr<asio::steady_timer> snapshot_timer_;
  std::mutex mu_;
  std::deque<Pending> pending_;
  bool drain_posted_ = false;
  std::shared_ptr<const std::string> latest_snapshot_;
  std::chrono::steady_clock::time_point last_snapshot_{};
  bool timer_armed_ = false;
  std::atomic<std::size_t> clients_{0};
  std::atomic<std::uint64_t> malformed_{0};
  std::atomic<std::uint64_t> dropped_{0};
};

TelemetryServer::TelemetryServer(ServerOptions opts, CommandQueue& commands)
    : impl_(std::make_unique<Impl>(std::move(opts), commands)) {}

TelemetryServer::~TelemetryServer() { stop(); }

void TelemetryServer::start() { impl_->acceptor_->start(); }
void TelemetryServer::stop() {
  if (impl_) impl_->acceptor_->stop();
}
std::uint16_t TelemetryServer::port() const { return impl_->acceptor_->port(); }
void TelemetryServer::publish(const WireMessage& msg) { impl_->publish(msg); }
std::size_t TelemetryServer::client_count() const { return impl_->clients_; }
std::uint64_t TelemetryServer::malformed_count() const { return impl_->malformed_; }
std::uint64_t TelemetryServer::dropped_count() const { return impl_->dropped_; }

// --- fixture replay ----------------------------------------------------------

class FixtureServer::Impl {
 public:
  struct Recorded {
    std::int64_t ts_ms;
    std::shared_ptr<const std::string> text;
  };

  struct Replay {
    std::size_t next = 0;
    std::chrono::steady_clock::time_point start;
    std::unique_ptr<asio::steady_timer> timer;
  };

  Impl(const std::filesystem::path& recording, FixtureOptions opts) : opts_(std::move(opts)) {
    std::ifstream in(recording);
    if (!in) throw std::runtime_error("cannot read recording " + recording.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("type")) {
        throw std::runtime_error("recording " + recording.string() + " has a malformed line");
      }
      if (j["type"] == "hello") continue;
      const std::int64_t ts = j.value("ts_ms", std::int64_t{0});
      j.erase("ts_ms");
      messages_.push_back({ts, std::make_shared<const std::string>(j.dump() + "\n")});
    }

    auto hooks = std::make_shared<Session::Hooks>();
    hooks->static_dir = opts_.static_dir;
    hooks->queue_limit = messages_.size() + 16;
    hooks->on_open = [this](const std::shared_ptr<Session>& s) {
      acceptor_->track(s);
      s->send(frame(make_hello()));
      auto& r = replays_[s.get()];
      r.start = std::chrono::steady_clock::now();
      r.timer = std::make_unique<asio::steady_timer>(acceptor_->ioc());
      advance(s);
    };
    hooks->on_close = [this](const std::shared_ptr<Session>& s) {
      replays_.erase(s.get());
      acceptor_->untrack(s);
    };
    hooks->on_text = [this](const std::shared_ptr<Session>&, const std::string& text) {
      std::lock_guard lock(log_mu_);
      inbound_.push_back(text);
      spdlog::info("fixture: inbound {}", text);
    };
    acceptor_ = std::make_unique<Acceptor>(opts_.port, hooks);
  }

  void advance(const std::shared_ptr<Session>& s) {
    auto it = replays_.find(s.get());
    if (it == replays_.end()) return;
    Replay& r = it->second;
    if (opts_.max_speed) {
      for (; r.next < messages_.size(); ++r.next) s->send(messages_[r.next].text);
    }
    if (r.next >= messages_.size()) {
      s->close_after_flush();
      return;
    }
    const auto offset = messages_[r.next].ts_ms - messages_.front().ts_ms;
    r.timer->expires_at(r.start + std::chrono::milliseconds(std::max<std::int64_t>(0, offset)));
    r.timer->async_wait([this, s](beast::error_code ec) {
      if (ec) return;
      auto found = replays_.find(s.get());
      if (found == replays_.end()) return;
      s->send(messages_[found->second.next++].text);
      advance(s);
    });
  }

  FixtureOptions opts_;
  std::vector<Recorded> messages_;
  std::map<const Session*, Replay> replays_;
  std::unique_ptr<Acceptor> acceptor_;
  mutable std::mutex log_mu_;
  std::vector<std::string> inbound_;
};

FixtureServer::FixtureServer(const std::filesystem::path& recording, FixtureOptions opts)
    : impl_(std::make_unique<Impl>(recording, std::move(opts))) {}

FixtureServer::~FixtureServer() { stop(); }

void FixtureServer::start() { impl_->acceptor_->start(); }
void FixtureServer::stop() {
  if (impl_) impl_->acceptor_->stop();
}
void FixtureServer::wait() { impl_->acceptor_->wait(); }
std::uint16_t FixtureServer::port() const { return impl_->acceptor_->port(); }
std::size_t FixtureServer::message_count() const { return impl_->messages_.size(); }
std::vector<std::string> FixtureServer::inbound_log() const {
  std::lock_guard lock(impl_->log_mu_);
  return impl_->inbound_;
}

}  // namespace entsel
