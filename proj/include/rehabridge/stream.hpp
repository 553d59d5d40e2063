#pragma once

#include "rehabridge/mapping.hpp"
#include "rehabridge/store.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace rehabridge::stream {

using nlohmann::json;

/// One event-stream message: `{type, t_us, body}`. Cursor and telemetry
/// messages may be coalesced or dropped under backpressure; the others never.
struct Message {
  std::string type;
  std::uint64_t t_us = 0;
  json body;

  bool coalescable() const { return type == "cursor" || type == "telemetry"; }
  json to_json() const { return json{{"type", type}, {"t_us", t_us}, {"body", body}}; }
};

class Subscription {
 public:
  explicit Subscription(std::size_t capacity) : capacity_(capacity) {}

  void push(const Message& m) {
    {
      std::lock_guard lock(mutex_);
      if (closed_) {
        return;
      }
      // A newer cursor replaces one still waiting at the tail.
      if (m.type == "cursor" && !queue_.empty() && queue_.back().type == "cursor") {
        queue_.back() = m;
        ++coalesced_;
      } else {
        queue_.push_back(m);
      }
      if (queue_.size() > capacity_) {
        const auto it = std::find_if(queue_.begin(), queue_.end(), [](const Message& q) { return q.coalescable(); });
        if (it != queue_.end()) {
          queue_.erase(it);
          ++dropped_;
        }
      }
    }
    cv_.notify_one();
  }

  std::optional<Message> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) {
      return std::nullopt;
    }
    Message m = std::move(queue_.front());
    queue_.pop_front();
    return m;
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

  std::size_t dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Message> queue_;
  bool closed_ = false;
  std::size_t dropped_ = 0;
  std::size_t coalesced_ = 0;
};

/// Fan-out to every connected stream client.
class Hub {
 public:
  explicit Hub(std::size_t per_client_capacity = 1024) : capacity_(per_client_capacity) {}

  std::shared_ptr<Subscription> subscribe() {
    auto s = std::make_shared<Subscription>(capacity_);
    std::lock_guard lock(mutex_);
    subs_.push_back(s);
    return s;
  }

  void publish(const Message& m) {
    std::vector<std::shared_ptr<Subscription>> live;
    {
      std::lock_guard lock(mutex_);
      std::erase_if(subs_, [](const std::weak_ptr<Subscription>& w) {
        const auto s = w.lock();
        return !s || s->closed();
      });
      for (const auto& w : subs_) {
        if (auto s = w.lock()) {
          live.push_back(std::move(s));
        }
      }
      ++published_;
    }
    for (const auto& s : live) {
      s->push(m);
    }
  }

  std::size_t subscribers() const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& w : subs_) {
      const auto s = w.lock();
      n += s && !s->closed();
    }
    return n;
  }

  std::uint64_t published() const {
    std::lock_guard lock(mutex_);
    return published_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::vector<std::weak_ptr<Subscription>> subs_;
  std::uint64_t published_ = 0;
};

// ---------------------------------------------------------------------------
// Pointer sinks
// ---------------------------------------------------------------------------

/// Destination for cursor output. Real OS pointer injection would be another
/// implementation of this interface.
class PointerSink {
 public:
  virtual ~PointerSink() = default;
  /// `t_us` is the bridge clock; `ingress_us` is when the source telemetry arrived.
  virtual void cursor(const mapping::CursorPosition& p, std::uint64_t t_us, std::uint64_t ingress_us) = 0;
  virtual void pointer(const mapping::PointerEvent& e, std::uint64_t t_us) = 0;
  /// Cursor output stops; anything held back must be discarded.
  virtual void freeze() {}
  virtual void poll(std::uint64_t /*now_us*/) {}
};

/// Publishes cursor and pointer messages on the event stream, sending at
/// most one cursor update per `min_interval_us` (the latest one wins).
class StreamSink final : public PointerSink {
 public:
  StreamSink(Hub& hub, std::uint64_t min_interval_us) : hub_(hub), min_interval_us_(min_interval_us) {}

  void cursor(const mapping::CursorPosition& p, std::uint64_t t_us, std::uint64_t ingress_us) override {
    pending_ = Message{"cursor", t_us, body(p, ingress_us)};
    poll(t_us);
  }

  void pointer(const mapping::PointerEvent& e, std::uint64_t t_us) override {
    // Flush the cursor first so a click never lands before the move.
    if (pending_) {
      send_pending(t_us);
    }
    hub_.publish({"pointer", t_us,
                  json{{"kind", std::string(mapping::to_string(e.kind))},
                       {"x", e.position.x},
                       {"y", e.position.y},
                       {"device_us", e.timestamp_us}}});
  }

  void freeze() override { pending_.reset(); }

  void poll(std::uint64_t now_us) override {
    if (pending_ && (!last_sent_ || now_us - *last_sent_ >= min_interval_us_)) {
      send_pending(now_us);
    }
  }

 private:
  static json body(const mapping::CursorPosition& p, std::uint64_t ingress_us) {
    return json{{"x", p.x}, {"y", p.y}, {"inside_workspace", p.inside_workspace}, {"ingress_us", ingress_us}};
  }

  void send_pending(std::uint64_t now_us) {
    pending_->t_us = now_us;
    hub_.publish(*pending_);
    pending_.reset();
    last_sent_ = now_us;
  }

  Hub& hub_;
  std::uint64_t min_interval_us_;
  std::optional<Message> pending_;
  std::optional<std::uint64_t> last_sent_;
};

/// Active recording target: session id and the bridge time the session began.
struct Recording {
  std::string session_id;
  std::uint64_t start_us = 0;
};

/// Writes every cursor position and pointer event to the session log.
class RecordSink final : public PointerSink {
 public:
  using Target = std::function<std::optional<Recording>()>;
  using Writer = std::function<void(const std::string& session_id, const store::LogRecord&)>;

  RecordSink(Target target, Writer write) : target_(std::move(target)), write_(std::move(write)) {}

  RecordSink(store::TelemetryStore& store, Target target)
      : RecordSink(std::move(target), [&store](const std::string& id, const store::LogRecord& r) {
          store.append(id, r);
        }) {}

  void cursor(const mapping::CursorPosition& p, std::uint64_t t_us, std::uint64_t /*ingress_us*/) override {
    if (const auto r = target_()) {
      write_(r->session_id, {t_us > r->start_us ? t_us - r->start_us : 0, store::RecordKind::Cursor, store::cursor_body(p)});
    }
  }

  void pointer(const mapping::PointerEvent& e, std::uint64_t t_us) override {
    if (const auto r = target_()) {
      write_(r->session_id, {t_us > r->start_us ? t_us - r->start_us : 0, store::RecordKind::Pointer, store::pointer_body(e)});
    }
  }

 private:
  Target target_;
  Writer write_;
};

}  // namespace rehabridge::stream
