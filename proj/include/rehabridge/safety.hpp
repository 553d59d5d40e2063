#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace rehabridge::safety {

enum class Mode { Disconnected, Idle, Running, SafetyPaused, Faulted };
enum class Cause { None, HandOff, HeartbeatTimeout, CrcBurst, OperatorStop };
enum class EventKind { HandOff, HandOn, Telemetry, HeartbeatMiss, CrcError, Connect, Disconnect, Start, Stop };
enum class ActionKind { FreezeCursor, ResumeCursor, SendStop, SendTorque, NotifyUI };

constexpr std::string_view to_string(Mode m) noexcept {
  switch (m) {
    case Mode::Disconnected: return "Disconnected";
    case Mode::Idle: return "Idle";
    case Mode::Running: return "Running";
    case Mode::SafetyPaused: return "SafetyPaused";
    case Mode::Faulted: return "Faulted";
  }
  return "?";
}

constexpr std::string_view to_string(Cause c) noexcept {
  switch (c) {
    case Cause::None: return "None";
    case Cause::HandOff: return "HandOff";
    case Cause::HeartbeatTimeout: return "HeartbeatTimeout";
    case Cause::CrcBurst: return "CrcBurst";
    case Cause::OperatorStop: return "OperatorStop";
  }
  return "?";
}

constexpr std::string_view to_string(EventKind k) noexcept {
  switch (k) {
    case EventKind::HandOff: return "HandOff";
    case EventKind::HandOn: return "HandOn";
    case EventKind::Telemetry: return "Telemetry";
    case EventKind::HeartbeatMiss: return "HeartbeatMiss";
    case EventKind::CrcError: return "CrcError";
    case EventKind::Connect: return "Connect";
    case EventKind::Disconnect: return "Disconnect";
    case EventKind::Start: return "Start";
    case EventKind::Stop: return "Stop";
  }
  return "?";
}

constexpr std::string_view to_string(ActionKind k) noexcept {
  switch (k) {
    case ActionKind::FreezeCursor: return "FreezeCursor";
    case ActionKind::ResumeCursor: return "ResumeCursor";
    case ActionKind::SendStop: return "SendStop";
    case ActionKind::SendTorque: return "SendTorque";
    case ActionKind::NotifyUI: return "NotifyUI";
  }
  return "?";
}

struct Config {
  std::uint64_t resume_dwell_us = 500'000;
  std::uint64_t heartbeat_period_us = 200'000;
  int heartbeat_miss_limit = 3;
  std::size_t crc_burst_limit = 20;  // more than this many within the window faults
  std::uint64_t crc_window_us = 1'000'000;
};

struct Event {
  EventKind kind = EventKind::Telemetry;
  std::uint64_t timestamp_us = 0;
  std::uint16_t torque_cnm = 0;  // Start only: resistance level to apply

  bool operator==(const Event&) const = default;
};

struct Action {
  ActionKind kind = ActionKind::NotifyUI;
  std::uint16_t torque_cnm = 0;  // SendTorque only
  std::string note;              // NotifyUI only, empty for plain state changes

  bool operator==(const Action&) const = default;
};

struct State {
  Mode mode = Mode::Disconnected;
  std::uint64_t since_us = 0;
  Cause cause = Cause::None;

  bool hand_present = false;
  std::uint64_t hand_on_since_us = 0;
  int consecutive_misses = 0;
  std::vector<std::uint64_t> recent_crc_errors;
  std::uint16_t torque_cnm = 0;  // restored on resume
  std::uint64_t clock_us = 0;

  bool operator==(const State&) const = default;
};

struct Transition {
  State state;
  std::vector<Action> actions;
};

/// Cursor and pointer output is only ever allowed while Running.
constexpr bool cursor_enabled(const State& s) noexcept { return s.mode == Mode::Running; }

/// Records a new resistance level so a resume after a pause restores it.
inline State with_torque_level(State s, std::uint16_t torque_cnm) {
  s.torque_cnm = torque_cnm;
  return s;
}

/// The interlock transition function. Total and deterministic; effects are
/// returned as actions for the caller to execute.
inline Transition transition(const State& current, const Event& e, const Config& cfg = {}) {
  Transition out{current, {}};
  State& s = out.state;
  auto& actions = out.actions;
  const std::uint64_t t = std::max(e.timestamp_us, current.clock_us);
  s.clock_us = t;

  const auto enter = [&](Mode mode, Cause cause) {
    const bool leaving_running = s.mode == Mode::Running && mode != Mode::Running;
    if (leaving_running) {
      actions.push_back({ActionKind::FreezeCursor, 0, {}});
      actions.push_back({ActionKind::SendStop, 0, {}});
    }
    if (mode == Mode::Running) {
      actions.push_back({ActionKind::SendTorque, s.torque_cnm, {}});
      actions.push_back({ActionKind::ResumeCursor, 0, {}});
    }
    s.mode = mode;
    s.cause = cause;
    s.since_us = t;
    actions.push_back({ActionKind::NotifyUI, 0, {}});
  };
  const auto reject = [&](std::string_view why) {
    actions.push_back({ActionKind::NotifyUI, 0,
                       "rejected " + std::string(to_string(e.kind)) + " while " + std::string(to_string(s.mode)) +
                           (why.empty() ? "" : ": " + std::string(why))});
  };

  switch (e.kind) {
    case EventKind::HandOn:
      if (!s.hand_present) {
        s.hand_present = true;
        s.hand_on_since_us = t;
      }
      break;
    case EventKind::HandOff: s.hand_present = false; break;
    case EventKind::Telemetry: s.consecutive_misses = 0; break;
    case EventKind::HeartbeatMiss: ++s.consecutive_misses; break;
    case EventKind::CrcError:
      s.recent_crc_errors.push_back(t);
      std::erase_if(s.recent_crc_errors, [&](std::uint64_t at) { return t - at >= cfg.crc_window_us; });
      break;
    default: break;
  }

  if (s.mode == Mode::Disconnected) {
    if (e.kind == EventKind::Connect) {
      s.consecutive_misses = 0;
      s.recent_crc_errors.clear();
      enter(Mode::Idle, Cause::None);
    } else if (e.kind == EventKind::Start || e.kind == EventKind::Stop) {
      reject("no device connected");
    }
    return out;
  }

  if (e.kind == EventKind::Disconnect) {
    enter(Mode::Disconnected, Cause::None);
    return out;
  }

  if (s.mode == Mode::Faulted) {
    if (e.kind == EventKind::Start || e.kind == EventKind::Connect) {
      reject("fault clears only by reconnecting");
    }
    return out;
  }

  if (s.consecutive_misses >= cfg.heartbeat_miss_limit) {
    enter(Mode::Faulted, Cause::HeartbeatTimeout);
    return out;
  }
  if (s.recent_crc_errors.size() > cfg.crc_burst_limit) {
    enter(Mode::Faulted, Cause::CrcBurst);
    return out;
  }

  switch (s.mode) {
    case Mode::Idle:
      if (e.kind == EventKind::Start) {
        s.torque_cnm = e.torque_cnm;
        if (s.hand_present) {
          enter(Mode::Running, Cause::None);
        } else {
          enter(Mode::SafetyPaused, Cause::HandOff);
        }
      } else if (e.kind == EventKind::Connect) {
        reject("already connected");
      }
      break;

    case Mode::Running:
      if (e.kind == EventKind::HandOff) {
        enter(Mode::SafetyPaused, Cause::HandOff);
      } else if (e.kind == EventKind::Stop) {
        enter(Mode::Idle, Cause::OperatorStop);
      } else if (e.kind == EventKind::Start || e.kind == EventKind::Connect) {
        reject("already running");
      }
      break;

    case Mode::SafetyPaused:
      if (e.kind == EventKind::Stop) {
        enter(Mode::Idle, Cause::OperatorStop);
      } else if (e.kind == EventKind::Start || e.kind == EventKind::Connect) {
        reject("session already started");
      } else if (s.hand_present && t - s.hand_on_since_us >= cfg.resume_dwell_us) {
        enter(Mode::Running, Cause::None);
      }
      break;

    case Mode::Disconnected:
    case Mode::Faulted: break;
  }
  return out;
}

}  // namespace rehabridge::safety
