#pragma once

#include "rehabridge/error.hpp"
#include "rehabridge/protocol.hpp"
#include "rehabridge/safety.hpp"
#include "rehabridge/simulator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace rehabridge::session {

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

struct Block {
  std::string game_id;
  double torque_nm = 0.0;
  int levels_to_advance = 2;

  bool operator==(const Block&) const = default;
};

struct SessionPlan {
  std::vector<Block> blocks;
  std::uint32_t target_min_s = 20 * 60;
  std::uint32_t max_duration_s = 30 * 60;  // hard cap on active time

  bool operator==(const SessionPlan&) const = default;
};

inline constexpr double kLowTorqueNm = 8.0;
inline constexpr double kHighTorqueNm = 16.0;
inline constexpr int kLevelsPerBlock = 2;

inline void validate(const SessionPlan& plan) {
  if (plan.blocks.empty()) {
    throw Error(ErrorCode::InvalidPlan, "plan needs at least one block");
  }
  for (const auto& b : plan.blocks) {
    if (b.game_id.empty()) {
      throw Error(ErrorCode::InvalidPlan, "block without game id");
    }
    if (!(b.torque_nm >= 0.0 && b.torque_nm <= 30.0)) {
      throw Error(ErrorCode::InvalidPlan, "block torque outside [0, 30] N*m");
    }
    if (b.levels_to_advance < 1) {
      throw Error(ErrorCode::InvalidPlan, "levels_to_advance must be at least 1");
    }
  }
  if (plan.max_duration_s == 0 || plan.target_min_s > plan.max_duration_s) {
    throw Error(ErrorCode::InvalidPlan, "bad duration bounds");
  }
}

/// Two games, each played at low then high resistance, advancing after two
/// passed levels.
inline SessionPlan build_default_plan(std::span<const std::string> games) {
  if (games.size() < 2) {
    throw Error(ErrorCode::PlanUnavailable, "the default plan needs two configured games");
  }
  SessionPlan plan;
  for (std::size_t g = 0; g < 2; ++g) {
    plan.blocks.push_back({games[g], kLowTorqueNm, kLevelsPerBlock});
    plan.blocks.push_back({games[g], kHighTorqueNm, kLevelsPerBlock});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Inputs and commands
// ---------------------------------------------------------------------------

enum class LevelKind { LevelPassed, LevelFailed };
enum class LevelSource { UIManual, GameHook };

struct LevelEvent {
  LevelKind kind = LevelKind::LevelPassed;
  std::uint64_t t_us = 0;
  LevelSource source = LevelSource::UIManual;
};

/// Interlock state change as seen by the session: anything but Running
/// counts as paused.
struct SafetyChange {
  safety::Mode mode = safety::Mode::Running;
  std::uint64_t t_us = 0;
};

struct Tick {
  std::uint64_t t_us = 0;
};

struct StopRequest {
  std::uint64_t t_us = 0;
};

using Input = std::variant<LevelEvent, SafetyChange, Tick, StopRequest>;

inline std::uint64_t time_of(const Input& in) {
  return std::visit([](const auto& e) { return e.t_us; }, in);
}

enum class EndReason { PlanComplete, DurationCap, OperatorStop };

constexpr std::string_view to_string(EndReason r) noexcept {
  switch (r) {
    case EndReason::PlanComplete: return "PlanComplete";
    case EndReason::DurationCap: return "DurationCap";
    case EndReason::OperatorStop: return "OperatorStop";
  }
  return "?";
}

enum class CommandKind { SetTorque, OpenGame, EndSession, NotifyUI };

struct Command {
  CommandKind kind = CommandKind::NotifyUI;
  double torque_nm = 0.0;      // SetTorque
  std::string game_id;         // OpenGame
  EndReason reason = EndReason::PlanComplete;  // EndSession
  std::string note;            // NotifyUI

  bool operator==(const Command&) const = default;
};

// ---------------------------------------------------------------------------
// Record
// ---------------------------------------------------------------------------

struct PauseInterval {
  std::uint64_t start_us = 0;
  std::optional<std::uint64_t> end_us;

  bool operator==(const PauseInterval&) const = default;
};

struct BlockTrace {
  std::size_t block_index = 0;
  std::uint64_t entered_at_us = 0;
  std::optional<std::uint64_t> exited_at_us;
  int levels_passed = 0;
  int levels_failed = 0;
  std::vector<PauseInterval> pause_intervals;

  bool operator==(const BlockTrace&) const = default;
};

struct SessionRecord {
  std::string session_id;
  std::string subject_id;
  std::string started_at;  // wall clock, ISO-8601
  std::string ended_at;
  SessionPlan plan;
  std::vector<BlockTrace> block_trace;
  std::string telemetry_ref;
  std::optional<EndReason> end_reason;
  std::optional<std::uint64_t> ended_at_us;

  bool operator==(const SessionRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Deterministic executor for one session plan. Times are microseconds on a
/// monotonic clock starting at zero when the session starts.
class Session {
 public:
  struct Started;

  static Started start(SessionPlan plan, std::string session_id, std::string subject_id, std::string started_at = {});

  bool active() const noexcept { return !record_.end_reason.has_value(); }
  const SessionRecord& record() const noexcept { return record_; }
  const SessionPlan& plan() const noexcept { return record_.plan; }
  std::size_t current_block() const noexcept { return record_.block_trace.back().block_index; }
  int levels_in_block() const noexcept { return record_.block_trace.back().levels_passed; }
  double current_torque_nm() const { return plan().blocks[current_block()].torque_nm; }
  const std::string& current_game() const { return plan().blocks[current_block()].game_id; }
  bool paused() const noexcept { return paused_; }
  std::uint64_t now_us() const noexcept { return now_us_; }

  std::uint64_t paused_time_us(std::uint64_t at) const {
    std::uint64_t total = 0;
    for (const auto& b : record_.block_trace) {
      for (const auto& p : b.pause_intervals) {
        const std::uint64_t end = p.end_us.value_or(std::max(at, p.start_us));
        total += end - p.start_us;
      }
    }
    return total;
  }

  std::uint64_t active_time_us(std::uint64_t at) const { return at - paused_time_us(at); }

  std::vector<Command> advance(const Input& input) {
    if (!active()) {
      throw Error(ErrorCode::SessionClosed, "session " + record_.session_id + " has ended");
    }
    const std::uint64_t t = std::max(time_of(input), now_us_);
    now_us_ = t;
    std::vector<Command> out;

    if (active_time_us(t) >= static_cast<std::uint64_t>(plan().max_duration_s) * 1'000'000ULL) {
      end(t, EndReason::DurationCap, out);
      return out;
    }

    if (const auto* level = std::get_if<LevelEvent>(&input)) {
      on_level(*level, t, out);
    } else if (const auto* change = std::get_if<SafetyChange>(&input)) {
      on_safety(*change, t, out);
    } else if (std::holds_alternative<StopRequest>(input)) {
      end(t, EndReason::OperatorStop, out);
    }
    return out;
  }

 private:
  Session() = default;

  void on_level(const LevelEvent& e, std::uint64_t t, std::vector<Command>& out) {
    auto& trace = record_.block_trace.back();
    if (e.kind == LevelKind::LevelFailed) {
      ++trace.levels_failed;
      return;
    }
    ++trace.levels_passed;
    const auto& block = plan().blocks[trace.block_index];
    if (trace.levels_passed < block.levels_to_advance) {
      out.push_back({CommandKind::NotifyUI, 0.0, {}, {}, "level passed"});
      return;
    }
    const std::size_t next = trace.block_index + 1;
    if (next >= plan().blocks.size()) {
      end(t, EndReason::PlanComplete, out);
      return;
    }
    close_pause(trace, t);
    trace.exited_at_us = t;
    enter_block(next, t, out);
  }

  void on_safety(const SafetyChange& e, std::uint64_t t, std::vector<Command>& out) {
    const bool now_paused = e.mode != safety::Mode::Running;
    if (now_paused == paused_) {
      return;
    }
    paused_ = now_paused;
    auto& trace = record_.block_trace.back();
    if (paused_) {
      trace.pause_intervals.push_back({t, std::nullopt});
      out.push_back({CommandKind::NotifyUI, 0.0, {}, {}, "paused"});
    } else {
      close_pause(trace, t);
      out.push_back({CommandKind::NotifyUI, 0.0, {}, {}, "resumed"});
    }
  }

  void enter_block(std::size_t index, std::uint64_t t, std::vector<Command>& out) {
    const bool game_changes =
        record_.block_trace.empty() || plan().blocks[index].game_id != plan().blocks[index - 1].game_id;
    BlockTrace trace;
    trace.block_index = index;
    trace.entered_at_us = t;
    if (paused_) {
      trace.pause_intervals.push_back({t, std::nullopt});
    }
    record_.block_trace.push_back(trace);
    const auto& block = plan().blocks[index];
    if (game_changes) {
      out.push_back({CommandKind::OpenGame, 0.0, block.game_id, {}, {}});
    }
    out.push_back({CommandKind::SetTorque, block.torque_nm, {}, {}, {}});
    out.push_back({CommandKind::NotifyUI, 0.0, {}, {}, "block " + std::to_string(index)});
  }

  static void close_pause(BlockTrace& trace, std::uint64_t t) {
    if (!trace.pause_intervals.empty() && !trace.pause_intervals.back().end_us) {
      trace.pause_intervals.back().end_us = t;
    }
  }

  void end(std::uint64_t t, EndReason reason, std::vector<Command>& out) {
    auto& trace = record_.block_trace.back();
    close_pause(trace, t);
    trace.exited_at_us = t;
    record_.end_reason = reason;
    record_.ended_at_us = t;
    out.push_back({CommandKind::EndSession, 0.0, {}, reason, {}});
  }

  SessionRecord record_;
  std::uint64_t now_us_ = 0;
  bool paused_ = false;
};

struct Session::Started {
  Session session;
  std::vector<Command> commands;
};

inline Session::Started Session::start(SessionPlan plan, std::string session_id, std::string subject_id,
                                       std::string started_at) {
  validate(plan);
  Started s;
  s.session.record_.session_id = std::move(session_id);
  s.session.record_.subject_id = std::move(subject_id);
  s.session.record_.started_at = std::move(started_at);
  s.session.record_.telemetry_ref = "sessions/" + s.session.record_.session_id + ".jsonl";
  s.session.record_.plan = std::move(plan);
  s.session.enter_block(0, 0, s.commands);
  return s;
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

struct BlockSummary {
  std::size_t block_index = 0;
  std::string game_id;
  double torque_nm = 0.0;
  std::uint64_t duration_us = 0;
  std::uint64_t active_us = 0;
  int levels_passed = 0;
  std::size_t pause_count = 0;
  std::uint64_t pause_total_us = 0;
};

struct SessionSummary {
  std::string session_id;
  std::string subject_id;
  EndReason end_reason = EndReason::PlanComplete;
  std::uint64_t wall_us = 0;
  std::uint64_t active_us = 0;
  std::size_t pause_count = 0;
  std::uint64_t pause_total_us = 0;
  double mean_abs_excursion_rad = 0.0;
  std::size_t trigger_presses = 0;
  std::vector<BlockSummary> blocks;
};

/// Per-block and whole-session statistics. Excursion is the mean absolute
/// arm angle over the recorded telemetry; trigger presses count rising edges
/// of the raw trigger flag.
inline SessionSummary summarize(const Session& session, std::span<const protocol::TelemetryFrame> telemetry,
                                std::int32_t ticks_per_rev = sim::SimParams{}.ticks_per_rev) {
  if (session.active()) {
    throw Error(ErrorCode::SessionStillActive, "session " + session.record().session_id + " is still running");
  }
  const auto& rec = session.record();
  SessionSummary out;
  out.session_id = rec.session_id;
  out.subject_id = rec.subject_id;
  out.end_reason = *rec.end_reason;
  out.wall_us = *rec.ended_at_us;
  for (const auto& trace : rec.block_trace) {
    BlockSummary b;
    b.block_index = trace.block_index;
    b.game_id = rec.plan.blocks[trace.block_index].game_id;
    b.torque_nm = rec.plan.blocks[trace.block_index].torque_nm;
    b.duration_us = trace.exited_at_us.value_or(*rec.ended_at_us) - trace.entered_at_us;
    b.levels_passed = trace.levels_passed;
    b.pause_count = trace.pause_intervals.size();
    for (const auto& p : trace.pause_intervals) {
      b.pause_total_us += p.end_us.value_or(*rec.ended_at_us) - p.start_us;
    }
    b.active_us = b.duration_us - b.pause_total_us;
    out.pause_count += b.pause_count;
    out.pause_total_us += b.pause_total_us;
    out.blocks.push_back(std::move(b));
  }
  out.active_us = out.wall_us - out.pause_total_us;

  double sum = 0.0;
  bool last_trigger = false;
  for (const auto& t : telemetry) {
    sum += std::abs(sim::ticks_to_angle(t.encoder_arm, ticks_per_rev));
    if (t.trigger_pressed && !last_trigger) {
      ++out.trigger_presses;
    }
    last_trigger = t.trigger_pressed;
  }
  out.mean_abs_excursion_rad = telemetry.empty() ? 0.0 : sum / static_cast<double>(telemetry.size());
  return out;
}

inline std::string summary_csv(const SessionSummary& s) {
  std::ostringstream out;
  out.precision(17);
  out << "block_index,game_id,torque_nm,duration_s,active_s,levels_passed,pause_count,pause_total_s\r\n";
  for (const auto& b : s.blocks) {
    out << b.block_index << ',' << b.game_id << ',' << b.torque_nm << ',' << b.duration_us / 1e6 << ','
        << b.active_us / 1e6 << ',' << b.levels_passed << ',' << b.pause_count << ',' << b.pause_total_us / 1e6
        << "\r\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

using nlohmann::json;

inline void to_json(json& j, const Block& b) {
  j = json{{"game_id", b.game_id}, {"torque_nm", b.torque_nm}, {"levels_to_advance", b.levels_to_advance}};
}

inline void from_json(const json& j, Block& b) {
  j.at("game_id").get_to(b.game_id);
  j.at("torque_nm").get_to(b.torque_nm);
  b.levels_to_advance = j.value("levels_to_advance", kLevelsPerBlock);
}

inline void to_json(json& j, const SessionPlan& p) {
  j = json{{"blocks", p.blocks}, {"target_duration_s", {p.target_min_s, p.max_duration_s}}};
}

inline void from_json(const json& j, SessionPlan& p) {
  j.at("blocks").get_to(p.blocks);
  if (j.contains("target_duration_s")) {
    const auto& d = j.at("target_duration_s");
    p.target_min_s = d.at(0).get<std::uint32_t>();
    p.max_duration_s = d.at(1).get<std::uint32_t>();
  }
}

inline void to_json(json& j, const PauseInterval& p) {
  j = json{{"start_us", p.start_us}, {"end_us", p.end_us ? json(*p.end_us) : json(nullptr)}};
}

inline void from_json(const json& j, PauseInterval& p) {
  j.at("start_us").get_to(p.start_us);
  p.end_us = j.at("end_us").is_null() ? std::nullopt : std::optional(j.at("end_us").get<std::uint64_t>());
}

inline void to_json(json& j, const BlockTrace& b) {
  j = json{{"block_index", b.block_index},
           {"entered_at_us", b.entered_at_us},
           {"exited_at_us", b.exited_at_us ? json(*b.exited_at_us) : json(nullptr)},
           {"levels_passed", b.levels_passed},
           {"levels_failed", b.levels_failed},
           {"pause_intervals", b.pause_intervals}};
}

inline void from_json(const json& j, BlockTrace& b) {
  j.at("block_index").get_to(b.block_index);
  j.at("entered_at_us").get_to(b.entered_at_us);
  b.exited_at_us =
      j.at("exited_at_us").is_null() ? std::nullopt : std::optional(j.at("exited_at_us").get<std::uint64_t>());
  j.at("levels_passed").get_to(b.levels_passed);
  b.levels_failed = j.value("levels_failed", 0);
  j.at("pause_intervals").get_to(b.pause_intervals);
}

inline std::optional<EndReason> parse_end_reason(std::string_view s) {
  for (const auto r : {EndReason::PlanComplete, EndReason::DurationCap, EndReason::OperatorStop}) {
    if (to_string(r) == s) {
      return r;
    }
  }
  return std::nullopt;
}

inline void to_json(json& j, const SessionRecord& r) {
  j = json{{"session_id", r.session_id},
           {"subject_id", r.subject_id},
           {"started_at", r.started_at},
           {"ended_at", r.ended_at},
           {"plan", r.plan},
           {"block_trace", r.block_trace},
           {"telemetry_ref", r.telemetry_ref},
           {"end_reason", r.end_reason ? json(std::string(to_string(*r.end_reason))) : json(nullptr)},
           {"ended_at_us", r.ended_at_us ? json(*r.ended_at_us) : json(nullptr)}};
}

inline void from_json(const json& j, SessionRecord& r) {
  j.at("session_id").get_to(r.session_id);
  j.at("subject_id").get_to(r.subject_id);
  j.at("started_at").get_to(r.started_at);
  j.at("ended_at").get_to(r.ended_at);
  j.at("plan").get_to(r.plan);
  j.at("block_trace").get_to(r.block_trace);
  j.at("telemetry_ref").get_to(r.telemetry_ref);
  r.end_reason = j.at("end_reason").is_null() ? std::nullopt
                                              : parse_end_reason(j.at("end_reason").get<std::string>());
  r.ended_at_us =
      j.at("ended_at_us").is_null() ? std::nullopt : std::optional(j.at("ended_at_us").get<std::uint64_t>());
}

// ---------------------------------------------------------------------------
// Event log replay
// ---------------------------------------------------------------------------

/// Body of a "session" log record for an input. `block` and `levels` capture
/// the engine position after the input was applied so a truncated log still
/// describes a consistent trace.
inline json input_to_json(const Input& in, const Session& after) {
  json j;
  if (const auto* level = std::get_if<LevelEvent>(&in)) {
    j = {{"event", level->kind == LevelKind::LevelPassed ? "level_passed" : "level_failed"},
         {"source", level->source == LevelSource::UIManual ? "UIManual" : "GameHook"}};
  } else if (const auto* change = std::get_if<SafetyChange>(&in)) {
    j = {{"event", "safety"}, {"mode", std::string(safety::to_string(change->mode))}};
  } else if (std::holds_alternative<StopRequest>(in)) {
    j = {{"event", "stop"}};
  } else {
    j = {{"event", "tick"}};
  }
  if (j.contains("source")) {
    j["detail"] = j["source"];
  } else if (j.contains("mode")) {
    j["detail"] = j["mode"];
  }
  j["block"] = after.current_block();
  j["levels"] = after.levels_in_block();
  j["ended"] = !after.active();
  return j;
}

inline json start_to_json(const Session& s) {
  const auto& r = s.record();
  return json{{"event", "start"},     {"session_id", r.session_id}, {"subject_id", r.subject_id},
              {"started_at", r.started_at}, {"plan", r.plan},        {"block", 0},
              {"levels", 0},          {"ended", false}};
}

inline Input input_from_json(const json& j, std::uint64_t t_us) {
  const auto event = j.at("event").get<std::string>();
  if (event == "level_passed" || event == "level_failed") {
    return LevelEvent{event == "level_passed" ? LevelKind::LevelPassed : LevelKind::LevelFailed, t_us,
                      j.value("source", "UIManual") == "GameHook" ? LevelSource::GameHook : LevelSource::UIManual};
  }
  if (event == "safety") {
    const auto mode = j.at("mode").get<std::string>();
    for (const auto m : {safety::Mode::Disconnected, safety::Mode::Idle, safety::Mode::Running,
                         safety::Mode::SafetyPaused, safety::Mode::Faulted}) {
      if (safety::to_string(m) == mode) {
        return SafetyChange{m, t_us};
      }
    }
    throw Error(ErrorCode::ParseError, "unknown safety mode in session log: " + mode);
  }
  if (event == "stop") {
    return StopRequest{t_us};
  }
  if (event == "tick") {
    return Tick{t_us};
  }
  throw Error(ErrorCode::ParseError, "unknown session log event: " + event);
}

struct LoggedSessionEvent {
  std::uint64_t t_us = 0;
  json body;
};

/// Rebuilds a session from its logged events. The first event must be the
/// start record.
inline Session replay(std::span<const LoggedSessionEvent> events) {
  if (events.empty() || events.front().body.value("event", "") != "start") {
    throw Error(ErrorCode::ParseError, "session log does not begin with a start record");
  }
  const auto& first = events.front().body;
  auto started = Session::start(first.at("plan").get<SessionPlan>(), first.at("session_id").get<std::string>(),
                                first.at("subject_id").get<std::string>(), first.value("started_at", ""));
  Session s = std::move(started.session);
  for (const auto& e : events.subspan(1)) {
    s.advance(input_from_json(e.body, e.t_us));
  }
  return s;
}

}  // namespace rehabridge::session
