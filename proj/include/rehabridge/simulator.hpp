#pragma once

#include "rehabridge/error.hpp"
#include "rehabridge/protocol.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace rehabridge::sim {

struct SimParams {
  double inertia_kgm2 = 0.05;
  double viscous_nms = 0.8;  // N*m*s/rad
  double dt_s = 0.001;
  std::int32_t ticks_per_rev = 4096;
  double theta_min_rad = -std::numbers::pi / 4.0;
  double theta_max_rad = std::numbers::pi / 4.0;
  std::int32_t gear_ratio = 20;
  double v_max_rad_s = 10.0;
  double omega_eps_rad_s = 1e-3;
};

inline void validate(const SimParams& p) {
  const bool ok = p.inertia_kgm2 > 0.0 && p.viscous_nms > 0.0 && p.dt_s > 0.0 && p.dt_s <= 0.01 &&
                  p.ticks_per_rev > 0 && p.theta_min_rad < p.theta_max_rad && p.v_max_rad_s > 0.0 &&
                  std::isfinite(p.theta_min_rad) && std::isfinite(p.theta_max_rad);
  if (!ok) {
    throw Error(ErrorCode::ModelFault, "invalid simulator parameters");
  }
}

inline std::uint64_t dt_us(const SimParams& p) { return static_cast<std::uint64_t>(std::llround(p.dt_s * 1e6)); }

struct ArmState {
  double angle_rad = 0.0;
  double velocity_rad_s = 0.0;
  double user_torque_nm = 0.0;
  double resist_nm = 0.0;
  bool hand_present = true;
  bool trigger_pressed = false;
  std::uint64_t time_us = 0;

  bool operator==(const ArmState&) const = default;
};

inline double kinetic_energy(const ArmState& s, const SimParams& p) {
  return 0.5 * p.inertia_kgm2 * s.velocity_rad_s * s.velocity_rad_s;
}

/// One semi-implicit Euler step of J*w' = tau_user - tau_resist*sign(w) - b*w.
///
/// Below omega_eps the resistance acts as static friction: it holds the arm
/// unless the user torque exceeds it. Friction may bring the arm to rest but
/// never reverses it.
inline ArmState step(ArmState s, const SimParams& p) {
  if (!std::isfinite(s.angle_rad) || !std::isfinite(s.velocity_rad_s) || !std::isfinite(s.user_torque_nm) ||
      !std::isfinite(s.resist_nm)) {
    throw Error(ErrorCode::ModelFault, "non-finite arm state");
  }
  s.time_us += dt_us(p);

  const double resist = std::abs(s.resist_nm);
  const double user = s.user_torque_nm;
  const double w = s.velocity_rad_s;

  if (std::abs(w) < p.omega_eps_rad_s && std::abs(user) <= resist) {
    s.velocity_rad_s = 0.0;
    return s;
  }

  const auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  const double direction = std::abs(w) >= p.omega_eps_rad_s ? sign(w) : sign(user);
  const double accel = (user - resist * direction - p.viscous_nms * w) / p.inertia_kgm2;
  double w_next = w + p.dt_s * accel;
  if (w != 0.0 && w_next * w < 0.0 && std::abs(user) <= resist) {
    w_next = 0.0;
  }
  w_next = std::clamp(w_next, -p.v_max_rad_s, p.v_max_rad_s);

  double angle = s.angle_rad + p.dt_s * w_next;
  if (angle >= p.theta_max_rad) {
    angle = p.theta_max_rad;
    w_next = std::min(w_next, 0.0);
  } else if (angle <= p.theta_min_rad) {
    angle = p.theta_min_rad;
    w_next = std::max(w_next, 0.0);
  }
  s.angle_rad = angle;
  s.velocity_rad_s = w_next;
  return s;
}

inline std::int32_t angle_to_ticks(double angle_rad, std::int32_t ticks_per_rev) {
  return static_cast<std::int32_t>(std::lround(angle_rad / (2.0 * std::numbers::pi) * ticks_per_rev));
}

inline double ticks_to_angle(std::int32_t ticks, std::int32_t ticks_per_rev) {
  return static_cast<double>(ticks) * 2.0 * std::numbers::pi / ticks_per_rev;
}

inline protocol::TelemetryFrame sample_telemetry(const ArmState& s, std::uint16_t seq, const SimParams& p) {
  protocol::TelemetryFrame t;
  t.seq = seq;
  t.timestamp_us = static_cast<std::uint32_t>(s.time_us & 0xFFFFFFFFULL);
  t.encoder_arm = angle_to_ticks(s.angle_rad, p.ticks_per_rev);
  t.encoder_motor = t.encoder_arm * p.gear_ratio;
  t.trigger_pressed = s.trigger_pressed;
  t.hand_present = s.hand_present;
  const long cnm = std::lround(s.resist_nm * 100.0);
  t.torque_actual_cnm = static_cast<std::int16_t>(std::clamp(cnm, -32768L, 32767L));
  return t;
}

// ---------------------------------------------------------------------------
// Scenario scripts
// ---------------------------------------------------------------------------

enum class ScenarioInput { UserTorque, Hand, Trigger };

struct ScenarioCommand {
  double t_s = 0.0;
  ScenarioInput input = ScenarioInput::UserTorque;
  double value = 0.0;

  bool operator==(const ScenarioCommand&) const = default;
};

/// Parses the plain-text scenario format, one command per line:
///
///   t=<seconds> user_torque=<nm>
///   t=<seconds> hand=<0|1>
///   t=<seconds> trigger=<0|1>
///
/// Blank lines and `#` comments are ignored. Commands are returned sorted by
/// time; commands sharing a timestamp keep file order.
inline std::vector<ScenarioCommand> parse_scenario(std::string_view text) {
  std::vector<ScenarioCommand> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;

  const auto fail = [&](const std::string& why) {
    throw Error(ErrorCode::ParseError, "scenario line " + std::to_string(line_no) + ": " + why);
  };
  const auto number = [&](std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
      fail("bad number '" + std::string(s) + "'");
    }
    return v;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    std::istringstream tokens(line);
    std::string time_tok;
    std::string cmd_tok;
    if (!(tokens >> time_tok)) {
      continue;
    }
    if (!(tokens >> cmd_tok)) {
      fail("missing command");
    }
    std::string extra;
    if (tokens >> extra) {
      fail("trailing token '" + extra + "'");
    }
    if (time_tok.rfind("t=", 0) != 0) {
      fail("expected t=<seconds>");
    }
    ScenarioCommand cmd;
    cmd.t_s = number(std::string_view(time_tok).substr(2));
    if (cmd.t_s < 0.0) {
      fail("negative time");
    }
    const auto eq = cmd_tok.find('=');
    if (eq == std::string::npos) {
      fail("expected key=value");
    }
    const std::string key = cmd_tok.substr(0, eq);
    cmd.value = number(std::string_view(cmd_tok).substr(eq + 1));
    if (key == "user_torque") {
      cmd.input = ScenarioInput::UserTorque;
    } else if (key == "hand" || key == "trigger") {
      cmd.input = key == "hand" ? ScenarioInput::Hand : ScenarioInput::Trigger;
      if (cmd.value != 0.0 && cmd.value != 1.0) {
        fail(key + " must be 0 or 1");
      }
    } else {
      fail("unknown command '" + key + "'");
    }
    out.push_back(cmd);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ScenarioCommand& a, const ScenarioCommand& b) { return a.t_s < b.t_s; });
  return out;
}

// ---------------------------------------------------------------------------
// Simulated device
// ---------------------------------------------------------------------------

struct DeviceTiming {
  std::uint64_t telemetry_period_us = 10'000;  // 100 Hz
  std::uint64_t heartbeat_period_us = 200'000;
};

/// Protocol-identical stand-in for the robot. Host bytes go in through
/// receive(); each step() advances the physics by one dt and returns the
/// bytes the device would put on the wire during that step. External inputs
/// are queued and applied at the next step boundary.
class SimulatedDevice {
 public:
  explicit SimulatedDevice(SimParams params = {}, std::vector<ScenarioCommand> scenario = {},
                           DeviceTiming timing = {})
      : params_(params), timing_(timing), scenario_(std::move(scenario)) {
    validate(params_);
  }

  void receive(std::span<const std::uint8_t> bytes) {
    const auto result = protocol::decode_stream(bytes, parser_);
    for (const auto& f : result.frames) {
      host_frames_.push_back(f);
      pending_.push_back(f);
    }
    host_errors_ += result.errors.size();
  }

  void set_user_torque(double nm) { pending_.push_back(UserTorque{nm}); }
  void set_hand_presence(bool present) { pending_.push_back(HandFlag{present}); }
  void press_trigger(bool pressed) { pending_.push_back(TriggerFlag{pressed}); }

  /// While muted the device keeps simulating but emits nothing (link fault injection).
  void set_muted(bool muted) { muted_ = muted; }

  std::vector<std::uint8_t> step() {
    apply_scenario();
    apply_pending();
    state_ = sim::step(state_, params_);

    std::vector<std::uint8_t> out;
    if (muted_) {
      return out;
    }
    if (state_.time_us % timing_.telemetry_period_us == 0) {
      const auto bytes = protocol::encode_frame(protocol::encode_telemetry(sample_telemetry(state_, seq_++, params_)));
      out.insert(out.end(), bytes.begin(), bytes.end());
    }
    if (state_.time_us % timing_.heartbeat_period_us == 0) {
      const auto bytes = protocol::encode_frame(protocol::encode_heartbeat(heartbeat_seq_++));
      out.insert(out.end(), bytes.begin(), bytes.end());
    }
    return out;
  }

  const ArmState& state() const noexcept { return state_; }
  const SimParams& params() const noexcept { return params_; }
  const std::vector<protocol::Frame>& host_frames() const noexcept { return host_frames_; }
  std::size_t host_errors() const noexcept { return host_errors_; }

 private:
  struct UserTorque {
    double nm;
  };
  struct HandFlag {
    bool present;
  };
  struct TriggerFlag {
    bool pressed;
  };
  using Input = std::variant<protocol::Frame, UserTorque, HandFlag, TriggerFlag>;

  void apply_scenario() {
    while (next_cmd_ < scenario_.size() &&
           std::llround(scenario_[next_cmd_].t_s * 1e6) <= static_cast<long long>(state_.time_us + dt_us(params_))) {
      const auto& c = scenario_[next_cmd_++];
      switch (c.input) {
        case ScenarioInput::UserTorque: state_.user_torque_nm = c.value; break;
        case ScenarioInput::Hand: state_.hand_present = c.value != 0.0; break;
        case ScenarioInput::Trigger: state_.trigger_pressed = c.value != 0.0; break;
      }
    }
  }

  void apply_pending() {
    for (auto& input : pending_) {
      if (const auto* f = std::get_if<protocol::Frame>(&input)) {
        apply_host_frame(*f);
      } else if (const auto* u = std::get_if<UserTorque>(&input)) {
        state_.user_torque_nm = u->nm;
      } else if (const auto* h = std::get_if<HandFlag>(&input)) {
        state_.hand_present = h->present;
      } else if (const auto* t = std::get_if<TriggerFlag>(&input)) {
        state_.trigger_pressed = t->pressed;
      }
    }
    pending_.clear();
  }

  void apply_host_frame(const protocol::Frame& f) {
    switch (f.type) {
      case protocol::MsgType::TorqueCmd: {
        try {
          const auto cmd = protocol::decode_torque_command(f);
          state_.resist_nm = cmd.mode == protocol::TorqueMode::Resist ? cmd.resist_cnm / 100.0 : 0.0;
        } catch (const Error&) {
          ++host_errors_;
        }
        break;
      }
      case protocol::MsgType::Stop: state_.resist_nm = 0.0; break;
      case protocol::MsgType::Heartbeat:
      case protocol::MsgType::Telemetry: break;
    }
  }

  SimParams params_;
  DeviceTiming timing_;
  std::vector<ScenarioCommand> scenario_;
  std::size_t next_cmd_ = 0;
  ArmState state_;
  std::deque<Input> pending_;
  protocol::ParserState parser_;
  std::vector<protocol::Frame> host_frames_;
  std::size_t host_errors_ = 0;
  std::uint16_t seq_ = 0;
  std::uint16_t heartbeat_seq_ = 0;
  bool muted_ = false;
};

}  // namespace rehabridge::sim
