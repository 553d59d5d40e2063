#pragma once

#include "rehabridge/error.hpp"
#include "rehabridge/keyvalue.hpp"
#include "rehabridge/protocol.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rehabridge::mapping {

enum class MappingMode { Axis1D, Arc1D, Planar2D };

constexpr std::string_view to_string(MappingMode m) noexcept {
  switch (m) {
    case MappingMode::Axis1D: return "axis1d";
    case MappingMode::Arc1D: return "arc1d";
    case MappingMode::Planar2D: return "planar2d";
  }
  return "?";
}

inline MappingMode parse_mode(std::string_view s) {
  if (s == "axis1d") return MappingMode::Axis1D;
  if (s == "arc1d") return MappingMode::Arc1D;
  if (s == "planar2d") return MappingMode::Planar2D;
  throw Error(ErrorCode::InvalidProfile, "unknown mapping mode: " + std::string(s));
}

struct AxisRange {
  std::int32_t ticks_min = -512;
  std::int32_t ticks_max = 512;

  bool operator==(const AxisRange&) const = default;
};

struct ScreenRect {
  int x = 0;
  int y = 0;
  int width = 1920;
  int height = 1080;

  int right() const noexcept { return x + width - 1; }
  int bottom() const noexcept { return y + height - 1; }
  bool operator==(const ScreenRect&) const = default;
};

/// Pixel arc for Arc1D: angles measured counter-clockwise from +x with screen y pointing down.
struct ArcGeometry {
  double center_x = 960.0;
  double center_y = 1000.0;
  double radius = 800.0;
  double angle_lo_rad = std::numbers::pi * 0.75;
  double angle_hi_rad = std::numbers::pi * 0.25;

  bool operator==(const ArcGeometry&) const = default;
};

struct CalibrationProfile {
  MappingMode mode = MappingMode::Axis1D;
  /// axes[0] is the arm encoder; axes[1] is the second joint of a two-DOF
  /// device (reported in the encoder_motor field) and only used by Planar2D.
  std::array<AxisRange, 2> axes{};
  ScreenRect screen{};
  double ema_alpha = 0.2;
  std::int32_t deadband_ticks = 2;
  int fixed_y = 540;
  ArcGeometry arc{};

  bool operator==(const CalibrationProfile&) const = default;
};

inline void validate(const CalibrationProfile& p) {
  const auto axis_ok = [](const AxisRange& a) { return a.ticks_min < a.ticks_max; };
  if (!axis_ok(p.axes[0]) || (p.mode == MappingMode::Planar2D && !axis_ok(p.axes[1]))) {
    throw Error(ErrorCode::InvalidProfile, "ticks_min must be below ticks_max");
  }
  if (!(p.ema_alpha > 0.0 && p.ema_alpha <= 1.0)) {
    throw Error(ErrorCode::InvalidProfile, "ema_alpha must lie in (0, 1]");
  }
  if (p.screen.width <= 0 || p.screen.height <= 0) {
    throw Error(ErrorCode::InvalidProfile, "screen rectangle must have positive size");
  }
  if (p.deadband_ticks < 0) {
    throw Error(ErrorCode::InvalidProfile, "deadband must be non-negative");
  }
  if (p.mode == MappingMode::Arc1D && !(p.arc.radius > 0.0)) {
    throw Error(ErrorCode::InvalidProfile, "arc radius must be positive");
  }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMinCalibrationSamples = 50;
inline constexpr std::int64_t kMinCalibrationRangeTicks = 10;

enum class Axis { Arm = 0, Second = 1 };

inline std::int32_t axis_ticks(const protocol::TelemetryFrame& t, Axis axis) {
  return axis == Axis::Arm ? t.encoder_arm : t.encoder_motor;
}

/// Range of one encoder over an operator-guided sweep, widened by 1% of the
/// observed span on each side (rounded up to whole ticks).
inline AxisRange calibrate(std::span<const protocol::TelemetryFrame> sweep, Axis axis = Axis::Arm) {
  if (sweep.size() < kMinCalibrationSamples) {
    throw Error(ErrorCode::InsufficientSamples,
                "calibration needs at least 50 frames, got " + std::to_string(sweep.size()));
  }
  std::int64_t lo = axis_ticks(sweep.front(), axis);
  std::int64_t hi = lo;
  for (const auto& t : sweep) {
    lo = std::min<std::int64_t>(lo, axis_ticks(t, axis));
    hi = std::max<std::int64_t>(hi, axis_ticks(t, axis));
  }
  const std::int64_t span = hi - lo;
  if (span < kMinCalibrationRangeTicks) {
    throw Error(ErrorCode::CalibrationTooNarrow, "sweep covered only " + std::to_string(span) + " ticks");
  }
  const std::int64_t margin = (span + 99) / 100;
  return AxisRange{static_cast<std::int32_t>(lo - margin), static_cast<std::int32_t>(hi + margin)};
}

// ---------------------------------------------------------------------------
// Position mapping
// ---------------------------------------------------------------------------

struct CursorPosition {
  int x = 0;
  int y = 0;
  bool inside_workspace = true;

  bool operator==(const CursorPosition&) const = default;
};

/// Per-device filter memory for map_position.
struct CursorFilterState {
  std::optional<std::array<std::int32_t, 2>> accepted_ticks;
  std::optional<std::array<double, 2>> smoothed;
  std::optional<CursorPosition> last;
};

namespace detail {

struct Normalized {
  double u = 0.0;
  bool clamped = false;
};

inline Normalized normalize(std::int32_t ticks, const AxisRange& r) {
  const double u = (static_cast<double>(ticks) - r.ticks_min) / (static_cast<double>(r.ticks_max) - r.ticks_min);
  if (u < 0.0) return {0.0, true};
  if (u > 1.0) return {1.0, true};
  return {u, false};
}

}  // namespace detail

/// Unfiltered pixel target for the given encoder values, plus whether any
/// axis had to be clamped into the calibrated range.
inline std::pair<std::array<double, 2>, bool> target_pixels(std::array<std::int32_t, 2> ticks,
                                                            const CalibrationProfile& p) {
  const auto& r = p.screen;
  const auto a = detail::normalize(ticks[0], p.axes[0]);
  switch (p.mode) {
    case MappingMode::Axis1D:
      return {{r.x + a.u * (r.width - 1), static_cast<double>(p.fixed_y)}, a.clamped};
    case MappingMode::Arc1D: {
      const double phi = p.arc.angle_lo_rad + a.u * (p.arc.angle_hi_rad - p.arc.angle_lo_rad);
      return {{p.arc.center_x + p.arc.radius * std::cos(phi), p.arc.center_y - p.arc.radius * std::sin(phi)},
              a.clamped};
    }
    case MappingMode::Planar2D: {
      const auto b = detail::normalize(ticks[1], p.axes[1]);
      return {{r.x + a.u * (r.width - 1), r.y + b.u * (r.height - 1)}, a.clamped || b.clamped};
    }
  }
  return {{static_cast<double>(r.x), static_cast<double>(r.y)}, true};
}

/// Encoder sample -> cursor position.
///
/// A new encoder reading is only accepted when it moves more than
/// deadband_ticks away from the last accepted one; the pixel target of the
/// accepted reading is then smoothed with an exponential moving average and
/// rounded. Rounding happens on output only, never in the filter memory.
inline CursorPosition map_position(const protocol::TelemetryFrame& t, const CalibrationProfile& p,
                                   CursorFilterState& state) {
  const std::array<std::int32_t, 2> raw{t.encoder_arm, t.encoder_motor};
  if (!state.accepted_ticks) {
    state.accepted_ticks = raw;
  } else {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const std::int64_t delta = static_cast<std::int64_t>(raw[axis]) - (*state.accepted_ticks)[axis];
      if (std::abs(delta) > p.deadband_ticks) {
        (*state.accepted_ticks)[axis] = raw[axis];
      }
    }
  }

  const auto [target, clamped] = target_pixels(*state.accepted_ticks, p);
  if (!state.smoothed) {
    state.smoothed = target;
  } else {
    for (std::size_t i = 0; i < 2; ++i) {
      (*state.smoothed)[i] += p.ema_alpha * (target[i] - (*state.smoothed)[i]);
    }
  }

  const auto& r = p.screen;
  CursorPosition out;
  out.x = std::clamp(static_cast<int>(std::lround((*state.smoothed)[0])), r.x, r.right());
  out.y = std::clamp(static_cast<int>(std::lround((*state.smoothed)[1])), r.y, r.bottom());
  out.inside_workspace = !clamped;
  state.last = out;
  return out;
}

// ---------------------------------------------------------------------------
// Buttons
// ---------------------------------------------------------------------------

enum class PointerKind { Move, Press, Release };

constexpr std::string_view to_string(PointerKind k) noexcept {
  switch (k) {
    case PointerKind::Move: return "Move";
    case PointerKind::Press: return "Press";
    case PointerKind::Release: return "Release";
  }
  return "?";
}

struct PointerEvent {
  PointerKind kind = PointerKind::Move;
  CursorPosition position;
  std::uint32_t timestamp_us = 0;

  bool operator==(const PointerEvent&) const = default;
};

inline constexpr std::uint32_t kDebounceUs = 20'000;

struct DebounceState {
  bool stable_pressed = false;
  bool edge_pending = false;
  std::uint32_t edge_since_us = 0;
};

/// Trigger -> left-button Press/Release. An edge is reported once the new
/// level has held for the debounce window; shorter excursions are dropped.
/// Timestamps are compared modulo 2^32 so device clock wrap is harmless.
inline std::vector<PointerEvent> map_buttons(const protocol::TelemetryFrame& t, DebounceState& state,
                                             const CursorPosition& at, std::uint32_t debounce_us = kDebounceUs) {
  std::vector<PointerEvent> out;
  if (t.trigger_pressed == state.stable_pressed) {
    state.edge_pending = false;
    return out;
  }
  if (!state.edge_pending) {
    state.edge_pending = true;
    state.edge_since_us = t.timestamp_us;
  }
  const std::uint32_t held = t.timestamp_us - state.edge_since_us;
  if (held >= debounce_us) {
    state.stable_pressed = t.trigger_pressed;
    state.edge_pending = false;
    out.push_back({state.stable_pressed ? PointerKind::Press : PointerKind::Release, at, t.timestamp_us});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Profile file
// ---------------------------------------------------------------------------

inline CalibrationProfile profile_from(const kv::Document& doc, std::string_view prefix = "") {
  const std::string pre(prefix);
  CalibrationProfile p;
  p.mode = parse_mode(doc.get_string(pre + "mode", std::string(to_string(p.mode))));
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string axis = pre + "axis" + std::to_string(i) + ".";
    p.axes[i].ticks_min = static_cast<std::int32_t>(doc.get_int(axis + "ticks_min", p.axes[i].ticks_min));
    p.axes[i].ticks_max = static_cast<std::int32_t>(doc.get_int(axis + "ticks_max", p.axes[i].ticks_max));
  }
  p.screen.x = static_cast<int>(doc.get_int(pre + "screen.x", p.screen.x));
  p.screen.y = static_cast<int>(doc.get_int(pre + "screen.y", p.screen.y));
  p.screen.width = static_cast<int>(doc.get_int(pre + "screen.width", p.screen.width));
  p.screen.height = static_cast<int>(doc.get_int(pre + "screen.height", p.screen.height));
  p.ema_alpha = doc.get_double(pre + "ema_alpha", p.ema_alpha);
  p.deadband_ticks = static_cast<std::int32_t>(doc.get_int(pre + "deadband_ticks", p.deadband_ticks));
  p.fixed_y = static_cast<int>(doc.get_int(pre + "fixed_y", p.fixed_y));
  p.arc.center_x = doc.get_double(pre + "arc.center_x", p.arc.center_x);
  p.arc.center_y = doc.get_double(pre + "arc.center_y", p.arc.center_y);
  p.arc.radius = doc.get_double(pre + "arc.radius", p.arc.radius);
  p.arc.angle_lo_rad = doc.get_double(pre + "arc.angle_lo_rad", p.arc.angle_lo_rad);
  p.arc.angle_hi_rad = doc.get_double(pre + "arc.angle_hi_rad", p.arc.angle_hi_rad);
  validate(p);
  return p;
}

inline std::string profile_to_text(const CalibrationProfile& p) {
  kv::Document doc;
  doc.set("mode", std::string(to_string(p.mode)));
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string axis = "axis" + std::to_string(i) + ".";
    doc.set(axis + "ticks_min", std::to_string(p.axes[i].ticks_min));
    doc.set(axis + "ticks_max", std::to_string(p.axes[i].ticks_max));
  }
  doc.set("screen.x", std::to_string(p.screen.x));
  doc.set("screen.y", std::to_string(p.screen.y));
  doc.set("screen.width", std::to_string(p.screen.width));
  doc.set("screen.height", std::to_string(p.screen.height));
  doc.set("ema_alpha", kv::format_double(p.ema_alpha));
  doc.set("deadband_ticks", std::to_string(p.deadband_ticks));
  doc.set("fixed_y", std::to_string(p.fixed_y));
  doc.set("arc.center_x", kv::format_double(p.arc.center_x));
  doc.set("arc.center_y", kv::format_double(p.arc.center_y));
  doc.set("arc.radius", kv::format_double(p.arc.radius));
  doc.set("arc.angle_lo_rad", kv::format_double(p.arc.angle_lo_rad));
  doc.set("arc.angle_hi_rad", kv::format_double(p.arc.angle_hi_rad));
  return "# cursor calibration profile\n" + doc.to_string();
}

}  // namespace rehabridge::mapping
