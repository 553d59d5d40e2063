#pragma once

/*
 * Host <-> robot serial framing.
 *
 *   +------+------+------+--------+-----------+---------+
 *   | 0xAA | 0x55 | type | length | payload   | CRC16   |
 *   +------+------+------+--------+-----------+---------+
 *     1      1      1      1        0..255      2, LE
 *
 * CRC-16/CCITT-FALSE covers type, length and payload. All multi-byte fields
 * are little-endian.
 */

#include "rehabridge/crc16.hpp"
#include "rehabridge/error.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace rehabridge::protocol {

inline constexpr std::uint8_t kSof1 = 0xAA;
inline constexpr std::uint8_t kSof2 = 0x55;
inline constexpr std::size_t kHeaderSize = 4;  // SOF1 SOF2 type length
inline constexpr std::size_t kCrcSize = 2;
inline constexpr std::size_t kMaxPayload = 255;
inline constexpr std::size_t kOverhead = kHeaderSize + kCrcSize;

/// 30 N*m hardware envelope, in centi-newton-meters.
inline constexpr std::int32_t kTorqueEnvelopeCnm = 3000;

enum class MsgType : std::uint8_t {
  Telemetry = 0x01,  // robot -> host
  TorqueCmd = 0x02,  // host -> robot
  Heartbeat = 0x03,  // both directions
  Stop = 0x04,       // host -> robot
};

constexpr bool is_known_type(std::uint8_t raw) noexcept { return raw >= 0x01 && raw <= 0x04; }

constexpr std::string_view to_string(MsgType type) noexcept {
  switch (type) {
    case MsgType::Telemetry: return "TELEMETRY";
    case MsgType::TorqueCmd: return "TORQUE_CMD";
    case MsgType::Heartbeat: return "HEARTBEAT";
    case MsgType::Stop: return "STOP";
  }
  return "UNKNOWN";
}

/// Fixed payload size for each message kind.
constexpr std::size_t payload_size(MsgType type) noexcept {
  switch (type) {
    case MsgType::Telemetry: return 17;
    case MsgType::TorqueCmd: return 3;
    case MsgType::Heartbeat: return 2;
    case MsgType::Stop: return 0;
  }
  return 0;
}

struct Frame {
  MsgType type = MsgType::Stop;
  std::vector<std::uint8_t> payload;

  bool operator==(const Frame&) const = default;
};

enum class DecodeErrorKind : std::uint8_t { BadCrc, BadLength, UnknownType, Desync };

constexpr std::string_view to_string(DecodeErrorKind kind) noexcept {
  switch (kind) {
    case DecodeErrorKind::BadCrc: return "BadCrc";
    case DecodeErrorKind::BadLength: return "BadLength";
    case DecodeErrorKind::UnknownType: return "UnknownType";
    case DecodeErrorKind::Desync: return "Desync";
  }
  return "?";
}

struct DecodeError {
  DecodeErrorKind kind = DecodeErrorKind::Desync;
  std::uint8_t raw_type = 0;  // only meaningful for UnknownType / BadLength

  bool operator==(const DecodeError&) const = default;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFFU));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFU));
  }
}

inline std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) {
    v = (v << 8) | in[at + static_cast<std::size_t>(i)];
  }
  return v;
}

}  // namespace detail

/// Serializes a frame. Throws Error(BadLength) for payloads over 255 bytes.
inline std::vector<std::uint8_t> encode_frame(const Frame& frame) {
  if (frame.payload.size() > kMaxPayload) {
    throw Error(ErrorCode::BadLength, "frame payload exceeds 255 bytes");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kOverhead + frame.payload.size());
  out.push_back(kSof1);
  out.push_back(kSof2);
  out.push_back(static_cast<std::uint8_t>(frame.type));
  out.push_back(static_cast<std::uint8_t>(frame.payload.size()));
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  const auto crc = crc16_ccitt_false(std::span(out).subspan(2));
  detail::put_u16(out, crc);
  return out;
}

/// Incremental parser state. Holds the unconsumed tail of the stream and
/// whether the parser is currently hunting for a start-of-frame marker.
struct ParserState {
  std::vector<std::uint8_t> pending;
  bool resyncing = false;

  bool operator==(const ParserState&) const = default;
};

struct DecodeResult {
  std::vector<Frame> frames;
  std::vector<DecodeError> errors;
};

/// Decodes every complete frame in `pending ++ bytes`. Incomplete trailing
/// data stays in `state`. A Desync is reported once per resynchronization
/// episode; a BadCrc found while already resyncing belongs to that episode
/// and is not reported again.
inline void decode_stream(std::span<const std::uint8_t> bytes, ParserState& state, DecodeResult& out) {
  auto& buf = state.pending;
  buf.insert(buf.end(), bytes.begin(), bytes.end());

  std::size_t pos = 0;
  const std::size_t size = buf.size();

  const auto skip_byte = [&] {
    if (!state.resyncing) {
      out.errors.push_back({DecodeErrorKind::Desync, 0});
      state.resyncing = true;
    }
    ++pos;
  };

  while (pos < size) {
    const std::size_t remaining = size - pos;
    if (buf[pos] != kSof1) {
      skip_byte();
      continue;
    }
    if (remaining < 2) {
      break;
    }
    if (buf[pos + 1] != kSof2) {
      skip_byte();
      continue;
    }
    if (remaining < kHeaderSize) {
      break;
    }
    const std::uint8_t raw_type = buf[pos + 2];
    const std::size_t length = buf[pos + 3];
    const std::size_t total = kOverhead + length;
    if (remaining < total) {
      break;
    }

    const auto body = std::span<const std::uint8_t>(buf).subspan(pos + 2, 2 + length);
    const std::uint16_t received = detail::get_u16(buf, pos + kHeaderSize + length);
    if (crc16_ccitt_false(body) != received) {
      if (!state.resyncing) {
        out.errors.push_back({DecodeErrorKind::BadCrc, raw_type});
        state.resyncing = true;
      }
      // The start marker may have been a false positive; rescan from the next byte.
      ++pos;
      continue;
    }

    state.resyncing = false;
    pos += total;
    if (!is_known_type(raw_type)) {
      out.errors.push_back({DecodeErrorKind::UnknownType, raw_type});
      continue;
    }
    const auto type = static_cast<MsgType>(raw_type);
    if (length != payload_size(type)) {
      out.errors.push_back({DecodeErrorKind::BadLength, raw_type});
      continue;
    }
    out.frames.push_back(Frame{type, std::vector<std::uint8_t>(body.begin() + 2, body.end())});
  }

  buf.erase(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(pos));
}

inline DecodeResult decode_stream(std::span<const std::uint8_t> bytes, ParserState& state) {
  DecodeResult out;
  decode_stream(bytes, state, out);
  return out;
}

// ---------------------------------------------------------------------------
// Typed payloads
// ---------------------------------------------------------------------------

struct TelemetryFrame {
  std::uint16_t seq = 0;
  std::uint32_t timestamp_us = 0;
  std::int32_t encoder_arm = 0;
  std::int32_t encoder_motor = 0;
  bool trigger_pressed = false;
  bool hand_present = false;
  std::int16_t torque_actual_cnm = 0;

  bool operator==(const TelemetryFrame&) const = default;
};

inline constexpr std::uint8_t kFlagTrigger = 0x01;
inline constexpr std::uint8_t kFlagHandPresent = 0x02;

inline bool within_envelope(const TelemetryFrame& t, std::int32_t envelope_cnm = kTorqueEnvelopeCnm) {
  return std::abs(static_cast<std::int32_t>(t.torque_actual_cnm)) <= envelope_cnm;
}

inline Frame encode_telemetry(const TelemetryFrame& t) {
  Frame f{MsgType::Telemetry, {}};
  auto& p = f.payload;
  p.reserve(payload_size(MsgType::Telemetry));
  detail::put_u16(p, t.seq);
  detail::put_u32(p, t.timestamp_us);
  detail::put_u32(p, static_cast<std::uint32_t>(t.encoder_arm));
  detail::put_u32(p, static_cast<std::uint32_t>(t.encoder_motor));
  p.push_back(static_cast<std::uint8_t>((t.trigger_pressed ? kFlagTrigger : 0) |
                                        (t.hand_present ? kFlagHandPresent : 0)));
  detail::put_u16(p, static_cast<std::uint16_t>(t.torque_actual_cnm));
  return f;
}

inline TelemetryFrame decode_telemetry(const Frame& f) {
  if (f.type != MsgType::Telemetry) {
    throw Error(ErrorCode::ParseError, "not a telemetry frame");
  }
  if (f.payload.size() != payload_size(MsgType::Telemetry)) {
    throw Error(ErrorCode::BadLength, "telemetry payload must be 17 bytes");
  }
  const std::span<const std::uint8_t> p(f.payload);
  TelemetryFrame t;
  t.seq = detail::get_u16(p, 0);
  t.timestamp_us = detail::get_u32(p, 2);
  t.encoder_arm = static_cast<std::int32_t>(detail::get_u32(p, 6));
  t.encoder_motor = static_cast<std::int32_t>(detail::get_u32(p, 10));
  t.trigger_pressed = (p[14] & kFlagTrigger) != 0;
  t.hand_present = (p[14] & kFlagHandPresent) != 0;
  t.torque_actual_cnm = static_cast<std::int16_t>(detail::get_u16(p, 15));
  return t;
}

enum class TorqueMode : std::uint8_t { Idle = 0, Resist = 1 };

struct TorqueCommand {
  std::uint16_t resist_cnm = 0;
  TorqueMode mode = TorqueMode::Idle;

  bool operator==(const TorqueCommand&) const = default;
};

/// Converts newton-meters to the wire unit, rejecting values outside the envelope.
inline std::uint16_t torque_nm_to_cnm(double nm) {
  if (!std::isfinite(nm) || nm < 0.0 || nm * 100.0 > kTorqueEnvelopeCnm + 1e-9) {
    throw Error(ErrorCode::IllegalState, "torque outside [0, 30] N*m");
  }
  return static_cast<std::uint16_t>(std::lround(nm * 100.0));
}

inline Frame encode_torque_command(const TorqueCommand& cmd) {
  if (cmd.resist_cnm > kTorqueEnvelopeCnm) {
    throw Error(ErrorCode::IllegalState, "torque command exceeds 3000 cN*m");
  }
  Frame f{MsgType::TorqueCmd, {}};
  detail::put_u16(f.payload, cmd.resist_cnm);
  f.payload.push_back(static_cast<std::uint8_t>(cmd.mode));
  return f;
}

inline TorqueCommand decode_torque_command(const Frame& f) {
  if (f.type != MsgType::TorqueCmd) {
    throw Error(ErrorCode::ParseError, "not a torque command frame");
  }
  if (f.payload.size() != payload_size(MsgType::TorqueCmd)) {
    throw Error(ErrorCode::BadLength, "torque command payload must be 3 bytes");
  }
  TorqueCommand cmd;
  cmd.resist_cnm = detail::get_u16(f.payload, 0);
  if (f.payload[2] > 1) {
    throw Error(ErrorCode::ParseError, "unknown torque mode");
  }
  cmd.mode = static_cast<TorqueMode>(f.payload[2]);
  return cmd;
}

inline Frame encode_heartbeat(std::uint16_t seq) {
  Frame f{MsgType::Heartbeat, {}};
  detail::put_u16(f.payload, seq);
  return f;
}

inline std::uint16_t decode_heartbeat(const Frame& f) {
  if (f.type != MsgType::Heartbeat || f.payload.size() != payload_size(MsgType::Heartbeat)) {
    throw Error(ErrorCode::BadLength, "heartbeat payload must be 2 bytes");
  }
  return detail::get_u16(f.payload, 0);
}

inline Frame make_stop() { return Frame{MsgType::Stop, {}}; }

}  // namespace rehabridge::protocol
