#include "rehabridge/protocol.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>
#include <string>

using namespace rehabridge;
using namespace rehabridge::protocol;

namespace {

// Straight polynomial long division, one bit at a time. Independent of the
// table-driven implementation.
std::uint16_t crc16_bitwise(std::span<const std::uint8_t> data) {
  std::uint32_t reg = 0xFFFF;
  for (const auto byte : data) {
    for (int bit = 7; bit >= 0; --bit) {
      const bool in = ((byte >> bit) & 1U) != 0;
      const bool top = (reg & 0x8000U) != 0;
      reg = (reg << 1) & 0xFFFFU;
      if (in != top) {
        reg ^= 0x1021U;
      }
    }
  }
  return static_cast<std::uint16_t>(reg);
}

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

std::vector<std::uint8_t> parse_hex(const std::string& hex) {
  std::vector<std::uint8_t> out;
  std::istringstream in(hex);
  std::string tok;
  while (in >> tok) {
    out.push_back(static_cast<std::uint8_t>(std::stoul(tok, nullptr, 16)));
  }
  return out;
}

TelemetryFrame random_telemetry(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> torque(-kTorqueEnvelopeCnm, kTorqueEnvelopeCnm);
  TelemetryFrame t;
  t.seq = static_cast<std::uint16_t>(rng());
  t.timestamp_us = static_cast<std::uint32_t>(rng());
  t.encoder_arm = static_cast<std::int32_t>(rng());
  t.encoder_motor = static_cast<std::int32_t>(rng());
  t.trigger_pressed = (rng() & 1U) != 0;
  t.hand_present = (rng() & 1U) != 0;
  t.torque_actual_cnm = static_cast<std::int16_t>(torque(rng));
  return t;
}

}  // namespace

TEST(Crc16, CheckValueMatchesBitwiseReference) {
  const auto check = bytes_of("123456789");
  EXPECT_EQ(crc16_bitwise(check), 0x29B1);
  EXPECT_EQ(crc16_ccitt_false(check), 0x29B1);
}

TEST(Crc16, TableAgreesWithBitwiseOnRandomData) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::uint8_t> data(rng() % 300);
    for (auto& b : data) {
      b = static_cast<std::uint8_t>(rng());
    }
    ASSERT_EQ(crc16_ccitt_false(data), crc16_bitwise(data));
  }
}

TEST(EncodeFrame, StopFrameLayout) {
  const auto bytes = encode_frame(make_stop());
  const std::vector<std::uint8_t> body{0x04, 0x00};
  const auto crc = crc16_bitwise(body);
  const std::vector<std::uint8_t> expected{0xAA, 0x55, 0x04, 0x00, static_cast<std::uint8_t>(crc & 0xFF),
                                           static_cast<std::uint8_t>(crc >> 8)};
  EXPECT_EQ(bytes, expected);
}

TEST(EncodeFrame, RejectsOversizedPayload) {
  Frame f{MsgType::Telemetry, std::vector<std::uint8_t>(256, 0)};
  try {
    encode_frame(f);
    FAIL() << "expected BadLength";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadLength);
  }
}

TEST(DecodeStream, ConformanceVectors) {
  std::ifstream in(std::string(REHABRIDGE_TEST_DATA) + "/conformance_vectors.txt");
  ASSERT_TRUE(in) << "conformance vector file missing";
  std::string line;
  int count = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream fields(line);
    std::string name, frames, errors, hex;
    std::getline(fields, name, ';');
    std::getline(fields, frames, ';');
    std::getline(fields, errors, ';');
    std::getline(fields, hex);
    SCOPED_TRACE(name);

    ParserState state;
    const auto bytes = parse_hex(hex);
    const auto result = decode_stream(bytes, state);
    EXPECT_EQ(result.frames.size(), std::stoul(frames));
    std::string got;
    for (const auto& e : result.errors) {
      got += (got.empty() ? "" : ",") + std::string(to_string(e.kind));
    }
    EXPECT_EQ(got, errors);

    // Byte-exact re-encoding of every decoded frame.
    std::vector<std::uint8_t> reencoded;
    for (const auto& f : result.frames) {
      const auto b = encode_frame(f);
      reencoded.insert(reencoded.end(), b.begin(), b.end());
    }
    if (errors.empty() && state.pending.empty()) {
      EXPECT_EQ(reencoded, bytes);
    }
    ++count;
  }
  EXPECT_GE(count, 15);
}

TEST(DecodeStream, FrameSplitAcrossChunks) {
  const auto bytes = encode_frame(encode_telemetry(TelemetryFrame{.seq = 3, .encoder_arm = -7}));
  ParserState state;
  const auto first = decode_stream(std::span(bytes).first(9), state);
  EXPECT_TRUE(first.frames.empty());
  EXPECT_TRUE(first.errors.empty());
  const auto second = decode_stream(std::span(bytes).subspan(9), state);
  ASSERT_EQ(second.frames.size(), 1U);
  EXPECT_EQ(decode_telemetry(second.frames[0]).encoder_arm, -7);
  EXPECT_TRUE(state.pending.empty());
}

TEST(DecodeStream, FlippedCrcByteGivesOneBadCrc) {
  auto bytes = encode_frame(encode_heartbeat(42));
  bytes.back() ^= 0x01;
  ParserState state;
  const auto r = decode_stream(bytes, state);
  EXPECT_TRUE(r.frames.empty());
  ASSERT_EQ(r.errors.size(), 1U);
  EXPECT_EQ(r.errors[0].kind, DecodeErrorKind::BadCrc);
}

TEST(DecodeStream, DesyncReportedOncePerEpisode) {
  std::vector<std::uint8_t> bytes(50, 0x13);
  const auto stop = encode_frame(make_stop());
  bytes.insert(bytes.end(), stop.begin(), stop.end());
  bytes.insert(bytes.end(), 30, 0x00);
  bytes.insert(bytes.end(), stop.begin(), stop.end());
  ParserState state;
  const auto r = decode_stream(bytes, state);
  EXPECT_EQ(r.frames.size(), 2U);
  ASSERT_EQ(r.errors.size(), 2U);
  EXPECT_EQ(r.errors[0].kind, DecodeErrorKind::Desync);
  EXPECT_EQ(r.errors[1].kind, DecodeErrorKind::Desync);
}

TEST(DecodeStream, RandomBytesNeverBreakTheParser) {
  std::mt19937_64 rng(2024);
  std::vector<std::uint8_t> noise(10'000);
  for (auto& b : noise) {
    b = static_cast<std::uint8_t>(rng());
  }
  ParserState state;
  const auto r = decode_stream(noise, state);
  for (const auto& e : r.errors) {
    EXPECT_TRUE(e.kind == DecodeErrorKind::Desync || e.kind == DecodeErrorKind::UnknownType ||
                e.kind == DecodeErrorKind::BadLength)
        << to_string(e.kind);
  }
  EXPECT_LE(state.pending.size(), kOverhead + kMaxPayload);

  // A valid frame appended after the noise (preceded by enough padding to
  // finish any half-parsed false start) must come out intact.
  std::vector<std::uint8_t> tail(kOverhead + kMaxPayload, 0x00);
  const auto hb = encode_frame(encode_heartbeat(0xBEEF));
  tail.insert(tail.end(), hb.begin(), hb.end());
  const auto r2 = decode_stream(tail, state);
  ASSERT_FALSE(r2.frames.empty());
  EXPECT_EQ(decode_heartbeat(r2.frames.back()), 0xBEEF);
  EXPECT_TRUE(state.pending.empty());
}

TEST(DecodeStream, ConcatenationMatchesAnySplit) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> stream;
    const int pieces = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < pieces; ++i) {
      std::vector<std::uint8_t> chunk;
      switch (rng() % 4) {
        case 0: chunk = encode_frame(encode_telemetry(random_telemetry(rng))); break;
        case 1: chunk = encode_frame(encode_heartbeat(static_cast<std::uint16_t>(rng()))); break;
        case 2: chunk = encode_frame(make_stop()); break;
        default:
          chunk.resize(rng() % 12);
          for (auto& b : chunk) {
            b = static_cast<std::uint8_t>(rng() % 3 == 0 ? 0xAA : rng());
          }
      }
      stream.insert(stream.end(), chunk.begin(), chunk.end());
    }

    ParserState whole_state;
    const auto whole = decode_stream(stream, whole_state);

    const std::size_t split = stream.empty() ? 0 : rng() % (stream.size() + 1);
    ParserState split_state;
    auto a = decode_stream(std::span(stream).first(split), split_state);
    const auto b = decode_stream(std::span(stream).subspan(split), split_state);
    a.frames.insert(a.frames.end(), b.frames.begin(), b.frames.end());
    a.errors.insert(a.errors.end(), b.errors.begin(), b.errors.end());

    ASSERT_EQ(a.frames, whole.frames) << "split at " << split;
    ASSERT_EQ(a.errors, whole.errors) << "split at " << split;
    ASSERT_EQ(split_state, whole_state);
  }
}

TEST(DecodeStream, EverySingleBitFlipIsDetected) {
  const auto frame = encode_frame(encode_telemetry(TelemetryFrame{.seq = 9, .encoder_arm = 300, .hand_present = true}));
  // Enough trailing frames to complete the longest length a flipped length
  // byte can announce.
  std::vector<std::uint8_t> flush;
  for (int i = 0; i < 40; ++i) {
    const auto hb = encode_frame(encode_heartbeat(static_cast<std::uint16_t>(i)));
    flush.insert(flush.end(), hb.begin(), hb.end());
  }
  for (std::size_t byte = 0; byte < frame.size(); ++byte) {
    for (int bit = 0; bit < 8; ++bit) {
      auto corrupt = frame;
      corrupt[byte] ^= static_cast<std::uint8_t>(1U << bit);
      corrupt.insert(corrupt.end(), flush.begin(), flush.end());
      ParserState state;
      const auto r = decode_stream(corrupt, state);
      ASSERT_FALSE(r.errors.empty()) << "byte " << byte << " bit " << bit;
      const auto k = r.errors.front().kind;
      EXPECT_TRUE(k == DecodeErrorKind::BadCrc || k == DecodeErrorKind::Desync);
      for (const auto& f : r.frames) {
        EXPECT_EQ(f.type, MsgType::Heartbeat);
      }
    }
  }
}

TEST(Telemetry, AllZeroPayload) {
  const auto f = encode_telemetry(TelemetryFrame{});
  EXPECT_EQ(f.type, MsgType::Telemetry);
  EXPECT_EQ(f.payload, std::vector<std::uint8_t>(17, 0));
}

TEST(Telemetry, FlagBits) {
  EXPECT_EQ(encode_telemetry(TelemetryFrame{.trigger_pressed = true, .hand_present = true}).payload[14], 0x03);
  EXPECT_EQ(encode_telemetry(TelemetryFrame{.trigger_pressed = true}).payload[14], 0x01);
  EXPECT_EQ(encode_telemetry(TelemetryFrame{.hand_present = true}).payload[14], 0x02);
}

TEST(Telemetry, RandomRoundTrip) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 1000; ++i) {
    const auto t = random_telemetry(rng);
    ASSERT_TRUE(within_envelope(t));
    const auto wire = encode_frame(encode_telemetry(t));
    ParserState state;
    const auto r = decode_stream(wire, state);
    ASSERT_EQ(r.frames.size(), 1U);
    ASSERT_TRUE(r.errors.empty());
    ASSERT_EQ(decode_telemetry(r.frames[0]), t);
  }
}

TEST(Telemetry, WrongPayloadLengthIsBadLength) {
  Frame f{MsgType::Telemetry, std::vector<std::uint8_t>(16, 0)};
  try {
    decode_telemetry(f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadLength);
  }
}

TEST(TorqueCommand, EightNewtonMetersIs800Centi) {
  const auto f = encode_torque_command({torque_nm_to_cnm(8.0), TorqueMode::Resist});
  EXPECT_EQ(f.payload, (std::vector<std::uint8_t>{0x20, 0x03, 0x01}));
  EXPECT_EQ(decode_torque_command(f).resist_cnm, 800);
  EXPECT_THROW(torque_nm_to_cnm(30.5), Error);
  EXPECT_THROW(encode_torque_command({3001, TorqueMode::Resist}), Error);
}
