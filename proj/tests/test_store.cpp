#include "rehabridge/store.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>

#include <sys/resource.h>
#include <sys/wait.h>

#include <csignal>
#include <random>
#include <thread>

using namespace rehabridge;
using namespace rehabridge::store;

namespace {

struct FakeClock {
  std::chrono::steady_clock::time_point now{};
  TelemetryStore::Clock fn() {
    return [this] { return now; };
  }
};

FlushPolicy no_sync() {
  FlushPolicy p;
  p.fsync = false;
  return p;
}

LogRecord telemetry_record(std::uint64_t t, std::uint16_t seq) {
  protocol::TelemetryFrame f;
  f.seq = seq;
  f.timestamp_us = static_cast<std::uint32_t>(t);
  f.encoder_arm = -static_cast<std::int32_t>(seq);
  f.encoder_motor = 20 * f.encoder_arm;
  f.trigger_pressed = seq % 3 == 0;
  f.hand_present = true;
  f.torque_actual_cnm = 800;
  return {t, RecordKind::Telemetry, telemetry_body(f)};
}

std::uintmax_t size_of(const fs::path& p) { return fs::exists(p) ? fs::file_size(p) : 0; }

SessionMeta meta_of(std::string id, std::string subject, std::string started_at) {
  SessionMeta m;
  m.session_id = std::move(id);
  m.subject_id = std::move(subject);
  m.started_at = std::move(started_at);
  return m;
}

}  // namespace

TEST(Store, AppendThenReadBackIsIdentical) {
  testing_support::TempDir dir;
  TelemetryStore store(dir.path(), no_sync());
  store.open_session(meta_of("s1", "p01", "2026-01-01T00:00:00Z"));
  std::vector<LogRecord> written;
  for (std::uint16_t i = 0; i < 250; ++i) {
    written.push_back(telemetry_record(i * 10'000ULL, i));
  }
  written.push_back({2'500'000, RecordKind::Cursor, cursor_body({100, 540, true})});
  written.push_back({2'500'000, RecordKind::Safety, json{{"state", "Running"}, {"cause", "None"}, {"event", "Start"}}});
  for (const auto& r : written) {
    store.append("s1", r);
  }
  store.close_session("s1", "2026-01-01T00:10:00Z");
  const auto back = store.read("s1");
  EXPECT_FALSE(back.truncated_tail);
  EXPECT_EQ(back.records, written);
  EXPECT_EQ(store.meta("s1").record_count, written.size());
  EXPECT_TRUE(store.meta("s1").closed);
}

TEST(Store, ErrorsForClosedUnknownAndOutOfOrder) {
  testing_support::TempDir dir;
  TelemetryStore store(dir.path(), no_sync());
  store.open_session(meta_of("s1", "p", ""));
  store.append("s1", telemetry_record(100, 0));
  try {
    store.append("s1", telemetry_record(99, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OrderingError);
  }
  store.append("s1", telemetry_record(100, 1));  // equal time is fine
  store.close_session("s1", "");
  try {
    store.append("s1", telemetry_record(200, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SessionClosed);
  }
  try {
    store.append("nope", telemetry_record(0, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotFound);
  }
  try {
    store.query("nope", 0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotFound);
  }
  EXPECT_THROW(store.open_session(meta_of("s1", "p", "")), Error);
  EXPECT_THROW(store.open_session(meta_of("../evil", "p", "")), Error);
}

TEST(Store, FlushesAtOneHundredRecords) {
  testing_support::TempDir dir;
  FakeClock clock;
  TelemetryStore store(dir.path(), no_sync(), clock.fn());
  store.open_session(meta_of("s1", "p", ""));
  const auto path = store.session_path("s1");
  for (std::uint16_t i = 0; i < 99; ++i) {
    EXPECT_FALSE(store.append("s1", telemetry_record(i, i)).flushed);
  }
  EXPECT_EQ(size_of(path), 0U);
  EXPECT_TRUE(store.append("s1", telemetry_record(99, 99)).flushed);
  EXPECT_EQ(store.read("s1").records.size(), 100U);
}

TEST(Store, FlushesWithinFiveHundredMilliseconds) {
  testing_support::TempDir dir;
  FakeClock clock;
  TelemetryStore store(dir.path(), no_sync(), clock.fn());
  store.open_session(meta_of("s1", "p", ""));
  store.append("s1", telemetry_record(0, 0));
  clock.now += std::chrono::milliseconds(499);
  store.poll();
  EXPECT_EQ(store.read("s1").records.size(), 0U);
  clock.now += std::chrono::milliseconds(1);
  store.poll();
  EXPECT_EQ(store.read("s1").records.size(), 1U);
  // An append arriving after the deadline flushes itself.
  store.append("s1", telemetry_record(1, 1));
  clock.now += std::chrono::milliseconds(600);
  EXPECT_TRUE(store.append("s1", telemetry_record(2, 2)).flushed);
  EXPECT_EQ(store.read("s1").records.size(), 3U);
}

TEST(Store, QuerySelectsRangeAndKinds) {
  testing_support::TempDir dir;
  TelemetryStore store(dir.path(), no_sync());
  store.open_session(meta_of("s1", "p", ""));
  for (std::uint16_t i = 0; i < 100; ++i) {
    store.append("s1", telemetry_record(i * 10ULL, i));
    store.append("s1", {i * 10ULL, RecordKind::Cursor, cursor_body({i, i, true})});
  }
  store.flush("s1");
  EXPECT_EQ(store.query("s1", 0, UINT64_MAX).size(), 200U);
  EXPECT_TRUE(store.query("s1", 5000, 6000).empty());
  const auto mid = store.query("s1", 100, 199, {RecordKind::Cursor});
  ASSERT_EQ(mid.size(), 10U);
  for (std::size_t i = 0; i < mid.size(); ++i) {
    EXPECT_EQ(mid[i].kind, RecordKind::Cursor);
    EXPECT_EQ(mid[i].t_us, 100 + 10 * i);
  }
  EXPECT_EQ(store.query("s1", 0, UINT64_MAX, {RecordKind::Safety}).size(), 0U);
}

TEST(Store, TruncatedTailIsIgnored) {
  const std::string full = to_line("s", telemetry_record(1, 1)).dump() + "\n";
  const std::string text = full + full + full.substr(0, full.size() / 2);
  const auto r = parse_session_file(text);
  EXPECT_EQ(r.records.size(), 2U);
  EXPECT_TRUE(r.truncated_tail);
  EXPECT_THROW(parse_session_file("{not json}\n" + full), Error);
}

TEST(Store, SurvivesKillBetweenFlushes) {
  // The child appends a known sequence and is killed at a random point. The
  // reader must see an exact prefix of that sequence with no parse error.
  testing_support::TempDir dir;
  const auto expected = [](std::uint16_t i) { return telemetry_record(i * 10'000ULL, i); };
  for (const int kill_after_ms : {5, 30, 80}) {
    const std::string id = "k" + std::to_string(kill_after_ms);
    int ready[2];
    ASSERT_EQ(::pipe(ready), 0);
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      TelemetryStore store(dir.path(), FlushPolicy{std::chrono::milliseconds(1), 7, false});
      store.open_session(meta_of(id, "p", ""));
      [[maybe_unused]] auto w = ::write(ready[1], "x", 1);
      for (std::uint32_t i = 0;; ++i) {
        store.append(id, expected(static_cast<std::uint16_t>(i)));
      }
    }
    char c;
    ASSERT_EQ(::read(ready[0], &c, 1), 1);
    std::this_thread::sleep_for(std::chrono::milliseconds(kill_after_ms));
    ::kill(pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    ::close(ready[0]);
    ::close(ready[1]);

    TelemetryStore reader(dir.path(), no_sync());
    const auto r = reader.read(id);
    ASSERT_GT(r.records.size(), 0U);
    for (std::size_t i = 0; i < r.records.size(); ++i) {
      ASSERT_EQ(r.records[i], expected(static_cast<std::uint16_t>(i))) << i;
    }
    EXPECT_TRUE(reader.meta(id).closed);
  }
}

TEST(Store, WriteFailureLeavesNoPartialRecord) {
  testing_support::TempDir dir;
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    std::signal(SIGXFSZ, SIG_IGN);
    TelemetryStore store(dir.path(), FlushPolicy{std::chrono::milliseconds(500), 1, false});
    store.open_session(meta_of("full", "p", ""));
    const rlimit lim{4096, 4096};
    ::setrlimit(RLIMIT_FSIZE, &lim);
    for (std::uint16_t i = 0;; ++i) {
      try {
        store.append("full", telemetry_record(i, i));
      } catch (const Error& e) {
        std::_Exit(e.code() == ErrorCode::StorageError ? 0 : 2);
      }
    }
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  ASSERT_EQ(WEXITSTATUS(status), 0);
  TelemetryStore reader(dir.path(), no_sync());
  const auto r = reader.read("full");
  EXPECT_FALSE(r.truncated_tail);
  EXPECT_GT(r.records.size(), 5U);
}

TEST(Store, CsvExportHasFixedHeaderAndRoundTrips) {
  testing_support::TempDir dir;
  TelemetryStore store(dir.path(), no_sync());
  store.open_session(meta_of("s1", "p", ""));
  std::vector<LogRecord> tel;
  for (std::uint16_t i = 0; i < 20; ++i) {
    tel.push_back(telemetry_record(i * 10'000ULL, i));
    store.append("s1", tel.back());
    store.append("s1", {i * 10'000ULL, RecordKind::Pointer,
                        pointer_body({mapping::PointerKind::Press, {3, 4, true}, 0})});
  }
  store.append("s1", {300'000, RecordKind::Session,
                      json{{"event", "start"}, {"block", 0}, {"levels", 0}, {"detail", "a,\"b\""}}});
  store.close_session("s1", "");

  const auto text = store.export_csv("s1", RecordKind::Telemetry);
  const auto rows = csv::parse(text);
  ASSERT_EQ(rows.size(), 21U);
  EXPECT_EQ(text.substr(0, text.find("\r\n")),
            "t_us,seq,timestamp_us,encoder_arm,encoder_motor,trigger_pressed,hand_present,torque_actual_cnm");
  for (std::size_t i = 0; i < tel.size(); ++i) {
    const auto& row = rows[i + 1];
    ASSERT_EQ(row.size(), 8U);
    const auto t = telemetry_from_body(tel[i].body);
    EXPECT_EQ(std::stoull(row[0]), tel[i].t_us);
    EXPECT_EQ(std::stoi(row[1]), t.seq);
    EXPECT_EQ(std::stoi(row[3]), t.encoder_arm);
    EXPECT_EQ(std::stoi(row[4]), t.encoder_motor);
    EXPECT_EQ(row[5] == "1", t.trigger_pressed);
  }

  const auto pointer = csv::parse(store.export_csv("s1", RecordKind::Pointer));
  EXPECT_EQ(pointer[0], (csv::Row{"t_us", "kind", "x", "y"}));
  EXPECT_EQ(pointer[1], (csv::Row{"0", "Press", "3", "4"}));

  const auto sess = csv::parse(store.export_csv("s1", RecordKind::Session));
  ASSERT_EQ(sess.size(), 2U);
  EXPECT_EQ(sess[1][4], "a,\"b\"");

  EXPECT_EQ(csv::parse(store.export_csv("s1", RecordKind::Cursor)).size(), 1U);  // header only
}

TEST(Store, IndexPersistsAcrossInstances) {
  testing_support::TempDir dir;
  {
    TelemetryStore store(dir.path(), no_sync());
    store.open_session(meta_of("b", "p2", "2026-01-02T00:00:00Z"));
    store.open_session(meta_of("a", "p1", "2026-01-01T00:00:00Z"));
    store.close_session("a", "2026-01-01T00:30:00Z");
  }
  TelemetryStore store(dir.path(), no_sync());
  const auto list = store.list_sessions();
  ASSERT_EQ(list.size(), 2U);
  EXPECT_EQ(list[0].session_id, "a");
  EXPECT_EQ(list[0].ended_at, "2026-01-01T00:30:00Z");
  EXPECT_EQ(list[1].session_id, "b");
  EXPECT_TRUE(list[1].closed);
  const auto index = json::parse(std::ifstream(dir.path() / "index.json"));
  EXPECT_EQ(index.at("sessions").size(), 2U);
}

TEST(Csv, QuotingRoundTrip) {
  std::mt19937 rng(3);
  const std::string alphabet = "ab,\"\r\n x";
  std::vector<csv::Row> rows;
  std::string text;
  for (int r = 0; r < 50; ++r) {
    csv::Row row;
    for (int c = 0; c < 4; ++c) {
      std::string f;
      for (unsigned n = rng() % 6; n > 0; --n) {
        f += alphabet[rng() % alphabet.size()];
      }
      row.push_back(f);
    }
    // A single empty field is indistinguishable from an empty line.
    row[0] = "r" + row[0];
    rows.push_back(row);
    csv::append_row(text, row);
  }
  EXPECT_EQ(csv::parse(text), rows);
  EXPECT_THROW(csv::parse("\"open"), Error);
}

TEST(Store, SessionIdsAreSortableAndSafe) {
  const auto t = std::chrono::system_clock::from_time_t(1'700'000'000);
  EXPECT_EQ(make_session_id(t, 0xab), "20231114T221320Z-00ab");
  EXPECT_EQ(iso8601(t), "2023-11-14T22:13:20Z");
}
