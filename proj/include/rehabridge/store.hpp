#pragma once

#include "rehabridge/csv.hpp"
#include "rehabridge/error.hpp"
#include "rehabridge/keyvalue.hpp"
#include "rehabridge/mapping.hpp"
#include "rehabridge/protocol.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace rehabridge::store {

using nlohmann::json;
namespace fs = std::filesystem;

enum class RecordKind { Telemetry, Cursor, Pointer, Safety, Session };

inline constexpr RecordKind kAllKinds[] = {RecordKind::Telemetry, RecordKind::Cursor, RecordKind::Pointer,
                                           RecordKind::Safety, RecordKind::Session};

constexpr std::string_view to_string(RecordKind k) noexcept {
  switch (k) {
    case RecordKind::Telemetry: return "telemetry";
    case RecordKind::Cursor: return "cursor";
    case RecordKind::Pointer: return "pointer";
    case RecordKind::Safety: return "safety";
    case RecordKind::Session: return "session";
  }
  return "?";
}

inline std::optional<RecordKind> parse_kind(std::string_view s) {
  for (const auto k : kAllKinds) {
    if (to_string(k) == s) {
      return k;
    }
  }
  return std::nullopt;
}

struct LogRecord {
  std::uint64_t t_us = 0;
  RecordKind kind = RecordKind::Telemetry;
  json body;

  bool operator==(const LogRecord&) const = default;
};

inline json to_line(const std::string& session_id, const LogRecord& r) {
  return json{{"session_id", session_id}, {"t_us", r.t_us}, {"kind", std::string(to_string(r.kind))}, {"body", r.body}};
}

// Record bodies. Field names here are the CSV column names.

inline json telemetry_body(const protocol::TelemetryFrame& t) {
  return json{{"seq", t.seq},
              {"timestamp_us", t.timestamp_us},
              {"encoder_arm", t.encoder_arm},
              {"encoder_motor", t.encoder_motor},
              {"trigger_pressed", t.trigger_pressed},
              {"hand_present", t.hand_present},
              {"torque_actual_cnm", t.torque_actual_cnm}};
}

inline protocol::TelemetryFrame telemetry_from_body(const json& b) {
  protocol::TelemetryFrame t;
  t.seq = b.at("seq").get<std::uint16_t>();
  t.timestamp_us = b.at("timestamp_us").get<std::uint32_t>();
  t.encoder_arm = b.at("encoder_arm").get<std::int32_t>();
  t.encoder_motor = b.at("encoder_motor").get<std::int32_t>();
  t.trigger_pressed = b.at("trigger_pressed").get<bool>();
  t.hand_present = b.at("hand_present").get<bool>();
  t.torque_actual_cnm = b.at("torque_actual_cnm").get<std::int16_t>();
  return t;
}

inline json cursor_body(const mapping::CursorPosition& p) {
  return json{{"x", p.x}, {"y", p.y}, {"inside_workspace", p.inside_workspace}};
}

inline json pointer_body(const mapping::PointerEvent& e) {
  return json{{"kind", std::string(mapping::to_string(e.kind))}, {"x", e.position.x}, {"y", e.position.y}};
}

inline const std::vector<std::string>& csv_columns(RecordKind k) {
  static const std::map<RecordKind, std::vector<std::string>> columns{
      {RecordKind::Telemetry,
       {"seq", "timestamp_us", "encoder_arm", "encoder_motor", "trigger_pressed", "hand_present",
        "torque_actual_cnm"}},
      {RecordKind::Cursor, {"x", "y", "inside_workspace"}},
      {RecordKind::Pointer, {"kind", "x", "y"}},
      {RecordKind::Safety, {"state", "cause", "event"}},
      {RecordKind::Session, {"event", "block", "levels", "detail"}},
  };
  return columns.at(k);
}

inline std::string csv_header(RecordKind k) {
  std::string out = "t_us";
  for (const auto& c : csv_columns(k)) {
    out += ',';
    out += c;
  }
  return out;
}

inline std::string render_field(const json& v) {
  if (v.is_null()) {
    return {};
  }
  if (v.is_string()) {
    return v.get<std::string>();
  }
  if (v.is_boolean()) {
    return v.get<bool>() ? "1" : "0";
  }
  if (v.is_number_float()) {
    return kv::format_double(v.get<double>());
  }
  if (v.is_number()) {
    return v.dump();
  }
  return v.dump();
}

struct FlushPolicy {
  std::chrono::milliseconds max_age{500};
  std::size_t max_records = 100;
  bool fsync = true;
};

struct SessionMeta {
  std::string session_id;
  std::string subject_id;
  std::string started_at;
  std::string ended_at;
  bool closed = false;
  std::uint64_t record_count = 0;

  bool operator==(const SessionMeta&) const = default;
};

inline void to_json(json& j, const SessionMeta& m) {
  j = json{{"session_id", m.session_id}, {"subject_id", m.subject_id}, {"started_at", m.started_at},
           {"ended_at", m.ended_at},     {"closed", m.closed},         {"record_count", m.record_count},
           {"file", "sessions/" + m.session_id + ".jsonl"}};
}

inline void from_json(const json& j, SessionMeta& m) {
  j.at("session_id").get_to(m.session_id);
  m.subject_id = j.value("subject_id", "");
  m.started_at = j.value("started_at", "");
  m.ended_at = j.value("ended_at", "");
  m.closed = j.value("closed", false);
  m.record_count = j.value("record_count", std::uint64_t{0});
}

struct Receipt {
  std::uint64_t index = 0;  // position of the record in the session file
  bool flushed = false;
};

struct ReadResult {
  std::vector<LogRecord> records;
  bool truncated_tail = false;  // an incomplete final line was ignored
};

/// Parses a session file. Only newline-terminated lines count as records;
/// an unterminated tail is what a crash between writes leaves behind.
inline ReadResult parse_session_file(std::string_view text) {
  ReadResult out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      out.truncated_tail = true;
      break;
    }
    ++line_no;
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = json::parse(line);
      const auto kind = parse_kind(j.at("kind").get<std::string>());
      if (!kind) {
        throw Error(ErrorCode::StorageError, "unknown record kind");
      }
      out.records.push_back({j.at("t_us").get<std::uint64_t>(), *kind, j.at("body")});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::StorageError, "corrupt record on line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Append-only JSONL session log under `<root>/sessions/`, with an index of
/// session metadata in `<root>/index.json`.
class TelemetryStore {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  explicit TelemetryStore(fs::path root, FlushPolicy policy = {}, Clock clock = [] {
    return std::chrono::steady_clock::now();
  })
      : root_(std::move(root)), policy_(policy), clock_(std::move(clock)) {
    std::error_code ec;
    fs::create_directories(root_ / "sessions", ec);
    if (ec) {
      throw Error(ErrorCode::StorageError, "cannot create " + (root_ / "sessions").string() + ": " + ec.message());
    }
    load_index();
  }

  ~TelemetryStore() {
    std::lock_guard lock(mutex_);
    for (auto& [id, w] : writers_) {
      try {
        flush_locked(w);
      } catch (...) {
      }
      ::close(w.fd);
    }
  }

  TelemetryStore(const TelemetryStore&) = delete;
  TelemetryStore& operator=(const TelemetryStore&) = delete;

  const fs::path& root() const noexcept { return root_; }
  fs::path session_path(const std::string& id) const { return root_ / "sessions" / (id + ".jsonl"); }

  void open_session(const SessionMeta& meta) {
    std::lock_guard lock(mutex_);
    if (meta.session_id.empty() || meta.session_id.find_first_of("/\\.") != std::string::npos) {
      throw Error(ErrorCode::StorageError, "invalid session id '" + meta.session_id + "'");
    }
    if (index_.count(meta.session_id)) {
      throw Error(ErrorCode::StorageError, "session " + meta.session_id + " already exists");
    }
    const auto path = session_path(meta.session_id);
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) {
      throw Error(ErrorCode::StorageError, "cannot create " + path.string() + ": " + std::strerror(errno));
    }
    Writer w;
    w.fd = fd;
    writers_.emplace(meta.session_id, std::move(w));
    SessionMeta m = meta;
    m.closed = false;
    m.record_count = 0;
    index_[m.session_id] = m;
    save_index();
  }

  Receipt append(const std::string& session_id, const LogRecord& r) {
    std::lock_guard lock(mutex_);
    auto it = writers_.find(session_id);
    if (it == writers_.end()) {
      if (index_.count(session_id)) {
        throw Error(ErrorCode::SessionClosed, "session " + session_id + " is closed");
      }
      throw Error(ErrorCode::NotFound, "no session " + session_id);
    }
    Writer& w = it->second;
    if (w.count > 0 && r.t_us < w.last_t_us) {
      throw Error(ErrorCode::OrderingError, "record at " + std::to_string(r.t_us) + " us precedes " +
                                                std::to_string(w.last_t_us) + " us in session " + session_id);
    }
    if (w.pending_records == 0) {
      w.oldest_pending = clock_();
    }
    w.pending += to_line(session_id, r).dump();
    w.pending += '\n';
    ++w.pending_records;
    w.last_t_us = r.t_us;
    Receipt receipt{w.count++, false};
    if (w.pending_records >= policy_.max_records || clock_() - w.oldest_pending >= policy_.max_age) {
      flush_locked(w);
      receipt.flushed = true;
    }
    return receipt;
  }

  /// Flushes sessions whose oldest pending record has reached the age limit.
  /// Called periodically by the owner so quiet sessions still meet the bound.
  void poll() {
    std::lock_guard lock(mutex_);
    const auto now = clock_();
    for (auto& [id, w] : writers_) {
      if (w.pending_records > 0 && now - w.oldest_pending >= policy_.max_age) {
        flush_locked(w);
      }
    }
  }

  void flush(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    auto it = writers_.find(session_id);
    if (it != writers_.end()) {
      flush_locked(it->second);
    }
  }

  void close_session(const std::string& session_id, const std::string& ended_at) {
    std::lock_guard lock(mutex_);
    auto it = writers_.find(session_id);
    if (it == writers_.end()) {
      throw Error(index_.count(session_id) ? ErrorCode::SessionClosed : ErrorCode::NotFound,
                  "session " + session_id + " is not open");
    }
    flush_locked(it->second);
    ::close(it->second.fd);
    auto& meta = index_[session_id];
    meta.closed = true;
    meta.ended_at = ended_at;
    meta.record_count = it->second.count;
    writers_.erase(it);
    save_index();
  }

  bool is_open(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    return writers_.count(session_id) > 0;
  }

  std::vector<SessionMeta> list_sessions() const {
    std::lock_guard lock(mutex_);
    std::vector<SessionMeta> out;
    for (const auto& [id, m] : index_) {
      out.push_back(m);
    }
    std::sort(out.begin(), out.end(), [](const SessionMeta& a, const SessionMeta& b) {
      return std::tie(a.started_at, a.session_id) < std::tie(b.started_at, b.session_id);
    });
    return out;
  }

  SessionMeta meta(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    const auto it = index_.find(session_id);
    if (it == index_.end()) {
      throw Error(ErrorCode::NotFound, "no session " + session_id);
    }
    return it->second;
  }

  /// All flushed records of a session, ignoring an incomplete last line.
  ReadResult read(const std::string& session_id) const {
    const auto path = session_path(session_id);
    {
      std::lock_guard lock(mutex_);
      if (!index_.count(session_id) && !fs::exists(path)) {
        throw Error(ErrorCode::NotFound, "no session " + session_id);
      }
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw Error(ErrorCode::NotFound, "cannot read " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_session_file(buf.str());
  }

  /// Records with t_us in [t_from, t_to] whose kind is in `kinds` (all kinds
  /// when empty), in file order.
  std::vector<LogRecord> query(const std::string& session_id, std::uint64_t t_from, std::uint64_t t_to,
                               const std::set<RecordKind>& kinds = {}) const {
    std::vector<LogRecord> out;
    for (auto& r : read(session_id).records) {
      if (r.t_us >= t_from && r.t_us <= t_to && (kinds.empty() || kinds.count(r.kind))) {
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  std::string export_csv(const std::string& session_id, RecordKind kind) const {
    return to_csv(query(session_id, 0, UINT64_MAX, {kind}), kind);
  }

  static std::string to_csv(const std::vector<LogRecord>& records, RecordKind kind) {
    std::string out = csv_header(kind) + "\r\n";
    const auto& cols = csv_columns(kind);
    for (const auto& r : records) {
      if (r.kind != kind) {
        continue;
      }
      csv::Row row{std::to_string(r.t_us)};
      for (const auto& c : cols) {
        row.push_back(r.body.contains(c) ? render_field(r.body.at(c)) : std::string{});
      }
      csv::append_row(out, row);
    }
    return out;
  }

 private:
  struct Writer {
    int fd = -1;
    std::string pending;
    std::size_t pending_records = 0;
    std::chrono::steady_clock::time_point oldest_pending{};
    std::uint64_t count = 0;
    std::uint64_t last_t_us = 0;
  };

  void flush_locked(Writer& w) {
    if (w.pending.empty()) {
      return;
    }
    const off_t start = ::lseek(w.fd, 0, SEEK_END);
    std::size_t done = 0;
    while (done < w.pending.size()) {
      const ssize_t n = ::write(w.fd, w.pending.data() + done, w.pending.size() - done);
      if (n < 0) {
        if (errno == EINTR) {
          continue;
        }
        const std::string why = std::strerror(errno);
        // Never leave half a record visible.
        if (start >= 0) {
          [[maybe_unused]] const int rc = ::ftruncate(w.fd, start);
        }
        throw Error(ErrorCode::StorageError, "write failed: " + why);
      }
      done += static_cast<std::size_t>(n);
    }
    if (policy_.fsync) {
      ::fdatasync(w.fd);
    }
    w.pending.clear();
    w.pending_records = 0;
  }

  void load_index() {
    const auto path = root_ / "index.json";
    if (!fs::exists(path)) {
      return;
    }
    try {
      std::ifstream in(path);
      const auto j = json::parse(in);
      for (const auto& e : j.at("sessions")) {
        auto m = e.get<SessionMeta>();
        // A session left open by a crash is closed on reload.
        m.closed = true;
        index_[m.session_id] = m;
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::StorageError, "unreadable index " + path.string() + ": " + e.what());
    }
  }

  void save_index() {
    json sessions = json::array();
    for (const auto& [id, m] : index_) {
      sessions.push_back(m);
    }
    const auto path = root_ / "index.json";
    const auto tmp = root_ / "index.json.tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << json{{"sessions", sessions}}.dump(2) << '\n';
      if (!out) {
        throw Error(ErrorCode::StorageError, "cannot write " + tmp.string());
      }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
      throw Error(ErrorCode::StorageError, "cannot replace " + path.string() + ": " + ec.message());
    }
  }

  fs::path root_;
  FlushPolicy policy_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::map<std::string, Writer> writers_;
  std::map<std::string, SessionMeta> index_;
};

/// Session ids sort by start time: `YYYYMMDDTHHMMSSZ-<suffix>`.
inline std::string make_session_id(std::chrono::system_clock::time_point now, std::uint32_t suffix) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d%02d%02dT%02d%02d%02dZ-%04x", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, suffix & 0xFFFFU);
  return buf;
}

inline std::string iso8601(std::chrono::system_clock::time_point now) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace rehabridge::store
