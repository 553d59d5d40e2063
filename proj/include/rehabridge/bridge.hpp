#pragma once

#include "rehabridge/error.hpp"
#include "rehabridge/keyvalue.hpp"
#include "rehabridge/link.hpp"
#include "rehabridge/mapping.hpp"
#include "rehabridge/protocol.hpp"
#include "rehabridge/safety.hpp"
#include "rehabridge/session.hpp"
#include "rehabridge/simulator.hpp"
#include "rehabridge/store.hpp"
#include "rehabridge/stream.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace rehabridge::bridge {

using nlohmann::json;

struct BridgeConfig {
  safety::Config safety;
  mapping::CalibrationProfile profile;
  sim::SimParams sim_params;
  std::string scenario_path;  // simulator script, optional
  std::vector<std::string> games{"game1", "game2"};
  std::uint32_t session_target_min_s = 20 * 60;
  std::uint32_t session_max_s = 30 * 60;
  std::filesystem::path data_dir = "data";
  store::FlushPolicy flush;
  link::PortScan port_scan;
  int baud = 115200;
  std::uint64_t cursor_interval_us = 33'333;     // ~30 cursor messages/s
  std::uint64_t telemetry_interval_us = 100'000;  // 10 telemetry messages/s
  std::uint64_t session_tick_us = 100'000;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) {
      out.push_back(item.substr(a, b - a + 1));
    }
  }
  return out;
}

/// Reads the `[calibration]`, `[simulator]`, `[service]` and `[session]`
/// sections of a key-value config file. Unset keys keep their defaults.
inline BridgeConfig config_from(const kv::Document& doc) {
  BridgeConfig c;
  c.profile = mapping::profile_from(doc, "calibration.");
  auto& p = c.sim_params;
  p.inertia_kgm2 = doc.get_double("simulator.inertia_kgm2", p.inertia_kgm2);
  p.viscous_nms = doc.get_double("simulator.viscous_nms", p.viscous_nms);
  p.dt_s = doc.get_double("simulator.dt_s", p.dt_s);
  p.ticks_per_rev = static_cast<std::int32_t>(doc.get_int("simulator.ticks_per_rev", p.ticks_per_rev));
  p.theta_min_rad = doc.get_double("simulator.theta_min_rad", p.theta_min_rad);
  p.theta_max_rad = doc.get_double("simulator.theta_max_rad", p.theta_max_rad);
  p.gear_ratio = static_cast<std::int32_t>(doc.get_int("simulator.gear_ratio", p.gear_ratio));
  p.v_max_rad_s = doc.get_double("simulator.v_max_rad_s", p.v_max_rad_s);
  sim::validate(p);
  c.scenario_path = doc.get_string("simulator.scenario", "");
  c.data_dir = doc.get_string("service.data_dir", c.data_dir.string());
  c.baud = static_cast<int>(doc.get_int("service.baud", c.baud));
  if (doc.has("service.serial_prefixes")) {
    c.port_scan.prefixes = split_list(doc.get_string("service.serial_prefixes", ""));
  }
  if (doc.has("service.serial_dirs")) {
    c.port_scan.directories.clear();
    for (const auto& d : split_list(doc.get_string("service.serial_dirs", ""))) {
      c.port_scan.directories.emplace_back(d);
    }
  }
  if (doc.has("session.games")) {
    c.games = split_list(doc.get_string("session.games", ""));
  }
  c.session_target_min_s = static_cast<std::uint32_t>(doc.get_int("session.target_min_s", c.session_target_min_s));
  c.session_max_s = static_cast<std::uint32_t>(doc.get_int("session.max_duration_s", c.session_max_s));
  c.safety.resume_dwell_us = static_cast<std::uint64_t>(doc.get_int("safety.resume_dwell_ms", 500)) * 1000;
  c.safety.heartbeat_miss_limit = static_cast<int>(doc.get_int("safety.heartbeat_miss_limit", 3));
  c.safety.crc_burst_limit = static_cast<std::size_t>(doc.get_int("safety.crc_burst_limit", 20));
  return c;
}

struct Counters {
  std::uint64_t frames = 0;
  std::uint64_t telemetry = 0;
  std::uint64_t heartbeats = 0;
  std::uint64_t bad_crc = 0;
  std::uint64_t bad_length = 0;
  std::uint64_t unknown_type = 0;
  std::uint64_t desync = 0;
  std::uint64_t seq_gaps = 0;
  std::uint64_t heartbeat_misses = 0;
  std::uint64_t storage_errors = 0;
  std::uint64_t bytes_out = 0;
};

/// The daemon core: owns the link, runs decode -> safety -> map -> session ->
/// store on a single thread, and publishes to the event stream.
///
/// Public methods may be called from any thread; they run on the core thread
/// and return its result.
class Bridge {
 public:
  explicit Bridge(BridgeConfig cfg)
      : cfg_(std::move(cfg)),
        epoch_(std::chrono::steady_clock::now()),
        store_(cfg_.data_dir, cfg_.flush),
        profile_(cfg_.profile) {
    sinks_.push_back(std::make_shared<stream::RecordSink>(
        [this]() -> std::optional<stream::Recording> { return recording_; },
        [this](const std::string&, const store::LogRecord& r) { append(r); }));
    sinks_.push_back(std::make_shared<stream::StreamSink>(hub_, cfg_.cursor_interval_us));
    core_ = std::thread([this] { run(); });
  }

  ~Bridge() {
    try {
      call([this] {
        if (link_) {
          do_disconnect();
        }
      });
    } catch (...) {
    }
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    core_.join();
  }

  Bridge(const Bridge&) = delete;
  Bridge& operator=(const Bridge&) = delete;

  /// Microseconds on the bridge clock (steady, zero at construction).
  std::uint64_t now_us() const {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - epoch_).count());
  }
  std::chrono::steady_clock::time_point epoch() const { return epoch_; }

  stream::Hub& hub() { return hub_; }
  store::TelemetryStore& store() { return store_; }
  const BridgeConfig& config() const { return cfg_; }

  /// Extra sinks receive cursor output after the built-in ones.
  void add_sink(std::shared_ptr<stream::PointerSink> sink) {
    call([&] { sinks_.push_back(std::move(sink)); });
  }

  std::vector<link::PortInfo> ports() const { return link::list_ports(cfg_.port_scan); }

  json status() {
    return call([this] { return status_json(); });
  }

  json connect(const std::string& port) {
    return call([&] {
      do_connect(port);
      return status_json();
    });
  }

  /// Connects an already-open link (custom transports, tests).
  json attach(std::shared_ptr<link::ByteLink> l) {
    return call([&] {
      if (link_) {
        throw Error(ErrorCode::AlreadyConnected, "already connected to " + link_->name());
      }
      start_link(std::move(l));
      return status_json();
    });
  }

  json disconnect() {
    return call([&] {
      if (!link_) {
        throw Error(ErrorCode::NotConnected, "no device connected");
      }
      do_disconnect();
      return status_json();
    });
  }

  json start_calibration() {
    return call([&] {
      require_connected();
      if (safety_.mode == safety::Mode::Running || safety_.mode == safety::Mode::SafetyPaused) {
        throw Error(ErrorCode::IllegalState, "cannot calibrate during a session");
      }
      calibration_.emplace();
      return json{{"calibrating", true}};
    });
  }

  json commit_calibration() {
    return call([&] {
      if (!calibration_) {
        throw Error(ErrorCode::IllegalState, "no calibration sweep in progress");
      }
      const auto sweep = std::move(*calibration_);
      calibration_.reset();
      auto p = profile_;
      p.axes[0] = mapping::calibrate(sweep, mapping::Axis::Arm);
      if (p.mode == mapping::MappingMode::Planar2D) {
        p.axes[1] = mapping::calibrate(sweep, mapping::Axis::Second);
      }
      mapping::validate(p);
      profile_ = p;
      filter_ = {};
      return profile_json();
    });
  }

  json calibration() {
    return call([&] {
      auto j = profile_json();
      j["calibrating"] = calibration_.has_value();
      j["samples"] = calibration_ ? calibration_->size() : 0;
      return j;
    });
  }

  json set_profile(const mapping::CalibrationProfile& p) {
    return call([&] {
      mapping::validate(p);
      profile_ = p;
      filter_ = {};
      return profile_json();
    });
  }

  json start_session(const std::string& subject_id, std::optional<session::SessionPlan> plan) {
    return call([&] {
      require_connected();
      if (session_ && session_->active()) {
        throw Error(ErrorCode::SessionStillActive, "a session is already running");
      }
      if (safety_.mode != safety::Mode::Idle) {
        throw Error(ErrorCode::IllegalState,
                    "sessions start from Idle, device is " + std::string(safety::to_string(safety_.mode)));
      }
      do_start_session(subject_id, std::move(plan));
      return session_json();
    });
  }

  json level_event(session::LevelKind kind, session::LevelSource source) {
    return call([&] {
      require_session();
      advance_session(session::LevelEvent{kind, session_time(), source});
      return session_json();
    });
  }

  json stop_session() {
    return call([&] {
      require_session();
      advance_session(session::StopRequest{session_time()});
      return session_json();
    });
  }

  json set_torque(double nm) {
    return call([&] {
      if (!std::isfinite(nm) || nm < 0.0 || nm * 100.0 > protocol::kTorqueEnvelopeCnm) {
        throw Error(ErrorCode::ParseError, "torque must lie in [0, 30] N*m");
      }
      const auto cnm = protocol::torque_nm_to_cnm(nm);
      require_connected();
      if (safety_.mode != safety::Mode::Running) {
        throw Error(ErrorCode::IllegalState, "torque can only be changed while Running");
      }
      safety_ = safety::with_torque_level(safety_, cnm);
      send_torque(cnm);
      publish("safety", safety_body("TorqueChanged", {}));
      return status_json();
    });
  }

  /// Runs `f` against the simulated device. IllegalState unless the
  /// connected link is the simulator.
  void with_simulator(const std::function<void(link::SimLink&)>& f) {
    call([&] {
      auto* sim = dynamic_cast<link::SimLink*>(link_.get());
      if (!sim) {
        throw Error(ErrorCode::IllegalState, "simulator controls need a simulator connection");
      }
      f(*sim);
    });
  }

  std::optional<session::SessionSummary> last_summary() {
    return call([&] { return last_summary_; });
  }

  Counters counters() {
    return call([&] { return counters_; });
  }

  safety::State safety_state() {
    return call([&] { return safety_; });
  }

  /// Runs `f` on the core thread and returns its result, rethrowing errors.
  template <class F>
  auto call(F&& f) -> decltype(f()) {
    using R = decltype(f());
    if (std::this_thread::get_id() == core_id_) {
      return f();
    }
    auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(f));
    auto fut = task->get_future();
    post(Call{[task] { (*task)(); }});
    return fut.get();
  }

 private:
  struct Bytes {
    std::vector<std::uint8_t> data;
    std::uint64_t ingress_us = 0;
    std::uint64_t generation = 0;
  };
  struct LinkLost {
    std::string reason;
    std::uint64_t generation = 0;
  };
  struct Call {
    std::function<void()> fn;
  };
  using Item = std::variant<Bytes, LinkLost, Call>;

  void post(Item item) {
    {
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(item));
    }
    cv_.notify_one();
  }

  // ---- core loop ----------------------------------------------------------

  void run() {
    core_id_ = std::this_thread::get_id();
    while (true) {
      std::deque<Item> batch;
      {
        std::unique_lock lock(mutex_);
        cv_.wait_for(lock, std::chrono::milliseconds(5), [&] { return !queue_.empty() || stopping_; });
        if (stopping_ && queue_.empty()) {
          break;
        }
        batch.swap(queue_);
      }
      for (auto& item : batch) {
        if (auto* b = std::get_if<Bytes>(&item)) {
          if (b->generation == generation_) {
            on_bytes(*b);
          }
        } else if (auto* l = std::get_if<LinkLost>(&item)) {
          if (l->generation == generation_ && link_) {
            link_error_ = l->reason;
            do_disconnect();
          }
        } else {
          std::get<Call>(item).fn();
        }
      }
      periodic();
    }
  }

  void periodic() {
    const auto now = now_us();
    if (link_) {
      while (now >= next_heartbeat_us_) {
        send(protocol::encode_heartbeat(host_heartbeat_seq_++));
        if (frames_in_period_ == 0) {
          ++counters_.heartbeat_misses;
          apply_safety({safety::EventKind::HeartbeatMiss, now});
        }
        frames_in_period_ = 0;
        next_heartbeat_us_ += cfg_.safety.heartbeat_period_us;
        if (!link_) {
          break;
        }
      }
    }
    if (session_ && session_->active() && now >= next_session_tick_us_) {
      next_session_tick_us_ = now + cfg_.session_tick_us;
      advance_session(session::Tick{session_time()});
    }
    for (const auto& s : sinks_) {
      s->poll(now);
    }
    try {
      store_.poll();
    } catch (const Error&) {
      ++counters_.storage_errors;
    }
  }

  // ---- link ---------------------------------------------------------------

  void require_connected() const {
    if (!link_) {
      throw Error(ErrorCode::NotConnected, "no device connected");
    }
  }

  void require_session() const {
    if (!session_ || !session_->active()) {
      throw Error(ErrorCode::SessionClosed, "no active session");
    }
  }

  void do_connect(const std::string& port) {
    if (link_) {
      throw Error(ErrorCode::AlreadyConnected, "already connected to " + link_->name());
    }
    if (port == link::kSimulatorPort) {
      std::vector<sim::ScenarioCommand> scenario;
      if (!cfg_.scenario_path.empty()) {
        std::ifstream in(cfg_.scenario_path);
        if (!in) {
          throw Error(ErrorCode::ConnectError, "cannot read scenario " + cfg_.scenario_path);
        }
        std::ostringstream text;
        text << in.rdbuf();
        scenario = sim::parse_scenario(text.str());
      }
      start_link(std::make_shared<link::SimLink>(cfg_.sim_params, std::move(scenario)));
    } else {
      start_link(std::make_shared<link::SerialLink>(port, cfg_.baud));
    }
  }

  void start_link(std::shared_ptr<link::ByteLink> l) {
    link_ = std::move(l);
    ++generation_;
    link_error_.clear();
    parser_ = {};
    filter_ = {};
    debounce_ = {};
    last_hand_ = false;
    last_seq_.reset();
    frames_in_period_ = 0;
    next_heartbeat_us_ = now_us() + cfg_.safety.heartbeat_period_us;
    reader_stop_ = std::make_shared<std::atomic<bool>>(false);
    reader_ = std::thread([this, l = link_, stop = reader_stop_, gen = generation_] {
      while (!*stop) {
        try {
          auto data = l->read(std::chrono::milliseconds(50));
          if (!data.empty()) {
            post(Bytes{std::move(data), now_us(), gen});
          }
        } catch (const std::exception& e) {
          if (!*stop) {
            post(LinkLost{e.what(), gen});
          }
          return;
        }
      }
    });
    safety_ = safety::State{};
    apply_safety({safety::EventKind::Connect, now_us()});
  }

  void do_disconnect() {
    if (session_ && session_->active()) {
      advance_session(session::StopRequest{session_time()});
    }
    // Safety first: a Running disconnect puts STOP on the wire before close.
    apply_safety({safety::EventKind::Disconnect, now_us()});
    *reader_stop_ = true;
    link_->close();
    if (reader_.joinable()) {
      reader_.join();
    }
    link_.reset();
    calibration_.reset();
    ++generation_;
  }

  void send(const protocol::Frame& f) {
    if (!link_) {
      return;
    }
    try {
      const auto bytes = protocol::encode_frame(f);
      link_->write(bytes);
      counters_.bytes_out += bytes.size();
    } catch (const Error& e) {
      link_error_ = e.what();
    }
  }

  void send_torque(std::uint16_t cnm) {
    send(protocol::encode_torque_command({cnm, cnm == 0 ? protocol::TorqueMode::Idle : protocol::TorqueMode::Resist}));
  }

  // ---- pipeline -----------------------------------------------------------

  void on_bytes(const Bytes& b) {
    protocol::DecodeResult result;
    protocol::decode_stream(b.data, parser_, result);
    for (const auto& e : result.errors) {
      switch (e.kind) {
        case protocol::DecodeErrorKind::BadCrc:
          ++counters_.bad_crc;
          apply_safety({safety::EventKind::CrcError, b.ingress_us});
          break;
        case protocol::DecodeErrorKind::BadLength: ++counters_.bad_length; break;
        case protocol::DecodeErrorKind::UnknownType: ++counters_.unknown_type; break;
        case protocol::DecodeErrorKind::Desync: ++counters_.desync; break;
      }
    }
    for (const auto& f : result.frames) {
      if (!link_) {
        return;
      }
      on_frame(f, b.ingress_us);
    }
  }

  void on_frame(const protocol::Frame& f, std::uint64_t ingress_us) {
    ++counters_.frames;
    ++frames_in_period_;
    last_frame_us_ = ingress_us;
    if (f.type == protocol::MsgType::Heartbeat) {
      ++counters_.heartbeats;
      return;
    }
    if (f.type != protocol::MsgType::Telemetry) {
      return;
    }
    protocol::TelemetryFrame t;
    try {
      t = protocol::decode_telemetry(f);
    } catch (const Error&) {
      ++counters_.bad_length;
      return;
    }
    ++counters_.telemetry;
    if (last_seq_ && static_cast<std::uint16_t>(*last_seq_ + 1) != t.seq) {
      ++counters_.seq_gaps;
    }
    last_seq_ = t.seq;
    last_telemetry_ = t;
    if (calibration_) {
      calibration_->push_back(t);
    }
    if (recording_) {
      session_frames_.push_back(t);
      append({since_start(ingress_us), store::RecordKind::Telemetry, store::telemetry_body(t)});
    }

    // Safety before any cursor output for this frame.
    if (t.hand_present != last_hand_) {
      last_hand_ = t.hand_present;
      apply_safety({t.hand_present ? safety::EventKind::HandOn : safety::EventKind::HandOff, ingress_us});
    }
    apply_safety({safety::EventKind::Telemetry, ingress_us});

    const auto position = mapping::map_position(t, profile_, filter_);
    const auto pointer = mapping::map_buttons(t, debounce_, position);
    if (safety::cursor_enabled(safety_)) {
      for (const auto& s : sinks_) {
        guarded([&] { s->cursor(position, ingress_us, ingress_us); });
        for (const auto& e : pointer) {
          guarded([&] { s->pointer(e, ingress_us); });
        }
      }
    }

    if (!last_telemetry_pub_ || ingress_us - *last_telemetry_pub_ >= cfg_.telemetry_interval_us) {
      last_telemetry_pub_ = ingress_us;
      publish("telemetry", telemetry_json(t), ingress_us);
    }
  }

  template <class F>
  void guarded(F&& f) {
    try {
      f();
    } catch (const Error&) {
      ++counters_.storage_errors;
    }
  }

  // Frames are stamped at ingress and session events at processing time, so
  // a record can trail the previous one slightly. The log must not go backwards.
  void append(store::LogRecord r) {
    if (!recording_) {
      return;
    }
    r.t_us = std::max(r.t_us, last_record_us_);
    last_record_us_ = r.t_us;
    // Session and safety records are rare and carry the replayable state: write them through.
    const bool durable = r.kind == store::RecordKind::Session || r.kind == store::RecordKind::Safety;
    guarded([&] {
      store_.append(recording_->session_id, r);
      if (durable) {
        store_.flush(recording_->session_id);
      }
    });
  }

  json telemetry_json(const protocol::TelemetryFrame& t) const {
    return json{{"seq", t.seq},
                {"device_us", t.timestamp_us},
                {"encoder_arm", t.encoder_arm},
                {"encoder_motor", t.encoder_motor},
                {"angle_rad", sim::ticks_to_angle(t.encoder_arm, cfg_.sim_params.ticks_per_rev)},
                {"trigger_pressed", t.trigger_pressed},
                {"hand_present", t.hand_present},
                {"torque_actual_cnm", t.torque_actual_cnm}};
  }

  json safety_body(std::string_view event, const std::string& note) const {
    json b{{"state", std::string(safety::to_string(safety_.mode))},
           {"cause", std::string(safety::to_string(safety_.cause))},
           {"event", std::string(event)},
           {"torque_nm", safety_.torque_cnm / 100.0}};
    if (!note.empty()) {
      b["note"] = note;
    }
    return b;
  }

  void publish(std::string type, json body, std::optional<std::uint64_t> t = std::nullopt) {
    hub_.publish({std::move(type), t.value_or(now_us()), std::move(body)});
  }

  void apply_safety(const safety::Event& e) {
    const auto before = safety_.mode;
    auto tr = safety::transition(safety_, e, cfg_.safety);
    safety_ = std::move(tr.state);
    for (const auto& a : tr.actions) {
      switch (a.kind) {
        case safety::ActionKind::FreezeCursor:
          for (const auto& s : sinks_) {
            s->freeze();
          }
          break;
        case safety::ActionKind::ResumeCursor: break;
        case safety::ActionKind::SendStop: send(protocol::make_stop()); break;
        case safety::ActionKind::SendTorque: send_torque(a.torque_cnm); break;
        case safety::ActionKind::NotifyUI: {
          const auto body = safety_body(safety::to_string(e.kind), a.note);
          publish("safety", body, e.timestamp_us);
          if (before != safety_.mode) {
            append({session_time(), store::RecordKind::Safety, body});
          }
          break;
        }
      }
    }
    if (before != safety_.mode && session_ && session_->active()) {
      advance_session(session::SafetyChange{safety_.mode, session_time()});
    }
  }

  // ---- session ------------------------------------------------------------

  std::uint64_t since_start(std::uint64_t t) const {
    return recording_ && t >= recording_->start_us ? t - recording_->start_us : 0;
  }
  std::uint64_t session_time() const { return since_start(now_us()); }

  void do_start_session(const std::string& subject_id, std::optional<session::SessionPlan> plan) {
    if (!plan) {
      plan = session::build_default_plan(cfg_.games);
      plan->target_min_s = cfg_.session_target_min_s;
      plan->max_duration_s = cfg_.session_max_s;
    }
    session::validate(*plan);
    const auto wall = std::chrono::system_clock::now();
    const auto id = store::make_session_id(wall, static_cast<std::uint32_t>(std::random_device{}()));
    auto started = session::Session::start(*plan, id, subject_id, store::iso8601(wall));
    store::SessionMeta meta;
    meta.session_id = id;
    meta.subject_id = subject_id;
    meta.started_at = store::iso8601(wall);
    store_.open_session(meta);
    session_ = std::move(started.session);
    session_frames_.clear();
    recording_ = stream::Recording{id, now_us()};
    last_record_us_ = 0;
    next_session_tick_us_ = recording_->start_us + cfg_.session_tick_us;
    append({0, store::RecordKind::Session, session::start_to_json(*session_)});
    publish("session", json{{"event", "started"}, {"session_id", id}, {"plan", session_->plan()}});
    run_session_commands(started.commands);
  }

  void advance_session(const session::Input& in) {
    const auto cmds = session_->advance(in);
    if (!std::holds_alternative<session::Tick>(in) || !cmds.empty()) {
      append({session::time_of(in), store::RecordKind::Session, session::input_to_json(in, *session_)});
    }
    run_session_commands(cmds);
  }

  void run_session_commands(const std::vector<session::Command>& cmds) {
    for (const auto& c : cmds) {
      switch (c.kind) {
        case session::CommandKind::OpenGame:
          publish("session", json{{"event", "open_game"}, {"game_id", c.game_id}});
          break;
        case session::CommandKind::SetTorque: {
          const auto cnm = protocol::torque_nm_to_cnm(c.torque_nm);
          if (safety_.mode == safety::Mode::Idle) {
            apply_safety({safety::EventKind::Start, now_us(), cnm});
          } else {
            safety_ = safety::with_torque_level(safety_, cnm);
            if (safety_.mode == safety::Mode::Running) {
              send_torque(cnm);
            }
          }
          publish("session", json{{"event", "set_torque"}, {"torque_nm", c.torque_nm}});
          break;
        }
        case session::CommandKind::NotifyUI: publish("session", session_json()); break;
        case session::CommandKind::EndSession: end_session(c.reason); break;
      }
    }
  }

  void end_session(session::EndReason reason) {
    if (safety_.mode == safety::Mode::Running || safety_.mode == safety::Mode::SafetyPaused) {
      apply_safety({safety::EventKind::Stop, now_us()});
    }
    const auto id = recording_->session_id;
    try {
      store_.close_session(id, store::iso8601(std::chrono::system_clock::now()));
    } catch (const Error&) {
      ++counters_.storage_errors;
    }
    recording_.reset();
    last_summary_ = session::summarize(*session_, session_frames_, cfg_.sim_params.ticks_per_rev);
    session_frames_.clear();
    publish("session", json{{"event", "ended"},
                            {"session_id", id},
                            {"reason", std::string(session::to_string(reason))},
                            {"summary", summary_json(*last_summary_)}});
  }

  static json summary_json(const session::SessionSummary& s) {
    json blocks = json::array();
    for (const auto& b : s.blocks) {
      blocks.push_back({{"block_index", b.block_index},
                        {"game_id", b.game_id},
                        {"torque_nm", b.torque_nm},
                        {"duration_s", b.duration_us / 1e6},
                        {"active_s", b.active_us / 1e6},
                        {"levels_passed", b.levels_passed},
                        {"pause_count", b.pause_count},
                        {"pause_total_s", b.pause_total_us / 1e6}});
    }
    return json{{"session_id", s.session_id},
                {"subject_id", s.subject_id},
                {"end_reason", std::string(session::to_string(s.end_reason))},
                {"wall_s", s.wall_us / 1e6},
                {"active_s", s.active_us / 1e6},
                {"pause_count", s.pause_count},
                {"pause_total_s", s.pause_total_us / 1e6},
                {"mean_abs_excursion_rad", s.mean_abs_excursion_rad},
                {"trigger_presses", s.trigger_presses},
                {"blocks", blocks}};
  }

  json session_json() const {
    if (!session_) {
      return nullptr;
    }
    const auto& s = *session_;
    const auto t = s.active() ? session_time() : s.record().ended_at_us.value_or(0);
    json j{{"session_id", s.record().session_id},
           {"subject_id", s.record().subject_id},
           {"active", s.active()},
           {"block", s.current_block()},
           {"blocks", s.plan().blocks.size()},
           {"game_id", s.current_game()},
           {"torque_nm", s.current_torque_nm()},
           {"levels_passed", s.levels_in_block()},
           {"levels_to_advance", s.plan().blocks[s.current_block()].levels_to_advance},
           {"elapsed_s", t / 1e6},
           {"active_s", s.active_time_us(t) / 1e6},
           {"paused_s", s.paused_time_us(t) / 1e6},
           {"paused", s.paused()}};
    if (!s.active()) {
      j["end_reason"] = std::string(session::to_string(*s.record().end_reason));
      if (last_summary_) {
        j["summary"] = summary_json(*last_summary_);
      }
    }
    return j;
  }

  json profile_json() const {
    const auto& p = profile_;
    return json{{"mode", std::string(mapping::to_string(p.mode))},
                {"axes", json::array({{{"ticks_min", p.axes[0].ticks_min}, {"ticks_max", p.axes[0].ticks_max}},
                                      {{"ticks_min", p.axes[1].ticks_min}, {"ticks_max", p.axes[1].ticks_max}}})},
                {"screen",
                 {{"x", p.screen.x}, {"y", p.screen.y}, {"width", p.screen.width}, {"height", p.screen.height}}},
                {"ema_alpha", p.ema_alpha},
                {"deadband_ticks", p.deadband_ticks}};
  }

  json status_json() const {
    const auto now = now_us();
    json j{{"link", link_ ? json(link_->name()) : json(nullptr)},
           {"link_status", link_ ? "Open" : (link_error_.empty() ? "Closed" : "Errored")},
           {"safety", std::string(safety::to_string(safety_.mode))},
           {"cause", std::string(safety::to_string(safety_.cause))},
           {"torque_nm", safety_.torque_cnm / 100.0},
           {"cursor_enabled", safety::cursor_enabled(safety_)},
           {"calibrating", calibration_.has_value()},
           {"session", session_json()},
           {"counters",
            {{"frames", counters_.frames},
             {"telemetry", counters_.telemetry},
             {"heartbeats", counters_.heartbeats},
             {"bad_crc", counters_.bad_crc},
             {"bad_length", counters_.bad_length},
             {"unknown_type", counters_.unknown_type},
             {"desync", counters_.desync},
             {"seq_gaps", counters_.seq_gaps},
             {"heartbeat_misses", counters_.heartbeat_misses},
             {"storage_errors", counters_.storage_errors}}},
           {"t_us", now}};
    if (!link_error_.empty()) {
      j["link_error"] = link_error_;
    }
    if (last_frame_us_) {
      j["last_frame_age_ms"] = (now - *last_frame_us_) / 1000.0;
    }
    if (last_telemetry_) {
      j["telemetry"] = telemetry_json(*last_telemetry_);
    }
    if (filter_.last) {
      j["cursor"] = {{"x", filter_.last->x}, {"y", filter_.last->y}};
    }
    return j;
  }

  BridgeConfig cfg_;
  std::chrono::steady_clock::time_point epoch_;
  store::TelemetryStore store_;
  stream::Hub hub_;
  std::vector<std::shared_ptr<stream::PointerSink>> sinks_;

  // Core-thread state.
  std::shared_ptr<link::ByteLink> link_;
  std::thread reader_;
  std::shared_ptr<std::atomic<bool>> reader_stop_;
  std::uint64_t generation_ = 0;
  std::string link_error_;
  protocol::ParserState parser_;
  safety::State safety_;
  mapping::CalibrationProfile profile_;
  mapping::CursorFilterState filter_;
  mapping::DebounceState debounce_;
  bool last_hand_ = false;
  std::optional<std::uint16_t> last_seq_;
  std::optional<protocol::TelemetryFrame> last_telemetry_;
  std::optional<std::uint64_t> last_frame_us_;
  std::optional<std::uint64_t> last_telemetry_pub_;
  std::optional<std::vector<protocol::TelemetryFrame>> calibration_;
  std::uint64_t frames_in_period_ = 0;
  std::uint64_t next_heartbeat_us_ = 0;
  std::uint16_t host_heartbeat_seq_ = 0;
  std::optional<session::Session> session_;
  std::optional<stream::Recording> recording_;
  std::vector<protocol::TelemetryFrame> session_frames_;
  std::optional<session::SessionSummary> last_summary_;
  std::uint64_t next_session_tick_us_ = 0;
  std::uint64_t last_record_us_ = 0;
  Counters counters_;

  std::thread::id core_id_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Item> queue_;
  bool stopping_ = false;
  std::thread core_;
};

}  // namespace rehabridge::bridge
