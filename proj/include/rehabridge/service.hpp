#pragma once

#ifndef CPPHTTPLIB_THREAD_POOL_COUNT
#define CPPHTTPLIB_THREAD_POOL_COUNT 16
#endif

#include "rehabridge/bridge.hpp"
#include "rehabridge/survey.hpp"

#include <httplib.h>
#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <string>

namespace rehabridge::service {

using nlohmann::json;

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::AlreadyConnected:
    case ErrorCode::NotConnected:
    case ErrorCode::IllegalState:
    case ErrorCode::SessionClosed:
    case ErrorCode::SessionStillActive:
    case ErrorCode::PlanUnavailable:
    case ErrorCode::ConnectError:
    case ErrorCode::CalibrationTooNarrow:
    case ErrorCode::InsufficientSamples: return 409;
    case ErrorCode::StorageError:
    case ErrorCode::OrderingError: return 500;
    default: return 400;
  }
}

inline json error_body(ErrorCode code, const std::string& message) {
  return json{{"error", std::string(to_string(code))}, {"message", message}};
}

/// Splits "host:port"; a bare port binds to 127.0.0.1.
inline std::pair<std::string, int> parse_listen(const std::string& address) {
  const auto colon = address.rfind(':');
  const std::string host = colon == std::string::npos ? "127.0.0.1" : address.substr(0, colon);
  const std::string port = colon == std::string::npos ? address : address.substr(colon + 1);
  int p = -1;
  try {
    std::size_t used = 0;
    p = std::stoi(port, &used);
    if (used != port.size()) {
      p = -1;
    }
  } catch (const std::exception&) {
  }
  if (host.empty() || p < 0 || p > 65535) {
    throw Error(ErrorCode::ParseError, "listen address must be host:port, got " + address);
  }
  return {host, p};
}

inline std::vector<survey::SurveyResponse> responses_from_json(const json& j) {
  std::vector<survey::SurveyResponse> out;
  const auto one = [&](const json& r) {
    survey::SurveyResponse s;
    s.subject_id = r.at("subject_id").get<std::string>();
    for (const auto& [q, v] : r.at("answers").items()) {
      const auto text = v.is_number_integer() ? std::to_string(v.get<int>()) : v.get<std::string>();
      const auto level = survey::parse_level(text);
      if (!level) {
        throw Error(ErrorCode::InvalidResponse, s.subject_id + "/" + q + ": not a Likert level: " + text);
      }
      s.answers[q] = *level;
    }
    out.push_back(std::move(s));
  };
  if (j.is_array()) {
    for (const auto& r : j) {
      one(r);
    }
  } else {
    one(j);
  }
  return out;
}

/// REST + server-sent-events front end over a Bridge.
class Service {
 public:
  Service(bridge::Bridge& bridge, survey::Questionnaire questionnaire)
      : bridge_(bridge), questionnaire_(std::move(questionnaire)) {
    questionnaire_.validate();
    survey_path_ = bridge_.config().data_dir / "survey_responses.csv";
    if (std::filesystem::exists(survey_path_)) {
      std::ifstream in(survey_path_, std::ios::binary);
      std::ostringstream text;
      text << in.rdbuf();
      responses_ = survey::responses_from_csv(text.str());
    }
    routes();
  }

  ~Service() { stop(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and returns the actual port (`port` 0 picks a free one).
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
      throw Error(ErrorCode::ConnectError, "cannot listen on " + host + ":" + std::to_string(port));
    }
    return bound;
  }

  /// Serves until stop(). Blocks.
  void run() { server_.listen_after_bind(); }

  void stop() {
    stopping_ = true;
    server_.stop();
  }

  bool running() const { return server_.is_running(); }

 private:
  template <class F>
  httplib::Server::Handler guarded(F f) {
    return [f = std::move(f)](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        res.status = http_status(e.code());
        res.set_content(error_body(e.code(), e.detail()).dump(), "application/json");
      } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(error_body(ErrorCode::ParseError, e.what()).dump(), "application/json");
      }
    };
  }

  static json body_of(const httplib::Request& req) {
    if (req.body.empty()) {
      return json::object();
    }
    auto j = json::parse(req.body);
    if (!j.is_object() && !j.is_array()) {
      throw Error(ErrorCode::ParseError, "request body must be a JSON object");
    }
    return j;
  }

  static void reply(httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); }

  void routes() {
    auto& s = server_;
    s.Get("/api/ports", guarded([this](const auto&, auto& res) {
            json out = json::array();
            for (const auto& p : bridge_.ports()) {
              out.push_back({{"name", p.name}, {"descriptor", p.descriptor}});
            }
            reply(res, out);
          }));
    s.Post("/api/connect", guarded([this](const auto& req, auto& res) {
             const auto b = body_of(req);
             reply(res, bridge_.connect(b.value("port", std::string(link::kSimulatorPort))));
           }));
    s.Post("/api/disconnect", guarded([this](const auto&, auto& res) { reply(res, bridge_.disconnect()); }));
    s.Get("/api/status", guarded([this](const auto&, auto& res) { reply(res, bridge_.status()); }));

    s.Get("/api/calibration", guarded([this](const auto&, auto& res) { reply(res, bridge_.calibration()); }));
    s.Post("/api/calibration", guarded([this](const auto& req, auto& res) {
             const auto action = body_of(req).at("action").template get<std::string>();
             if (action == "start") {
               reply(res, bridge_.start_calibration());
             } else if (action == "commit") {
               reply(res, bridge_.commit_calibration());
             } else {
               throw Error(ErrorCode::ParseError, "action must be start or commit");
             }
           }));

    s.Get("/api/session", guarded([this](const auto&, auto& res) { reply(res, bridge_.status()["session"]); }));
    s.Post("/api/session", guarded([this](const auto& req, auto& res) {
             const auto b = body_of(req);
             std::optional<session::SessionPlan> plan;
             if (b.contains("plan") && !b["plan"].is_null()) {
               plan = b["plan"].template get<session::SessionPlan>();
             }
             res.status = 201;
             reply(res, bridge_.start_session(b.value("subject_id", std::string("anonymous")), std::move(plan)));
           }));
    s.Post("/api/session/stop", guarded([this](const auto&, auto& res) { reply(res, bridge_.stop_session()); }));
    s.Post("/api/session/level-passed", guarded([this](const auto& req, auto& res) {
             reply(res, bridge_.level_event(session::LevelKind::LevelPassed, source_of(req)));
           }));
    s.Post("/api/session/level-failed", guarded([this](const auto& req, auto& res) {
             reply(res, bridge_.level_event(session::LevelKind::LevelFailed, source_of(req)));
           }));
    s.Post("/api/torque", guarded([this](const auto& req, auto& res) {
             reply(res, bridge_.set_torque(body_of(req).at("nm").template get<double>()));
           }));

    s.Get("/api/sessions", guarded([this](const auto&, auto& res) {
            reply(res, json(bridge_.store().list_sessions()));
          }));
    s.Get(R"(/api/sessions/([^/]+))", guarded([this](const auto& req, auto& res) {
            reply(res, session_detail(req.matches[1]));
          }));
    s.Get(R"(/api/sessions/([^/]+)/records)", guarded([this](const auto& req, auto& res) {
            reply(res, session_records(req));
          }));
    s.Get(R"(/api/sessions/([^/]+)/export\.csv)", guarded([this](const auto& req, auto& res) {
            const std::string id = req.matches[1];
            const auto kind_name = req.has_param("kind") ? req.get_param_value("kind") : "telemetry";
            const auto kind = store::parse_kind(kind_name);
            if (!kind) {
              throw Error(ErrorCode::ParseError, "unknown record kind " + kind_name);
            }
            const auto csv = bridge_.store().export_csv(id, *kind);
            res.set_header("Content-Disposition", "attachment; filename=\"" + id + "-" + kind_name + ".csv\"");
            res.set_content(csv, "text/csv");
          }));

    s.Post("/api/survey/responses", guarded([this](const auto& req, auto& res) {
             const bool is_json = req.get_header_value("Content-Type").find("json") != std::string::npos;
             const auto incoming = is_json ? responses_from_json(body_of(req)) : survey::responses_from_csv(req.body);
             res.status = 201;
             reply(res, json{{"accepted", incoming.size()}, {"subjects", add_responses(incoming)}});
           }));
    s.Get("/api/survey/responses", guarded([this](const auto&, auto& res) {
            std::lock_guard lock(survey_mutex_);
            res.set_content(survey::responses_to_csv(responses_, questionnaire_), "text/csv");
          }));
    s.Get("/api/survey/summary", guarded([this](const auto& req, auto& res) {
            const auto format = req.has_param("format") ? req.get_param_value("format") : "json";
            std::vector<survey::CategorySummary> rows;
            {
              std::lock_guard lock(survey_mutex_);
              if (!responses_.empty()) {
                rows = survey::aggregate(responses_, questionnaire_);
              }
            }
            if (format == "json") {
              reply(res, survey::summary_json(rows));
            } else if (format == "csv") {
              res.set_content(survey::summary_csv(rows), "text/csv");
            } else if (format == "text") {
              res.set_content(survey::render_table(rows), "text/plain; charset=utf-8");
            } else {
              throw Error(ErrorCode::ParseError, "format must be json, csv or text");
            }
          }));

    s.Post("/api/sim", guarded([this](const auto& req, auto& res) {
             const auto b = body_of(req);
             bridge_.with_simulator([&](link::SimLink& sim) {
               if (b.contains("hand_present")) sim.set_hand_presence(b["hand_present"].template get<bool>());
               if (b.contains("user_torque_nm")) sim.set_user_torque(b["user_torque_nm"].template get<double>());
               if (b.contains("trigger_pressed")) sim.press_trigger(b["trigger_pressed"].template get<bool>());
               if (b.contains("muted")) sim.set_muted(b["muted"].template get<bool>());
             });
             reply(res, bridge_.status());
           }));

    s.Get("/api/stream", [this](const httplib::Request&, httplib::Response& res) {
      auto sub = bridge_.hub().subscribe();
      res.set_header("Cache-Control", "no-cache");
      res.set_header("X-Accel-Buffering", "no");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, sub, opened = false](std::size_t, httplib::DataSink& sink) mutable {
            if (!opened) {
              opened = true;
              const std::string hello = "retry: 1000\n\n";
              return sink.write(hello.data(), hello.size());
            }
            if (stopping_ || !sink.is_writable()) {
              return false;
            }
            const auto m = sub->pop(std::chrono::milliseconds(1000));
            const std::string chunk = m ? "data: " + m->to_json().dump() + "\n\n" : std::string(": keepalive\n\n");
            return sink.write(chunk.data(), chunk.size());
          },
          [sub](bool) { sub->close(); });
    });

    s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      res.status = 500;
      res.set_content(json{{"error", "Internal"}, {"message", what}}.dump(), "application/json");
    });
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        res.set_content(
            json{{"error", res.status == 404 ? "NotFound" : "HttpError"}, {"message", httplib::status_message(res.status)}}
                .dump(),
            "application/json");
      }
    });
  }

  static session::LevelSource source_of(const httplib::Request& req) {
    const auto b = body_of(req);
    const auto src = b.value("source", std::string("ui"));
    if (src == "ui") return session::LevelSource::UIManual;
    if (src == "game") return session::LevelSource::GameHook;
    throw Error(ErrorCode::ParseError, "source must be ui or game");
  }

  json session_detail(const std::string& id) {
    auto& st = bridge_.store();
    json j = st.meta(id);
    std::vector<session::LoggedSessionEvent> events;
    std::map<std::string, std::size_t> counts;
    const auto log = st.read(id);
    for (const auto& r : log.records) {
      ++counts[std::string(store::to_string(r.kind))];
      if (r.kind == store::RecordKind::Session) {
        events.push_back({r.t_us, r.body});
      }
    }
    j["record_counts"] = counts;
    j["truncated_tail"] = log.truncated_tail;
    if (!events.empty()) {
      try {
        j["record"] = session::replay(events).record();
      } catch (const Error& e) {
        j["replay_error"] = e.what();
      }
    }
    return j;
  }

  json session_records(const httplib::Request& req) {
    const std::string id = req.matches[1];
    const auto num = [&](const char* key, std::uint64_t fallback) {
      if (!req.has_param(key)) {
        return fallback;
      }
      try {
        return static_cast<std::uint64_t>(std::stoull(req.get_param_value(key)));
      } catch (const std::exception&) {
        throw Error(ErrorCode::ParseError, std::string(key) + " must be a non-negative integer");
      }
    };
    std::set<store::RecordKind> kinds;
    if (req.has_param("kinds")) {
      for (const auto& k : bridge::split_list(req.get_param_value("kinds"))) {
        const auto kind = store::parse_kind(k);
        if (!kind) {
          throw Error(ErrorCode::ParseError, "unknown record kind " + k);
        }
        kinds.insert(*kind);
      }
    }
    json out = json::array();
    for (const auto& r : bridge_.store().query(id, num("from", 0), num("to", UINT64_MAX), kinds)) {
      out.push_back({{"t_us", r.t_us}, {"kind", std::string(store::to_string(r.kind))}, {"body", r.body}});
    }
    return out;
  }

  std::size_t add_responses(const std::vector<survey::SurveyResponse>& incoming) {
    const auto ids = questionnaire_.question_ids();
    const std::set<std::string> known(ids.begin(), ids.end());
    for (const auto& r : incoming) {
      for (const auto& [q, level] : r.answers) {
        if (!known.count(q)) {
          throw Error(ErrorCode::InvalidResponse, r.subject_id + ": unknown question " + q);
        }
      }
      for (const auto& q : ids) {
        if (!r.answers.count(q)) {
          throw Error(ErrorCode::IncompleteResponse, r.subject_id + " did not answer " + q);
        }
      }
    }
    std::lock_guard lock(survey_mutex_);
    auto merged = responses_;
    for (const auto& r : incoming) {
      const auto it = std::find_if(merged.begin(), merged.end(),
                                   [&](const survey::SurveyResponse& m) { return m.subject_id == r.subject_id; });
      if (it != merged.end()) {
        *it = r;
      } else {
        merged.push_back(r);
      }
    }
    persist(merged);
    responses_ = std::move(merged);
    return responses_.size();
  }

  void persist(const std::vector<survey::SurveyResponse>& all) const {
    const auto text = survey::responses_to_csv(all, questionnaire_);
    const auto tmp = survey_path_.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    bool ok = fd >= 0 && ::write(fd, text.data(), text.size()) == static_cast<ssize_t>(text.size()) &&
              ::fsync(fd) == 0;
    if (fd >= 0) {
      ok = (::close(fd) == 0) && ok;
    }
    if (!ok || std::rename(tmp.c_str(), survey_path_.c_str()) != 0) {
      ::unlink(tmp.c_str());
      throw Error(ErrorCode::StorageError, "cannot write " + survey_path_.string());
    }
  }

  bridge::Bridge& bridge_;
  survey::Questionnaire questionnaire_;
  std::filesystem::path survey_path_;
  std::mutex survey_mutex_;
  std::vector<survey::SurveyResponse> responses_;
  std::atomic<bool> stopping_{false};
  httplib::Server server_;
};

}  // namespace rehabridge::service
