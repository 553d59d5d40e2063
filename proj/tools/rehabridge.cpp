// rehabridge: device bridge daemon and offline helpers.

#include "rehabridge/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace rehabridge;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::NotFound, "cannot read " + path);
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int fail(const Error& e) {
  std::cerr << e.what() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rehabilitation robot bridge: serial/simulator link, safety interlock, sessions and HTTP API"};
  std::string listen = "127.0.0.1:8472";
  std::string port;
  bool simulate = false;
  std::string scenario;
  std::string config_path;
  std::string data_dir;
  std::string export_session;
  std::string export_kind = "telemetry";
  std::string survey_csv;

  app.add_option("--listen", listen, "HTTP listen address host:port")->capture_default_str();
  auto* port_opt = app.add_option("--port", port, "serial port to connect at startup");
  auto* sim_opt = app.add_flag("--simulate", simulate, "connect the built-in simulator at startup");
  app.add_option("--scenario", scenario, "simulator input script")->check(CLI::ExistingFile)->needs(sim_opt);
  app.add_option("--config", config_path, "key-value config file")->check(CLI::ExistingFile);
  app.add_option("--data-dir", data_dir, "session and survey storage directory");
  app.add_option("--export-session", export_session, "print a recorded session as CSV and exit");
  app.add_option("--kind", export_kind, "record kind for --export-session")->capture_default_str();
  app.add_option("--survey-summary", survey_csv, "print the category table for a responses CSV and exit")
      ->check(CLI::ExistingFile);
  port_opt->excludes(sim_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    const auto doc = config_path.empty() ? kv::Document{} : kv::Document::parse(read_file(config_path));
    auto cfg = bridge::config_from(doc);
    if (!data_dir.empty()) {
      cfg.data_dir = data_dir;
    }
    if (!scenario.empty()) {
      cfg.scenario_path = scenario;
    }
    const auto questionnaire = survey::questionnaire_from(doc);

    if (!survey_csv.empty()) {
      const auto rows = survey::aggregate(survey::responses_from_csv(read_file(survey_csv)), questionnaire);
      std::cout << survey::render_table(rows);
      return 0;
    }

    if (!export_session.empty()) {
      const auto kind = store::parse_kind(export_kind);
      if (!kind) {
        std::cerr << "usage error: unknown record kind " << export_kind << "\n";
        return 2;
      }
      store::TelemetryStore st(cfg.data_dir, cfg.flush);
      std::cout << st.export_csv(export_session, *kind);
      return 0;
    }

    const auto [host, http_port] = service::parse_listen(listen);

    // Signals are taken by a dedicated thread; block them before any other thread starts.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::signal(SIGPIPE, SIG_IGN);

    bridge::Bridge bridge(cfg);
    service::Service svc(bridge, questionnaire);
    const int bound = svc.bind(host, http_port);
    if (simulate) {
      bridge.connect(std::string(link::kSimulatorPort));
    } else if (!port.empty()) {
      bridge.connect(port);
    }

    std::atomic<bool> done{false};
    std::thread waiter([&] {
      const timespec tick{0, 200'000'000};
      while (!done) {
        if (sigtimedwait(&signals, nullptr, &tick) > 0) {
          svc.stop();
          return;
        }
      }
    });
    std::cout << "listening on http://" << host << ":" << bound << std::endl;
    svc.run();
    done = true;
    waiter.join();
    return 0;
  } catch (const Error& e) {
    return fail(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
