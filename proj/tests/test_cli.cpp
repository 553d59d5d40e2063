#include "support/temp_dir.hpp"

#include <httplib.h>
#include <json.hpp>

#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <sstream>
#include <thread>

using namespace std::chrono_literals;

namespace {

struct Run {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

Run run_cli(const std::vector<std::string>& args) {
  testing_support::TempDir tmp;
  std::string cmd = quote(REHABRIDGE_CLI);
  for (const auto& a : args) {
    cmd += " " + quote(a);
  }
  cmd += " >" + quote((tmp.path() / "out").string()) + " 2>" + quote((tmp.path() / "err").string());
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(tmp.path() / "out"), slurp(tmp.path() / "err")};
}

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

pid_t spawn(const std::vector<std::string>& args) {
  const pid_t pid = ::fork();
  if (pid == 0) {
    std::vector<char*> argv{const_cast<char*>(REHABRIDGE_CLI)};
    for (const auto& a : args) {
      argv.push_back(const_cast<char*>(a.c_str()));
    }
    argv.push_back(nullptr);
    ::execv(REHABRIDGE_CLI, argv.data());
    ::_exit(127);
  }
  return pid;
}

}  // namespace

TEST(Cli, PortAndSimulateConflict) {
  const auto r = run_cli({"--port", "/dev/ttyUSB0", "--simulate"});
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("usage"), std::string::npos);
}

TEST(Cli, ScenarioNeedsSimulate) {
  testing_support::TempDir dir;
  std::ofstream(dir.path() / "s.txt") << "t=0 hand=1\n";
  EXPECT_EQ(run_cli({"--scenario", (dir.path() / "s.txt").string()}).exit_code, 2);
  EXPECT_EQ(run_cli({"--bogus"}).exit_code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run_cli({"--help"});
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("--survey-summary"), std::string::npos);
}

TEST(Cli, ExportUnknownSessionIsNotFound) {
  testing_support::TempDir dir;
  const auto r = run_cli({"--data-dir", dir.path().string(), "--export-session", "20990101T000000Z-0000"});
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("NotFound"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST(Cli, SurveySummaryPrintsTable) {
  const auto r = run_cli({"--survey-summary", std::string(REHABRIDGE_RESOURCES) + "/table1_responses.csv"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::istringstream lines(r.out);
  std::vector<std::string> rows;
  for (std::string line; std::getline(lines, line);) {
    rows.push_back(line);
  }
  ASSERT_EQ(rows.size(), 8U);
  EXPECT_EQ(rows[0].rfind("Type of Questions", 0), 0U);
  EXPECT_NE(rows[0].find("Very Unsatisfied"), std::string::npos);
  EXPECT_EQ(rows[2].rfind("Robot Safety", 0), 0U);
  EXPECT_NE(rows[2].find("53.33%"), std::string::npos);

  EXPECT_EQ(run_cli({"--survey-summary", "/nonexistent.csv"}).exit_code, 2);
}

TEST(Cli, ServesWithScriptedSimulator) {
  testing_support::TempDir dir;
  const auto scenario = dir.path() / "s.txt";
  std::ofstream(scenario) << "t=0.2 hand=0\n";
  const int port = free_port();
  const pid_t pid = spawn({"--simulate", "--scenario", scenario.string(), "--data-dir", (dir.path() / "data").string(),
                           "--listen", "127.0.0.1:" + std::to_string(port)});
  httplib::Client cli("127.0.0.1", port);
  nlohmann::json status;
  const auto deadline = std::chrono::steady_clock::now() + 5s;
  while (std::chrono::steady_clock::now() < deadline) {
    if (auto res = cli.Get("/api/status"); res && res->status == 200) {
      status = nlohmann::json::parse(res->body);
      if (status.contains("telemetry") && !status["telemetry"]["hand_present"].get<bool>()) {
        break;
      }
    }
    std::this_thread::sleep_for(20ms);
  }
  EXPECT_EQ(status["link"], "simulator");
  EXPECT_EQ(status["safety"], "Idle");
  ASSERT_TRUE(status.contains("telemetry"));
  EXPECT_FALSE(status["telemetry"]["hand_present"].get<bool>());

  ::kill(pid, SIGTERM);
  int wstatus = 0;
  ::waitpid(pid, &wstatus, 0);
  EXPECT_TRUE(WIFEXITED(wstatus));
  EXPECT_EQ(WEXITSTATUS(wstatus), 0);
}
