#pragma once

// Exhaustive exploration of the interlock over every event sequence up to a
// given length. Each step picks one event kind and one of two delays: a short
// one (inside the resume dwell) or a long one (past it). Configurations that
// behave identically from here on are explored once per remaining depth,
// which visits the same behaviours as enumerating every sequence.

#include "rehabridge/safety.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace rehabridge::testing {

struct ModelCheckReport {
  std::uint64_t sequences = 0;      // number of event sequences covered
  std::uint64_t transitions = 0;    // transitions actually evaluated
  std::uint64_t cursor_violations = 0;
  std::uint64_t stop_violations = 0;
  std::uint64_t running_exits = 0;
  std::uint64_t resumes = 0;
  std::vector<std::string> first_failures;
};

class SafetyModelChecker {
 public:
  SafetyModelChecker(safety::Config cfg, std::vector<std::uint64_t> delays_us)
      : cfg_(cfg), delays_(std::move(delays_us)) {}

  static constexpr safety::EventKind kAlphabet[] = {
      safety::EventKind::HandOff,       safety::EventKind::HandOn,   safety::EventKind::Telemetry,
      safety::EventKind::HeartbeatMiss, safety::EventKind::CrcError, safety::EventKind::Connect,
      safety::EventKind::Disconnect,    safety::EventKind::Start,    safety::EventKind::Stop};

  ModelCheckReport run(int max_length, bool memoize = true) {
    report_ = {};
    memo_.clear();
    memoize_ = memoize;
    const std::uint64_t branching = std::size(kAlphabet) * delays_.size();
    std::uint64_t count = 1;
    std::uint64_t power = 1;
    for (int k = 1; k <= max_length; ++k) {
      power *= branching;
      count += power;
    }
    report_.sequences = count;
    explore(safety::State{}, max_length, "");
    return report_;
  }

  /// Everything the transition function can observe, with absolute times
  /// replaced by ages clipped at the horizon where they stop mattering.
  std::string canonical(const safety::State& s) const {
    std::ostringstream key;
    key << static_cast<int>(s.mode) << '|' << static_cast<int>(s.cause) << '|' << s.hand_present << '|';
    key << (s.hand_present ? std::min<std::uint64_t>(s.clock_us - s.hand_on_since_us, cfg_.resume_dwell_us) : 0)
        << '|' << std::min(s.consecutive_misses, cfg_.heartbeat_miss_limit) << '|' << s.torque_cnm << '|';
    for (const auto at : s.recent_crc_errors) {
      key << std::min<std::uint64_t>(s.clock_us - at, cfg_.crc_window_us) << ',';
    }
    return key.str();
  }

 private:
  void explore(const safety::State& s, int remaining, const std::string& trace) {
    if (remaining == 0) {
      return;
    }
    if (memoize_) {
      const auto key = canonical(s);
      auto [it, inserted] = memo_.try_emplace(key, remaining);
      if (!inserted) {
        if (it->second >= remaining) {
          return;
        }
        it->second = remaining;
      }
    }
    for (const auto kind : kAlphabet) {
      for (const auto delay : delays_) {
        const safety::Event e{kind, s.clock_us + delay, 800};
        const auto result = safety::transition(s, e, cfg_);
        ++report_.transitions;
        check(s, e, result, trace);
        explore(result.state, remaining - 1,
                report_.first_failures.empty() ? trace + std::string(to_string(kind)) + "+" +
                                                     std::to_string(delay / 1000) + "ms "
                                               : trace);
      }
    }
  }

  void check(const safety::State& before, const safety::Event& e, const safety::Transition& r,
             const std::string& trace) {
    const auto& after = r.state;
    const auto stops = std::count_if(r.actions.begin(), r.actions.end(),
                                     [](const safety::Action& a) { return a.kind == safety::ActionKind::SendStop; });
    const auto resumes = std::count_if(r.actions.begin(), r.actions.end(), [](const safety::Action& a) {
      return a.kind == safety::ActionKind::ResumeCursor;
    });
    const bool exit_running = before.mode == safety::Mode::Running && after.mode != safety::Mode::Running;
    report_.running_exits += exit_running;
    report_.resumes += static_cast<std::uint64_t>(resumes);

    const bool cursor_bad = (safety::cursor_enabled(after) && !after.hand_present) ||
                            (resumes > 0 && !after.hand_present) ||
                            (resumes > 0 && after.mode != safety::Mode::Running);
    const bool stop_bad = stops != (exit_running ? 1 : 0);
    if (cursor_bad) {
      ++report_.cursor_violations;
    }
    if (stop_bad) {
      ++report_.stop_violations;
    }
    if ((cursor_bad || stop_bad) && report_.first_failures.size() < 5) {
      report_.first_failures.push_back(trace + std::string(to_string(e.kind)));
    }
  }

  safety::Config cfg_;
  std::vector<std::uint64_t> delays_;
  std::map<std::string, int> memo_;
  bool memoize_ = true;
  ModelCheckReport report_;
};

}  // namespace rehabridge::testing
