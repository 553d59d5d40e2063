#pragma once

#include "rehabridge/error.hpp"
#include "rehabridge/simulator.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/file.h>
#include <sys/ioctl.h>
#include <termios.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace rehabridge::link {

inline constexpr std::string_view kSimulatorPort = "simulator";

/// Byte pipe to a device. read() and write() may be called from different
/// threads; close() ends any blocked read.
class ByteLink {
 public:
  virtual ~ByteLink() = default;

  virtual std::string name() const = 0;
  virtual void write(std::span<const std::uint8_t> bytes) = 0;
  /// Bytes available within the timeout, possibly none. Throws ConnectError
  /// once the link has failed.
  virtual std::vector<std::uint8_t> read(std::chrono::milliseconds timeout) = 0;
  virtual void close() = 0;
};

// ---------------------------------------------------------------------------
// Serial
// ---------------------------------------------------------------------------

inline speed_t baud_constant(int baud) {
  switch (baud) {
    case 9600: return B9600;
    case 19200: return B19200;
    case 38400: return B38400;
    case 57600: return B57600;
    case 115200: return B115200;
    case 230400: return B230400;
    case 460800: return B460800;
    case 921600: return B921600;
    default: throw Error(ErrorCode::ConnectError, "unsupported baud rate " + std::to_string(baud));
  }
}

class SerialLink final : public ByteLink {
 public:
  SerialLink(std::string path, int baud = 115200) : path_(std::move(path)) {
    fd_ = ::open(path_.c_str(), O_RDWR | O_NOCTTY | O_NONBLOCK | O_CLOEXEC);
    if (fd_ < 0) {
      throw Error(ErrorCode::ConnectError, "cannot open " + path_ + ": " + std::strerror(errno));
    }
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error(ErrorCode::ConnectError, path_ + " is in use by another process");
    }
    termios tio{};
    if (::tcgetattr(fd_, &tio) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw Error(ErrorCode::ConnectError, path_ + " is not a terminal device: " + why);
    }
    ::cfmakeraw(&tio);
    tio.c_cflag |= CLOCAL | CREAD;
    tio.c_cc[VMIN] = 0;
    tio.c_cc[VTIME] = 0;
    const speed_t speed = baud_constant(baud);
    ::cfsetispeed(&tio, speed);
    ::cfsetospeed(&tio, speed);
    if (::tcsetattr(fd_, TCSANOW, &tio) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw Error(ErrorCode::ConnectError, "cannot configure " + path_ + ": " + why);
    }
    ::tcflush(fd_, TCIOFLUSH);
    if (::pipe2(wake_, O_CLOEXEC | O_NONBLOCK) != 0) {
      ::close(fd_);
      throw Error(ErrorCode::ConnectError, "pipe: " + std::string(std::strerror(errno)));
    }
  }

  ~SerialLink() override {
    close();
    ::close(wake_[0]);
    ::close(wake_[1]);
  }

  std::string name() const override { return path_; }

  void write(std::span<const std::uint8_t> bytes) override {
    std::lock_guard lock(write_mutex_);
    if (fd_ < 0) {
      throw Error(ErrorCode::NotConnected, path_ + " is closed");
    }
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = ::write(fd_, bytes.data() + done, bytes.size() - done);
      if (n < 0) {
        if (errno == EINTR) {
          continue;
        }
        if (errno == EAGAIN) {
          pollfd p{fd_, POLLOUT, 0};
          ::poll(&p, 1, 50);
          continue;
        }
        throw Error(ErrorCode::ConnectError, "write to " + path_ + " failed: " + std::strerror(errno));
      }
      done += static_cast<std::size_t>(n);
    }
    ::tcdrain(fd_);
  }

  std::vector<std::uint8_t> read(std::chrono::milliseconds timeout) override {
    if (closed_) {
      throw Error(ErrorCode::NotConnected, path_ + " is closed");
    }
    pollfd fds[2] = {{fd_, POLLIN, 0}, {wake_[0], POLLIN, 0}};
    const int rc = ::poll(fds, 2, static_cast<int>(timeout.count()));
    if (rc < 0) {
      if (errno == EINTR) {
        return {};
      }
      throw Error(ErrorCode::ConnectError, "poll on " + path_ + " failed: " + std::strerror(errno));
    }
    if (closed_) {
      throw Error(ErrorCode::NotConnected, path_ + " is closed");
    }
    if (fds[0].revents & (POLLERR | POLLNVAL)) {
      throw Error(ErrorCode::ConnectError, path_ + " reported an error");
    }
    std::vector<std::uint8_t> out;
    if (fds[0].revents & (POLLIN | POLLHUP)) {
      std::uint8_t buf[4096];
      const ssize_t n = ::read(fd_, buf, sizeof(buf));
      if (n > 0) {
        out.assign(buf, buf + n);
      } else if (n == 0 || (n < 0 && errno != EAGAIN && errno != EINTR)) {
        throw Error(ErrorCode::ConnectError, path_ + " disconnected");
      }
    }
    return out;
  }

  void close() override {
    if (closed_.exchange(true)) {
      return;
    }
    [[maybe_unused]] auto n = ::write(wake_[1], "x", 1);
    std::lock_guard lock(write_mutex_);
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
    fd_ = -1;
  }

 private:
  std::string path_;
  int fd_ = -1;
  int wake_[2] = {-1, -1};
  std::atomic<bool> closed_{false};
  std::mutex write_mutex_;
};

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

/// Runs a SimulatedDevice against the wall clock on its own thread.
class SimLink final : public ByteLink {
 public:
  explicit SimLink(sim::SimParams params = {}, std::vector<sim::ScenarioCommand> scenario = {})
      : device_(params, std::move(scenario)) {
    clock_ = std::thread([this] { run(); });
  }

  ~SimLink() override { close(); }

  std::string name() const override { return std::string(kSimulatorPort); }

  void write(std::span<const std::uint8_t> bytes) override {
    std::lock_guard lock(mutex_);
    if (stopped_) {
      throw Error(ErrorCode::NotConnected, "simulator is closed");
    }
    device_.receive(bytes);
  }

  std::vector<std::uint8_t> read(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return !outbox_.empty() || stopped_; });
    if (outbox_.empty() && stopped_) {
      throw Error(ErrorCode::NotConnected, "simulator is closed");
    }
    std::vector<std::uint8_t> out(outbox_.begin(), outbox_.end());
    outbox_.clear();
    return out;
  }

  void close() override {
    {
      std::lock_guard lock(mutex_);
      if (stopped_) {
        return;
      }
      stopped_ = true;
    }
    cv_.notify_all();
    if (clock_.joinable()) {
      clock_.join();
    }
  }

  // Test and console hooks.
  void set_hand_presence(bool present) { with_device([&](sim::SimulatedDevice& d) { d.set_hand_presence(present); }); }
  void set_user_torque(double nm) { with_device([&](sim::SimulatedDevice& d) { d.set_user_torque(nm); }); }
  void press_trigger(bool pressed) { with_device([&](sim::SimulatedDevice& d) { d.press_trigger(pressed); }); }
  void set_muted(bool muted) { with_device([&](sim::SimulatedDevice& d) { d.set_muted(muted); }); }

  /// Queues raw bytes on the device->host stream (line noise injection).
  void inject(std::span<const std::uint8_t> bytes) {
    {
      std::lock_guard lock(mutex_);
      outbox_.insert(outbox_.end(), bytes.begin(), bytes.end());
    }
    cv_.notify_all();
  }

  template <class F>
  auto with_device(F&& f) -> decltype(f(std::declval<sim::SimulatedDevice&>())) {
    std::lock_guard lock(mutex_);
    return f(device_);
  }

 private:
  void run() {
    using clock = std::chrono::steady_clock;
    const auto dt = std::chrono::microseconds(sim::dt_us(device_.params()));
    auto next = clock::now() + dt;
    while (true) {
      std::this_thread::sleep_until(next);
      bool produced = false;
      {
        std::lock_guard lock(mutex_);
        if (stopped_) {
          return;
        }
        // Catch up if the thread was descheduled.
        while (next <= clock::now()) {
          const auto bytes = device_.step();
          outbox_.insert(outbox_.end(), bytes.begin(), bytes.end());
          produced |= !bytes.empty();
          next += dt;
        }
      }
      if (produced) {
        cv_.notify_all();
      }
    }
  }

  sim::SimulatedDevice device_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::uint8_t> outbox_;
  bool stopped_ = false;
  std::thread clock_;
};

// ---------------------------------------------------------------------------
// Port discovery
// ---------------------------------------------------------------------------

struct PortInfo {
  std::string name;
  std::string descriptor;

  bool operator==(const PortInfo&) const = default;
};

struct PortScan {
  std::vector<std::filesystem::path> directories{"/dev"};
  std::vector<std::string> prefixes{"ttyUSB", "ttyACM", "ttyAMA", "rfcomm"};
};

inline std::string describe_port(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::error_code ec;
  const auto target = fs::canonical(path, ec);
  const auto base = (ec ? path : target).filename().string();
  const fs::path sys = fs::path("/sys/class/tty") / base / "device";
  for (const auto* attr : {"../product", "../../product", "interface"}) {
    std::ifstream in(sys / attr);
    std::string line;
    if (in && std::getline(in, line) && !line.empty()) {
      return line;
    }
  }
  if (!ec && target != path) {
    return "serial port (" + target.string() + ")";
  }
  return "serial port";
}

/// Candidate serial ports plus the built-in simulator, simulator first and
/// the rest sorted by path.
inline std::vector<PortInfo> list_ports(const PortScan& scan = {}) {
  namespace fs = std::filesystem;
  std::vector<PortInfo> out{{std::string(kSimulatorPort), "built-in arm simulator"}};
  std::vector<PortInfo> found;
  for (const auto& dir : scan.directories) {
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
      const auto name = entry.path().filename().string();
      const bool match = std::any_of(scan.prefixes.begin(), scan.prefixes.end(),
                                     [&](const std::string& p) { return name.rfind(p, 0) == 0; });
      if (match) {
        found.push_back({entry.path().string(), describe_port(entry.path())});
      }
    }
  }
  std::sort(found.begin(), found.end(), [](const PortInfo& a, const PortInfo& b) { return a.name < b.name; });
  out.insert(out.end(), found.begin(), found.end());
  return out;
}

}  // namespace rehabridge::link
