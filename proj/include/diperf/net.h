#pragma once

// Thin POSIX TCP helpers shared by the time server, mock target and tester.

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "diperf/model.h"

namespace diperf {

class NetError : public Error {
 public:
  using Error::Error;
};

struct HostPort {
  std::string host;
  std::uint16_t port = 0;

  static HostPort parse(std::string_view text);
  std::string to_string() const;
  bool operator==(const HostPort&) const = default;
};

// Owning file descriptor.
class UniqueFd {
 public:
  UniqueFd() = default;
  explicit UniqueFd(int fd) : fd_(fd) {}
  UniqueFd(UniqueFd&& other) noexcept : fd_(other.release()) {}
  UniqueFd& operator=(UniqueFd&& other) noexcept;
  UniqueFd(const UniqueFd&) = delete;
  UniqueFd& operator=(const UniqueFd&) = delete;
  ~UniqueFd() { reset(); }

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void reset(int fd = -1);

 private:
  int fd_ = -1;
};

// Self-pipe that wakes any poll() watching fd(). Once raised it stays raised.
class StopSignal {
 public:
  StopSignal();
  void raise();
  bool raised() const;
  int fd() const { return read_end_.get(); }

 private:
  UniqueFd read_end_;
  UniqueFd write_end_;
};

enum class WaitResult { kReady, kTimeout, kStopped };

// Polls fd for readability; honours an optional stop signal.
WaitResult wait_readable(int fd, Millis timeout, const StopSignal* stop = nullptr);

// Interruptible sleep. Returns false if the stop signal fired.
bool sleep_for(Millis duration, const StopSignal* stop);

UniqueFd connect_tcp(const HostPort& address, Millis timeout);

class TcpListener {
 public:
  static TcpListener bind(const HostPort& address, int backlog = 512);
  HostPort local_address() const;
  // Returns an invalid fd on timeout or stop.
  UniqueFd accept(Millis timeout, const StopSignal* stop = nullptr);
  int fd() const { return fd_.get(); }

 private:
  UniqueFd fd_;
  std::string host_;
};

void write_all(int fd, std::string_view data);

// Buffered newline-delimited reader over a file descriptor.
class LineReader {
 public:
  enum class Status { kLine, kTimeout, kClosed, kStopped };

  explicit LineReader(int fd) : fd_(fd) {}
  // Line is returned without the trailing newline (and without '\r').
  Status read_line(std::string& line, Millis timeout,
                   const StopSignal* stop = nullptr);

 private:
  int fd_;
  std::string buffer_;
};

}  // namespace diperf
