#include "diperf/net.h"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

#include <fmt/format.h>

namespace diperf {

namespace {

using SteadyClock = std::chrono::steady_clock;

int remaining_ms(SteadyClock::time_point deadline) {
  auto left = std::chrono::duration_cast<Millis>(deadline - SteadyClock::now());
  if (left.count() < 0) return 0;
  return static_cast<int>(std::min<std::int64_t>(left.count(), 1 << 30));
}

sockaddr_in resolve(const HostPort& address) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  const std::string host = address.host.empty() ? "0.0.0.0" : address.host;
  int rc = ::getaddrinfo(host.c_str(), nullptr, &hints, &result);
  if (rc != 0 || result == nullptr) {
    throw NetError(fmt::format("cannot resolve '{}': {}", host, gai_strerror(rc)));
  }
  sockaddr_in addr{};
  std::memcpy(&addr, result->ai_addr, sizeof(addr));
  ::freeaddrinfo(result);
  addr.sin_port = htons(address.port);
  return addr;
}

}  // namespace

HostPort HostPort::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon + 1 >= text.size()) {
    throw ParseError(fmt::format("expected host:port, got '{}'", text));
  }
  HostPort hp;
  hp.host = std::string(text.substr(0, colon));
  const auto port_text = text.substr(colon + 1);
  unsigned value = 0;
  auto [ptr, ec] =
      std::from_chars(port_text.data(), port_text.data() + port_text.size(), value);
  if (ec != std::errc() || ptr != port_text.data() + port_text.size() ||
      value > 65535) {
    throw ParseError(fmt::format("bad port in '{}'", text));
  }
  hp.port = static_cast<std::uint16_t>(value);
  return hp;
}

std::string HostPort::to_string() const { return fmt::format("{}:{}", host, port); }

UniqueFd& UniqueFd::operator=(UniqueFd&& other) noexcept {
  if (this != &other) reset(other.release());
  return *this;
}

void UniqueFd::reset(int fd) {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

StopSignal::StopSignal() {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC | O_NONBLOCK) != 0) {
    throw NetError(fmt::format("pipe2: {}", std::strerror(errno)));
  }
  read_end_.reset(fds[0]);
  write_end_.reset(fds[1]);
}

void StopSignal::raise() {
  const char byte = 1;
  [[maybe_unused]] auto n = ::write(write_end_.get(), &byte, 1);
}

bool StopSignal::raised() const {
  pollfd p{read_end_.get(), POLLIN, 0};
  return ::poll(&p, 1, 0) > 0;
}

WaitResult wait_readable(int fd, Millis timeout, const StopSignal* stop) {
  const auto deadline = SteadyClock::now() + timeout;
  for (;;) {
    pollfd fds[2] = {{fd, POLLIN, 0}, {stop ? stop->fd() : -1, POLLIN, 0}};
    int rc = ::poll(fds, stop ? 2 : 1, remaining_ms(deadline));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw NetError(fmt::format("poll: {}", std::strerror(errno)));
    }
    if (stop && (fds[1].revents & POLLIN)) return WaitResult::kStopped;
    if (rc > 0 && fds[0].revents != 0) return WaitResult::kReady;
    if (SteadyClock::now() >= deadline) return WaitResult::kTimeout;
  }
}

bool sleep_for(Millis duration, const StopSignal* stop) {
  if (duration.count() <= 0) return !(stop && stop->raised());
  if (stop == nullptr) {
    ::usleep(static_cast<useconds_t>(duration.count()) * 1000);
    return true;
  }
  const auto deadline = SteadyClock::now() + duration;
  for (;;) {
    pollfd p{stop->fd(), POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc > 0) return false;
    if (rc < 0 && errno == EINTR) continue;
    if (SteadyClock::now() >= deadline) return true;
  }
}

UniqueFd connect_tcp(const HostPort& address, Millis timeout) {
  sockaddr_in addr = resolve(address);
  UniqueFd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
  if (!fd.valid()) throw NetError(fmt::format("socket: {}", std::strerror(errno)));
  int rc = ::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  if (rc != 0 && errno != EINPROGRESS) {
    throw NetError(fmt::format("connect {}: {}", address.to_string(),
                               std::strerror(errno)));
  }
  if (rc != 0) {
    pollfd p{fd.get(), POLLOUT, 0};
    const auto deadline = SteadyClock::now() + timeout;
    for (;;) {
      rc = ::poll(&p, 1, remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      break;
    }
    if (rc == 0) {
      throw NetError(fmt::format("connect {}: timed out", address.to_string()));
    }
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      throw NetError(fmt::format("connect {}: {}", address.to_string(),
                                 std::strerror(err)));
    }
  }
  int flags = ::fcntl(fd.get(), F_GETFL);
  ::fcntl(fd.get(), F_SETFL, flags & ~O_NONBLOCK);
  int one = 1;
  ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return fd;
}

TcpListener TcpListener::bind(const HostPort& address, int backlog) {
  sockaddr_in addr = resolve(address);
  TcpListener listener;
  listener.host_ = address.host.empty() ? "0.0.0.0" : address.host;
  listener.fd_.reset(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!listener.fd_.valid()) {
    throw NetError(fmt::format("socket: {}", std::strerror(errno)));
  }
  int one = 1;
  ::setsockopt(listener.fd_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(listener.fd_.get(), reinterpret_cast<sockaddr*>(&addr),
             sizeof(addr)) != 0) {
    throw NetError(fmt::format("bind {}: {}", address.to_string(),
                               std::strerror(errno)));
  }
  if (::listen(listener.fd_.get(), backlog) != 0) {
    throw NetError(fmt::format("listen: {}", std::strerror(errno)));
  }
  return listener;
}

HostPort TcpListener::local_address() const {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(fd_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  return HostPort{host_, ntohs(addr.sin_port)};
}

UniqueFd TcpListener::accept(Millis timeout, const StopSignal* stop) {
  if (wait_readable(fd_.get(), timeout, stop) != WaitResult::kReady) {
    return UniqueFd();
  }
  UniqueFd conn(::accept4(fd_.get(), nullptr, nullptr, SOCK_CLOEXEC));
  if (conn.valid()) {
    int one = 1;
    ::setsockopt(conn.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  return conn;
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == ENOTSOCK) n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetError(fmt::format("write: {}", std::strerror(errno)));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

LineReader::Status LineReader::read_line(std::string& line, Millis timeout,
                                         const StopSignal* stop) {
  const auto deadline = SteadyClock::now() + timeout;
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      line.assign(buffer_, 0, nl);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      buffer_.erase(0, nl + 1);
      return Status::kLine;
    }
    switch (wait_readable(fd_, Millis(remaining_ms(deadline)), stop)) {
      case WaitResult::kTimeout:
        return Status::kTimeout;
      case WaitResult::kStopped:
        return Status::kStopped;
      case WaitResult::kReady:
        break;
    }
    char chunk[4096];
    ssize_t n = ::read(fd_, chunk, sizeof(chunk));
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return Status::kClosed;
    }
    // A trailing fragment without newline is never delivered.
    if (n == 0) return Status::kClosed;
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace diperf
