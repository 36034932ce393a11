#include "diperf/timesync.h"

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace diperf {

namespace {

std::int64_t floor_half(std::int64_t value) {
  return value >= 0 ? value / 2 : -((-value + 1) / 2);
}

}  // namespace

ClockOffset estimate_offset(std::span<const TimeProbe> probes, int tester_id) {
  if (probes.empty()) throw Error("estimate_offset: no probes");
  const TimeProbe* best = nullptr;
  std::int64_t measured_at = probes.front().recv_local_ms;
  for (const auto& p : probes) {
    if (p.recv_local_ms < p.send_local_ms) {
      throw Error("estimate_offset: probe received before it was sent");
    }
    // Strict '<' keeps the earliest of equally fast probes.
    if (best == nullptr || p.round_trip_ms() < best->round_trip_ms()) best = &p;
    measured_at = std::max(measured_at, p.recv_local_ms);
  }
  ClockOffset out;
  out.tester_id = tester_id;
  out.offset_ms =
      best->server_time_ms - best->send_local_ms - floor_half(best->round_trip_ms());
  out.uncertainty_ms = (best->round_trip_ms() + 1) / 2;
  out.measured_at_local_ms = measured_at;
  return out;
}

TimeServer::~TimeServer() { stop(); }

void TimeServer::start(const HostPort& listen) {
  listener_ = TcpListener::bind(listen);
  address_ = listener_.local_address();
  thread_ = std::thread([this] { loop(); });
}

void TimeServer::stop() {
  if (thread_.joinable()) {
    stop_.raise();
    thread_.join();
  }
}

void TimeServer::loop() {
  struct Pending {
    UniqueFd fd;
    std::string buffer;
    std::chrono::steady_clock::time_point accepted;
  };
  std::vector<Pending> pending;
  for (;;) {
    std::vector<pollfd> fds;
    fds.push_back({stop_.fd(), POLLIN, 0});
    fds.push_back({listener_.fd(), POLLIN, 0});
    for (auto& p : pending) fds.push_back({p.fd.get(), POLLIN, 0});
    int rc = ::poll(fds.data(), fds.size(), 500);
    if (rc < 0 && errno != EINTR) break;
    if (fds[0].revents & POLLIN) break;
    const auto now = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < pending.size(); ++i) {
      auto& p = pending[i];
      if (fds[i + 2].revents == 0) continue;
      char chunk[256];
      ssize_t n = ::read(p.fd.get(), chunk, sizeof(chunk));
      if (n <= 0) {
        p.fd.reset();
        continue;
      }
      p.buffer.append(chunk, static_cast<std::size_t>(n));
      if (p.buffer.find('\n') == std::string::npos) continue;
      std::string_view request(p.buffer);
      request = request.substr(0, request.find('\n'));
      if (!request.empty() && request.back() == '\r') request.remove_suffix(1);
      if (request == "TIME") {
        // counted before the reply so a client that has its answer sees the count
        served_.fetch_add(1);
        try {
          write_all(p.fd.get(), fmt::format("TIME {}\n", serve_time()));
        } catch (const NetError&) {
        }
      }
      p.fd.reset();
    }
    if (fds[1].revents & POLLIN) {
      UniqueFd conn(::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC));
      if (conn.valid()) pending.push_back({std::move(conn), {}, now});
    }
    std::erase_if(pending, [&](const Pending& p) {
      return !p.fd.valid() || now - p.accepted > std::chrono::seconds(5);
    });
  }
}

TimeProbe probe_time_server(const HostPort& server, const Clock& local,
                            Millis timeout) {
  TimeProbe probe;
  auto fd = connect_tcp(server, timeout);
  probe.send_local_ms = local.now_ms();
  write_all(fd.get(), "TIME\n");
  LineReader reader(fd.get());
  std::string line;
  if (reader.read_line(line, timeout) != LineReader::Status::kLine) {
    throw NetError(fmt::format("time server {}: no reply", server.to_string()));
  }
  probe.recv_local_ms = local.now_ms();
  const auto fields = split_fields(line);
  if (fields.size() != 2 || fields[0] != "TIME") {
    throw NetError(fmt::format("time server {}: bad reply '{}'", server.to_string(), line));
  }
  auto [ptr, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(),
                                   probe.server_time_ms);
  if (ec != std::errc()) {
    throw NetError(fmt::format("time server {}: bad timestamp", server.to_string()));
  }
  return probe;
}

ClockOffset synchronize(const HostPort& server, const Clock& local, int tester_id,
                        int probes, Millis timeout) {
  std::vector<TimeProbe> collected;
  std::string last_error;
  for (int i = 0; i < probes; ++i) {
    try {
      collected.push_back(probe_time_server(server, local, timeout));
    } catch (const NetError& e) {
      last_error = e.what();
    }
  }
  if (collected.empty()) throw NetError(last_error);
  return estimate_offset(collected, tester_id);
}

ResyncSchedule::ResyncSchedule(Millis interval) : interval_(interval) {
  if (interval_.count() <= 0) throw ValidationError("sync_interval", "must be > 0");
}

bool ResyncSchedule::due(std::int64_t now_local_ms) const {
  return !last_probe_ms_ || now_local_ms >= next_due_ms();
}

std::int64_t ResyncSchedule::next_due_ms() const {
  return last_probe_ms_ ? *last_probe_ms_ + interval_.count() : 0;
}

void OffsetHistory::add(const ClockOffset& offset) {
  auto& list = by_tester_[offset.tester_id];
  auto it = std::upper_bound(list.begin(), list.end(), offset.measured_at_local_ms,
                             [](std::int64_t t, const ClockOffset& o) {
                               return t < o.measured_at_local_ms;
                             });
  list.insert(it, offset);
}

const ClockOffset* OffsetHistory::lookup(int tester_id, std::int64_t local_ms) const {
  auto found = by_tester_.find(tester_id);
  if (found == by_tester_.end()) return nullptr;
  const auto& list = found->second;
  auto it = std::upper_bound(list.begin(), list.end(), local_ms,
                             [](std::int64_t t, const ClockOffset& o) {
                               return t < o.measured_at_local_ms;
                             });
  if (it == list.begin()) return nullptr;
  return &*std::prev(it);
}

const std::vector<ClockOffset>* OffsetHistory::offsets(int tester_id) const {
  auto found = by_tester_.find(tester_id);
  return found == by_tester_.end() ? nullptr : &found->second;
}

}  // namespace diperf
