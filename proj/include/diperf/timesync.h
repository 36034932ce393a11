#pragma once

// Central time-stamp server and the client-side offset estimator that maps a
// tester's local clock onto the server's (global) clock.

#include <atomic>
#include <cstdint>
#include <map>
#include <span>
#include <thread>
#include <vector>

#include "diperf/clock.h"
#include "diperf/model.h"
#include "diperf/net.h"

namespace diperf {

struct TimeProbe {
  std::int64_t send_local_ms = 0;
  std::int64_t server_time_ms = 0;
  std::int64_t recv_local_ms = 0;

  std::int64_t round_trip_ms() const { return recv_local_ms - send_local_ms; }
};

// Probes a server should receive per resynchronisation.
inline constexpr int kProbesPerSync = 5;

// Midpoint estimate from the minimum round-trip probe:
//   offset = server_time - (send + recv) / 2, uncertainty = rtt / 2.
// Throws Error on an empty list or a probe with recv < send.
ClockOffset estimate_offset(std::span<const TimeProbe> probes, int tester_id = 0);

inline std::int64_t to_global(std::int64_t local_ms, const ClockOffset& offset) {
  return local_ms + offset.offset_ms;
}

// Answers "TIME\n" with "TIME <server_ms>\n" and closes the connection.
class TimeServer {
 public:
  explicit TimeServer(const Clock& clock) : clock_(clock) {}
  ~TimeServer();
  TimeServer(const TimeServer&) = delete;
  TimeServer& operator=(const TimeServer&) = delete;

  void start(const HostPort& listen);
  void stop();
  HostPort address() const { return address_; }
  std::int64_t serve_time() const { return clock_.now_ms(); }
  std::uint64_t requests_served() const { return served_.load(); }

 private:
  void loop();

  const Clock& clock_;
  TcpListener listener_;
  HostPort address_;
  StopSignal stop_;
  std::thread thread_;
  std::atomic<std::uint64_t> served_{0};
};

// One round trip to the time server. Throws NetError on failure.
TimeProbe probe_time_server(const HostPort& server, const Clock& local,
                            Millis timeout);

// Runs `probes` round trips and estimates the offset from them.
ClockOffset synchronize(const HostPort& server, const Clock& local, int tester_id,
                        int probes = kProbesPerSync, Millis timeout = Millis(2000));

// When the next clock resynchronisation is due. Probing happens only between
// client invocations, so a probe may run late by up to one invocation.
class ResyncSchedule {
 public:
  explicit ResyncSchedule(Millis interval);
  bool due(std::int64_t now_local_ms) const;
  void mark(std::int64_t probe_local_ms) { last_probe_ms_ = probe_local_ms; }
  std::int64_t next_due_ms() const;
  bool has_probed() const { return last_probe_ms_.has_value(); }

 private:
  Millis interval_;
  std::optional<std::int64_t> last_probe_ms_;
};

// Per-tester offset timeline. lookup() returns the most recent offset whose
// measured_at_local_ms is at or before the given local time.
class OffsetHistory {
 public:
  void add(const ClockOffset& offset);
  const ClockOffset* lookup(int tester_id, std::int64_t local_ms) const;
  const std::vector<ClockOffset>* offsets(int tester_id) const;
  bool empty() const { return by_tester_.empty(); }

 private:
  std::map<int, std::vector<ClockOffset>> by_tester_;
};

}  // namespace diperf
