#pragma once

// The per-node agent: runs the client executable in a paced loop, times and
// classifies each invocation, keeps its clock offset fresh and streams
// records to the controller.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "diperf/clock.h"
#include "diperf/model.h"
#include "diperf/net.h"
#include "diperf/timesync.h"
#include "diperf/transport.h"

namespace diperf {

struct TesterOptions {
  int tester_id = 1;
  Millis heartbeat{15000};
  // Scheduling tolerance used when checking the pacing invariant.
  Millis pacing_slack{50};
  // Calibrated client-code cost attached to every record (absent if unknown).
  std::optional<std::int64_t> client_overhead_ms;
  int time_probes = kProbesPerSync;
  int latency_probes = 3;
  Millis network_timeout{2000};
  int initial_sync_attempts = 3;
  // When > 0 and no overhead is given, calibrate it against a no-op target
  // with this many runs before the session starts.
  int calibrate_runs = 0;
};

struct InvocationResult {
  InvocationRecord record;
  // True when the stop signal fired mid-run; such a record must not be emitted.
  bool interrupted = false;
};

// Spawns argv, waits at most `timeout` on the local clock, classifies:
//   exit 0 -> Success, nonzero -> ServiceError, killed -> Timeout,
//   could not spawn -> StartFailure.
InvocationResult invoke_client(const std::vector<std::string>& argv, Millis timeout,
                               const Clock& clock, const StopSignal* stop = nullptr);
InvocationResult invoke_client(std::string_view command, Millis timeout,
                               const Clock& clock, const StopSignal* stop = nullptr);

// Replaces every "{target}" in the command with the target address.
std::string expand_client_command(std::string_view command, std::string_view target);

// Establishes one TCP connection; throws NetError on failure.
using Connector = std::function<void(const HostPort&, Millis)>;
void tcp_connect_once(const HostPort& target, Millis timeout);

// Half the minimum TCP connect round trip over `attempts`; nullopt when no
// attempt succeeded.
std::optional<std::int64_t> probe_target_latency(const HostPort& target, int attempts = 3,
                                                 Millis timeout = Millis(2000),
                                                 const Connector& connect = tcp_connect_once);

using RecordSink = std::function<void(const InvocationRecord&, const ClockOffset&)>;

class TesterSession {
 public:
  enum class EndReason { kDeadline, kStopped, kTimeSyncFailed };

  TesterSession(TestDescription description, TesterOptions options, const Clock& clock,
                RecordSink sink, const StopSignal& stop);

  EndReason run();

  const std::vector<ClockOffset>& offsets() const { return offsets_; }
  std::int64_t records_emitted() const { return next_sequence_ - 1; }
  std::optional<std::int64_t> target_latency_ms() const { return target_latency_ms_; }

 private:
  bool resync(bool initial);

  TestDescription description_;
  TesterOptions options_;
  const Clock& clock_;
  RecordSink sink_;
  const StopSignal& stop_;
  std::vector<std::string> argv_;
  std::optional<HostPort> timeserver_;
  std::optional<HostPort> target_;
  ResyncSchedule schedule_;
  ClockOffset current_offset_;
  std::vector<ClockOffset> offsets_;
  std::optional<std::int64_t> target_latency_ms_;
  std::int64_t next_sequence_ = 1;
};

std::string_view to_string(TesterSession::EndReason reason);

// Serves one controller over a control channel: waits for START, ACKs, runs
// the session, answers PING, honours STOP, and stops on disconnect (end of
// stream or two missed heartbeats). Returns a process exit code.
int run_tester_channel(LineChannel& channel, const TesterOptions& options,
                       const Clock& clock);

// Standalone run writing global-time record lines to `out`.
int run_tester_offline(const TestDescription& description, const TesterOptions& options,
                       const Clock& clock, std::ostream& out);

// Runs the client `runs` times against a built-in no-op target and returns
// the median duration in milliseconds.
std::optional<std::int64_t> calibrate_overhead(std::string_view client_command, int runs,
                                               Millis timeout, const Clock& clock);

}  // namespace diperf
