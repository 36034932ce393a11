#pragma once

// Experiment orchestration: tester selection, code distribution, staggered
// launch, record collection, liveness tracking and persistence.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "diperf/model.h"
#include "diperf/timesync.h"
#include "diperf/transport.h"

namespace diperf {

struct ExperimentPlan {
  TestDescription description;
  std::vector<NodeEndpoint> candidates;
  Millis ramp_delay{25000};
  std::filesystem::path output_path;
  // Client executable shipped to every tester.
  std::filesystem::path client_payload;
  // Arguments appended to the staged payload path to form client_command.
  std::string client_args = "{target}";
  TransportConfig transport;
  // Command that starts a tester on a node (local backend default: this
  // executable's "tester" subcommand).
  std::vector<std::string> tester_command;
  Millis heartbeat{15000};
  Millis probe_timeout{10000};
  Millis ack_timeout{15000};
  // Drop a tester after this many consecutive failed invocations; 0 = never.
  int fail_after = 0;
  // Emit live CSV snapshots every this many seconds to live_out; 0 = off.
  std::int64_t live_quantum_s = 0;
  std::ostream* live_out = nullptr;
};

ExperimentPlan validate(const ExperimentPlan& plan);

enum class TesterState { kActive, kFailed, kFinished };

std::string_view to_string(TesterState state);

struct TesterEntry {
  int tester_id = 0;
  std::string node_id;
  TesterState state = TesterState::kActive;
  std::string reason;
  std::optional<std::int64_t> failure_time_ms;
  std::int64_t launch_time_ms = 0;
  std::int64_t records = 0;
  int consecutive_failures = 0;
  std::vector<ClockOffset> offsets;
};

// Tracks which testers may still report. Not internally synchronised.
class ReporterRegistry {
 public:
  void add(int tester_id, std::string node_id, std::int64_t launch_time_ms);
  // Active -> failed. Returns false (and changes nothing) for unknown or
  // already-closed testers.
  bool on_tester_failure(int tester_id, std::string reason, std::int64_t when_ms);
  bool mark_finished(int tester_id, std::string reason);
  bool accepts_records(int tester_id) const;
  TesterEntry* find(int tester_id);
  const TesterEntry* find(int tester_id) const;
  const std::map<int, TesterEntry>& entries() const { return entries_; }
  std::size_t count(TesterState state) const;

 private:
  std::map<int, TesterEntry> entries_;
};

struct LiveSnapshot {
  std::int64_t quantum_start_s = 0;
  std::int64_t completed = 0;
  double throughput_per_min = 0.0;
  std::int64_t load = 0;
  double mean_response_ms = 0.0;
};

// Rolling per-quantum view over the records received so far. Advisory: late
// records can still change earlier quanta.
class LiveView {
 public:
  explicit LiveView(std::int64_t quantum_s);
  void add(const InvocationRecord& global_record);
  LiveSnapshot snapshot(std::int64_t quantum_start_s) const;
  std::int64_t quantum_s() const { return quantum_s_; }
  static std::string csv_header();
  static std::string csv_row(const LiveSnapshot& snapshot);

 private:
  struct Bucket {
    std::int64_t completed = 0;
    std::int64_t response_sum_ms = 0;
  };
  std::int64_t quantum_s_;
  mutable std::mutex mutex_;
  std::map<std::int64_t, Bucket> buckets_;
  std::vector<std::pair<std::int64_t, std::int64_t>> intervals_;
};

struct ExperimentSummary {
  std::vector<TesterEntry> testers;
  std::vector<DeploymentReport> deployments;
  std::size_t candidates = 0;
  std::size_t available = 0;
  std::int64_t started_ms = 0;
  std::int64_t finished_ms = 0;
  std::int64_t records_persisted = 0;
  std::int64_t records_discarded = 0;

  std::int64_t span_ms() const { return finished_ms - started_ms; }
  std::string to_text() const;
};

// Runs the whole experiment. Throws Error when no tester can be started.
ExperimentSummary run_experiment(const ExperimentPlan& plan);

}  // namespace diperf
