#pragma once

// Offline metric pipeline: map records to global time, then compute response
// time, throughput, offered load, per-client utilization and fairness, and
// fit moving-average and polynomial trends.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "diperf/model.h"
#include "diperf/timesync.h"

namespace diperf {

struct GlobalRecord {
  int tester_id = 0;
  std::int64_t sequence = 0;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  Outcome outcome = Outcome::kSuccess;
  // Success records only.
  std::optional<std::int64_t> response_ms;

  bool operator==(const GlobalRecord&) const = default;
};

struct NormalizeOptions {
  // Legs of network latency removed from a request: 2 = request + reply.
  int latency_legs = 2;
};

struct NormalizeDiagnostics {
  std::size_t missing_offset = 0;
  std::size_t clamped_response = 0;
};

struct NormalizedRecords {
  std::vector<GlobalRecord> records;
  NormalizeDiagnostics diagnostics;
};

NormalizedRecords normalize(std::span<const InvocationRecord> records,
                            const OffsetHistory& offsets,
                            const NormalizeOptions& options = {});

// Success count per quantum, keyed by completion time. Zero-valued quanta
// between the first and last completion are included.
MetricSeries throughput_series(std::span<const GlobalRecord> records,
                               std::int64_t quantum_s = 60);

// Requests in flight (any outcome) at each quantum instant t:
// start <= t < end.
MetricSeries load_series(std::span<const GlobalRecord> records, std::int64_t quantum_s = 1);

// Mean response time of successes completing in each quantum; empty quanta
// are omitted.
MetricSeries response_series(std::span<const GlobalRecord> records,
                             std::int64_t quantum_s = 60);

// Closed interval of global milliseconds.
struct TimeWindow {
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;

  bool contains(std::int64_t t) const { return start_ms <= t && t <= end_ms; }
  bool operator==(const TimeWindow&) const = default;
};

// Active window of every tester: first start to last end over all its records.
std::vector<std::pair<int, TimeWindow>> active_windows(std::span<const GlobalRecord> records);

// Longest interval during which the number of active testers is at its
// maximum (earliest on ties).
std::optional<TimeWindow> detect_peak_window(std::span<const GlobalRecord> records);

// Per tester, over its active window intersected with the peak window:
//   jobs = own successes completed there,
//   utilization = jobs / successes of all testers completed there,
//   fairness = jobs / utilization.
std::vector<ClientStats> client_stats(std::span<const GlobalRecord> records,
                                      std::optional<TimeWindow> peak_window = std::nullopt);

struct MovingAverageModel {
  std::int64_t window_s = 160;
};

struct PolynomialModel {
  int degree = 0;
  // Ascending powers of normalized time x = (t - origin_s) / span_s.
  std::vector<double> coefficients;
  double origin_s = 0.0;
  double span_s = 1.0;
  double rms_residual = 0.0;

  double evaluate(double t_s) const;
};

using FitModel = std::variant<MovingAverageModel, PolynomialModel>;

struct SmoothedSeries {
  MovingAverageModel model;
  MetricSeries series;
};

// Each output point is the mean of the input points in the trailing window
// (t - window, t].
SmoothedSeries moving_average(const MetricSeries& series, std::int64_t window_s = 160);

// Least squares over time normalized to [0, 1]. Throws Error with fewer than
// degree + 1 points.
PolynomialModel polyfit(const MetricSeries& series, int degree = 6);

struct CapacityPoint {
  double load = 0.0;
  // Completions per second.
  double throughput = 0.0;
};

struct SaturationEstimate {
  bool saturated = false;
  double capacity = 0.0;
  std::vector<CapacityPoint> curve;
};

// Knee of the (load, throughput) curve obtained by joining both series on
// time and averaging throughput per integer load level: the smallest load
// from which the gain per added unit of load, taken to the mean of all higher
// levels, is below `gain_threshold` of the initial per-client throughput.
SaturationEstimate saturation_estimate(const MetricSeries& throughput,
                                       const MetricSeries& load,
                                       double gain_threshold = 0.05);

struct FailureEvent {
  int tester_id = 0;
  std::int64_t time_ms = 0;
  std::string reason;
};

// Contents of a record file: global-time records (offset history is the
// identity) and controller failure notices.
struct RecordSet {
  std::vector<InvocationRecord> records;
  OffsetHistory offsets;
  std::vector<FailureEvent> failures;
};

RecordSet read_records(std::istream& in);
RecordSet load_record_file(const std::filesystem::path& path);

}  // namespace diperf
