#pragma once

// Shared vocabulary: test plans, invocation records, clock offsets, series.

#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace diperf {

using Millis = std::chrono::milliseconds;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by validate(); field() names the first offending field.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// What the controller hands each tester when it starts it.
struct TestDescription {
  Millis experiment_duration{0};
  Millis invocation_interval{1000};
  Millis sync_interval{300000};
  // Command line run per invocation; "{target}" is replaced by target_address.
  std::string client_command;
  std::string target_address;
  // Empty means "no time server": the local clock is taken as global time.
  std::string timeserver_address;
  Millis client_timeout{120000};
  std::optional<double> max_invocation_rate;

  bool operator==(const TestDescription&) const = default;
};

TestDescription validate(const TestDescription& description);

std::string to_json(const TestDescription& description);
TestDescription description_from_json(std::string_view json);

enum class Outcome { kSuccess, kTimeout, kStartFailure, kServiceError };

std::string_view to_string(Outcome outcome);
Outcome parse_outcome(std::string_view text);

struct InvocationRecord {
  int tester_id = 0;
  std::int64_t sequence = 0;
  std::int64_t start_local_ms = 0;
  std::int64_t end_local_ms = 0;
  Outcome outcome = Outcome::kSuccess;
  std::optional<std::int64_t> latency_ms;
  std::optional<std::int64_t> overhead_ms;

  std::int64_t duration_ms() const { return end_local_ms - start_local_ms; }
  bool operator==(const InvocationRecord&) const = default;
};

// Additive correction from a tester's local clock to global time.
struct ClockOffset {
  int tester_id = 0;
  std::int64_t offset_ms = 0;
  std::int64_t uncertainty_ms = 0;
  std::int64_t measured_at_local_ms = 0;

  bool operator==(const ClockOffset&) const = default;
};

struct SeriesPoint {
  std::int64_t quantum_start_s = 0;
  double value = 0.0;

  bool operator==(const SeriesPoint&) const = default;
};

struct MetricSeries {
  std::int64_t quantum_s = 1;
  std::vector<SeriesPoint> points;

  bool empty() const { return points.empty(); }
  bool operator==(const MetricSeries&) const = default;
};

// Exact rational so that fairness * utilization == jobs holds without rounding.
struct Ratio {
  std::int64_t numerator = 0;
  std::int64_t denominator = 1;

  double value() const {
    return denominator == 0 ? 0.0
                            : static_cast<double>(numerator) /
                                  static_cast<double>(denominator);
  }
  bool operator==(const Ratio&) const = default;
};

struct ClientStats {
  int tester_id = 0;
  std::int64_t jobs_completed = 0;
  std::int64_t active_start_ms = 0;
  std::int64_t active_end_ms = 0;
  Ratio utilization;
  // Absent when the client completed no jobs in its window.
  std::optional<std::int64_t> fairness;

  bool operator==(const ClientStats&) const = default;
};

// Record file / wire line codec.
//   REC <tester_id> <sequence> <start_ms> <end_ms> <outcome> <latency|-> <overhead|->
std::string format_record(const InvocationRecord& record);
InvocationRecord parse_record(std::string_view line);

// Tester -> controller form: the record line with "OFF <offset> <uncertainty>"
// appended. Timestamps are on the tester's local clock.
std::string format_wire_record(const InvocationRecord& record,
                               const ClockOffset& offset);
struct WireRecord {
  InvocationRecord record;
  ClockOffset offset;
};
WireRecord parse_wire_record(std::string_view line);

// Whitespace tokenizer used by every line protocol in the project.
std::vector<std::string_view> split_fields(std::string_view line);

}  // namespace diperf
