#include "diperf/model.h"

#include <charconv>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace diperf {

ValidationError::ValidationError(std::string field, const std::string& message)
    : Error(fmt::format("invalid {}: {}", field, message)),
      field_(std::move(field)) {}

TestDescription validate(const TestDescription& d) {
  if (d.experiment_duration.count() <= 0) {
    throw ValidationError("experiment_duration", "must be > 0");
  }
  if (d.invocation_interval.count() < 0) {
    throw ValidationError("invocation_interval", "must be >= 0");
  }
  if (d.sync_interval.count() <= 0) {
    throw ValidationError("sync_interval", "must be > 0");
  }
  if (d.client_command.empty()) {
    throw ValidationError("client_command", "must not be empty");
  }
  if (d.client_timeout.count() <= 0) {
    throw ValidationError("client_timeout", "must be > 0");
  }
  if (d.max_invocation_rate &&
      !(std::isfinite(*d.max_invocation_rate) && *d.max_invocation_rate > 0)) {
    throw ValidationError("max_invocation_rate", "must be > 0 when set");
  }
  return d;
}

std::string to_json(const TestDescription& d) {
  nlohmann::json j = {
      {"experiment_duration_ms", d.experiment_duration.count()},
      {"invocation_interval_ms", d.invocation_interval.count()},
      {"sync_interval_ms", d.sync_interval.count()},
      {"client_command", d.client_command},
      {"target_address", d.target_address},
      {"timeserver_address", d.timeserver_address},
      {"client_timeout_ms", d.client_timeout.count()},
  };
  if (d.max_invocation_rate) {
    j["max_invocation_rate"] = *d.max_invocation_rate;
  } else {
    j["max_invocation_rate"] = nullptr;
  }
  return j.dump();
}

TestDescription description_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TestDescription d;
    d.experiment_duration = Millis(j.at("experiment_duration_ms").get<std::int64_t>());
    d.invocation_interval = Millis(j.at("invocation_interval_ms").get<std::int64_t>());
    d.sync_interval = Millis(j.at("sync_interval_ms").get<std::int64_t>());
    d.client_command = j.at("client_command").get<std::string>();
    d.target_address = j.value("target_address", "");
    d.timeserver_address = j.value("timeserver_address", "");
    d.client_timeout = Millis(j.at("client_timeout_ms").get<std::int64_t>());
    if (j.contains("max_invocation_rate") && !j["max_invocation_rate"].is_null()) {
      d.max_invocation_rate = j["max_invocation_rate"].get<double>();
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("bad test description: {}", e.what()));
  }
}

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::kSuccess:
      return "OK";
    case Outcome::kTimeout:
      return "TIMEOUT";
    case Outcome::kStartFailure:
      return "STARTFAIL";
    case Outcome::kServiceError:
      return "SVCERR";
  }
  return "?";
}

Outcome parse_outcome(std::string_view text) {
  if (text == "OK") return Outcome::kSuccess;
  if (text == "TIMEOUT") return Outcome::kTimeout;
  if (text == "STARTFAIL") return Outcome::kStartFailure;
  if (text == "SVCERR") return Outcome::kServiceError;
  throw ParseError(fmt::format("unknown outcome '{}'", text));
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t' ||
                                 line[pos] == '\r' || line[pos] == '\n')) {
      ++pos;
    }
    if (pos >= line.size()) break;
    std::size_t end = pos;
    while (end < line.size() && line[end] != ' ' && line[end] != '\t' &&
           line[end] != '\r' && line[end] != '\n') {
      ++end;
    }
    fields.push_back(line.substr(pos, end - pos));
    pos = end;
  }
  return fields;
}

namespace {

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto* begin = text.data();
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(fmt::format("bad {} '{}'", what, text));
  }
  return value;
}

std::optional<std::int64_t> parse_optional(std::string_view text,
                                           std::string_view what) {
  if (text == "-") return std::nullopt;
  return parse_number<std::int64_t>(text, what);
}

std::string format_optional(const std::optional<std::int64_t>& value) {
  return value ? std::to_string(*value) : std::string("-");
}

InvocationRecord record_from_fields(const std::vector<std::string_view>& f) {
  InvocationRecord r;
  r.tester_id = parse_number<int>(f[1], "tester_id");
  r.sequence = parse_number<std::int64_t>(f[2], "sequence");
  r.start_local_ms = parse_number<std::int64_t>(f[3], "start");
  r.end_local_ms = parse_number<std::int64_t>(f[4], "end");
  r.outcome = parse_outcome(f[5]);
  r.latency_ms = parse_optional(f[6], "latency");
  r.overhead_ms = parse_optional(f[7], "overhead");
  if (r.end_local_ms < r.start_local_ms) {
    throw ParseError("record ends before it starts");
  }
  return r;
}

}  // namespace

std::string format_record(const InvocationRecord& r) {
  return fmt::format("REC {} {} {} {} {} {} {}", r.tester_id, r.sequence,
                     r.start_local_ms, r.end_local_ms, to_string(r.outcome),
                     format_optional(r.latency_ms),
                     format_optional(r.overhead_ms));
}

InvocationRecord parse_record(std::string_view line) {
  const auto f = split_fields(line);
  if (f.size() != 8 || f[0] != "REC") {
    throw ParseError(fmt::format("malformed record line '{}'", line));
  }
  return record_from_fields(f);
}

std::string format_wire_record(const InvocationRecord& record,
                               const ClockOffset& offset) {
  return fmt::format("{} OFF {} {}", format_record(record), offset.offset_ms,
                     offset.uncertainty_ms);
}

WireRecord parse_wire_record(std::string_view line) {
  const auto f = split_fields(line);
  if (f.size() != 11 || f[0] != "REC" || f[8] != "OFF") {
    throw ParseError(fmt::format("malformed wire record '{}'", line));
  }
  WireRecord w;
  w.record = record_from_fields(f);
  w.offset.tester_id = w.record.tester_id;
  w.offset.offset_ms = parse_number<std::int64_t>(f[9], "offset");
  w.offset.uncertainty_ms = parse_number<std::int64_t>(f[10], "uncertainty");
  w.offset.measured_at_local_ms = w.record.start_local_ms;
  return w;
}

}  // namespace diperf
