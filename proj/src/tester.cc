#include "diperf/tester.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "diperf/mock_target.h"
#include "diperf/process.h"

namespace diperf {

InvocationResult invoke_client(const std::vector<std::string>& argv, Millis timeout,
                               const Clock& clock, const StopSignal* stop) {
  InvocationResult result;
  auto& record = result.record;
  record.start_local_ms = clock.now_ms();
  ChildProcess child;
  try {
    child = ChildProcess::spawn(argv);
  } catch (const Error& e) {
    spdlog::debug("client failed to start: {}", e.what());
    record.end_local_ms = clock.now_ms();
    record.outcome = Outcome::kStartFailure;
    return result;
  }
  for (;;) {
    const auto elapsed = clock.now_ms() - record.start_local_ms;
    const auto left = Millis(std::max<std::int64_t>(0, timeout.count() - elapsed));
    auto status = left.count() > 0 ? child.wait_for(left, stop) : child.wait_for(Millis(0));
    if (status) {
      record.end_local_ms = clock.now_ms();
      record.outcome = *status == 0 ? Outcome::kSuccess : Outcome::kServiceError;
      return result;
    }
    if (stop && stop->raised()) {
      child.kill();
      record.end_local_ms = clock.now_ms();
      result.interrupted = true;
      return result;
    }
    if (clock.now_ms() - record.start_local_ms >= timeout.count()) {
      child.kill();
      record.end_local_ms = clock.now_ms();
      record.outcome = Outcome::kTimeout;
      return result;
    }
  }
}

InvocationResult invoke_client(std::string_view command, Millis timeout,
                               const Clock& clock, const StopSignal* stop) {
  std::vector<std::string> argv;
  try {
    argv = split_command(command);
  } catch (const ParseError&) {
  }
  return invoke_client(argv, timeout, clock, stop);
}

std::string expand_client_command(std::string_view command, std::string_view target) {
  constexpr std::string_view kPlaceholder = "{target}";
  std::string out;
  std::size_t pos = 0;
  for (;;) {
    auto hit = command.find(kPlaceholder, pos);
    out.append(command.substr(pos, hit - pos));
    if (hit == std::string_view::npos) break;
    out.append(target);
    pos = hit + kPlaceholder.size();
  }
  return out;
}

void tcp_connect_once(const HostPort& target, Millis timeout) {
  connect_tcp(target, timeout);
}

std::optional<std::int64_t> probe_target_latency(const HostPort& target, int attempts,
                                                 Millis timeout, const Connector& connect) {
  std::optional<std::int64_t> best_rtt;
  for (int i = 0; i < attempts; ++i) {
    const auto began = std::chrono::steady_clock::now();
    try {
      connect(target, timeout);
    } catch (const Error& e) {
      spdlog::debug("latency probe {}: {}", target.to_string(), e.what());
      continue;
    }
    const auto rtt = std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::steady_clock::now() - began)
                         .count();
    if (!best_rtt || rtt < *best_rtt) best_rtt = rtt;
  }
  if (!best_rtt) return std::nullopt;
  // Half the round trip, rounded to the nearest millisecond.
  return (*best_rtt + 1000) / 2000;
}

std::string_view to_string(TesterSession::EndReason reason) {
  switch (reason) {
    case TesterSession::EndReason::kDeadline:
      return "done";
    case TesterSession::EndReason::kStopped:
      return "stopped";
    case TesterSession::EndReason::kTimeSyncFailed:
      return "timesync-unavailable";
  }
  return "?";
}

TesterSession::TesterSession(TestDescription description, TesterOptions options,
                             const Clock& clock, RecordSink sink, const StopSignal& stop)
    : description_(validate(description)),
      options_(std::move(options)),
      clock_(clock),
      sink_(std::move(sink)),
      stop_(stop),
      schedule_(description_.sync_interval) {
  argv_ = split_command(
      expand_client_command(description_.client_command, description_.target_address));
  if (!description_.timeserver_address.empty()) {
    timeserver_ = HostPort::parse(description_.timeserver_address);
  }
  if (!description_.target_address.empty()) {
    try {
      target_ = HostPort::parse(description_.target_address);
    } catch (const ParseError&) {
      spdlog::warn("target '{}' is not host:port; latency will not be probed",
                   description_.target_address);
    }
  }
}

bool TesterSession::resync(bool initial) {
  const auto now = clock_.now_ms();
  schedule_.mark(now);
  if (target_) {
    target_latency_ms_ = probe_target_latency(*target_, options_.latency_probes,
                                              options_.network_timeout);
  }
  if (!timeserver_) {
    current_offset_ = ClockOffset{options_.tester_id, 0, 0, now};
    offsets_.push_back(current_offset_);
    return true;
  }
  const int attempts = initial ? std::max(1, options_.initial_sync_attempts) : 1;
  for (int i = 0; i < attempts; ++i) {
    try {
      current_offset_ = synchronize(*timeserver_, clock_, options_.tester_id,
                                    options_.time_probes, options_.network_timeout);
      offsets_.push_back(current_offset_);
      return true;
    } catch (const NetError& e) {
      spdlog::warn("tester {}: clock sync failed: {}", options_.tester_id, e.what());
    }
    if (i + 1 < attempts && !sleep_for(Millis(1000), &stop_)) return false;
  }
  // A failed resync keeps the previous offset.
  return !initial;
}

TesterSession::EndReason TesterSession::run() {
  const auto session_start = clock_.now_ms();
  const auto deadline = session_start + description_.experiment_duration.count();
  if (!resync(true)) {
    return stop_.raised() ? EndReason::kStopped : EndReason::kTimeSyncFailed;
  }
  std::int64_t min_spacing_ms = 0;
  if (description_.max_invocation_rate) {
    min_spacing_ms =
        static_cast<std::int64_t>(std::ceil(1000.0 / *description_.max_invocation_rate));
  }
  std::int64_t next_start = clock_.now_ms();
  for (;;) {
    if (stop_.raised()) return EndReason::kStopped;
    auto now = clock_.now_ms();
    if (now >= deadline) return EndReason::kDeadline;
    if (schedule_.due(now)) {
      resync(false);
      continue;
    }
    if (now < next_start) {
      const auto wake = std::min({next_start, deadline, schedule_.next_due_ms()});
      if (!sleep_for(Millis(wake - now), &stop_)) return EndReason::kStopped;
      continue;
    }
    auto result = invoke_client(argv_, description_.client_timeout, clock_, &stop_);
    if (result.interrupted) return EndReason::kStopped;
    auto& record = result.record;
    record.tester_id = options_.tester_id;
    record.sequence = next_sequence_++;
    record.latency_ms = target_latency_ms_;
    record.overhead_ms = options_.client_overhead_ms;
    sink_(record, current_offset_);
    next_start = record.start_local_ms +
                 std::max(description_.invocation_interval.count(), min_spacing_ms);
  }
}

int run_tester_channel(LineChannel& channel, const TesterOptions& options,
                       const Clock& clock) {
  const Millis watchdog = options.heartbeat * 2;
  std::string line;
  std::optional<TestDescription> description;
  while (!description) {
    switch (channel.receive(line, watchdog)) {
      case LineReader::Status::kLine:
        break;
      case LineReader::Status::kTimeout:
      case LineReader::Status::kClosed:
      case LineReader::Status::kStopped:
        spdlog::warn("tester {}: no START from controller", options.tester_id);
        return 3;
    }
    if (line == protocol::kPing) {
      channel.send(protocol::kPong);
      continue;
    }
    if (line == protocol::kStop) return 0;
    try {
      description = validate(protocol::decode_start(line));
    } catch (const Error& e) {
      channel.send(fmt::format("BYE bad-start {}", e.what()));
      return 2;
    }
  }
  TesterOptions session_options = options;
  if (options.calibrate_runs > 0 && !options.client_overhead_ms) {
    session_options.client_overhead_ms = calibrate_overhead(
        description->client_command, options.calibrate_runs, description->client_timeout, clock);
  }
  channel.send(protocol::kAck);

  StopSignal stop;
  StopSignal reader_done;
  std::atomic<bool> disconnected{false};
  std::atomic<bool> stopped{false};
  std::thread reader([&] {
    std::string msg;
    for (;;) {
      auto status = channel.receive(msg, watchdog, &reader_done);
      if (status == LineReader::Status::kStopped) return;
      if (status != LineReader::Status::kLine) {
        spdlog::warn("tester {}: controller {}", options.tester_id,
                     status == LineReader::Status::kTimeout ? "missed heartbeats"
                                                            : "closed the channel");
        disconnected = true;
        stop.raise();
        return;
      }
      if (msg == protocol::kPing) {
        if (!channel.send(protocol::kPong)) {
          disconnected = true;
          stop.raise();
          return;
        }
      } else if (msg == protocol::kStop) {
        stopped = true;
        stop.raise();
      }
    }
  });

  TesterSession session(
      *description, session_options, clock,
      [&](const InvocationRecord& record, const ClockOffset& offset) {
        if (!channel.send(format_wire_record(record, offset))) {
          disconnected = true;
          stop.raise();
        }
      },
      stop);
  const auto reason = session.run();
  // The controller may close right after BYE; stop the reader first so that
  // close is not mistaken for a disconnect.
  reader_done.raise();
  reader.join();
  if (!disconnected) {
    channel.send(fmt::format("BYE {}", stopped ? "stopped" : to_string(reason)));
  }
  channel.close(Millis(0));
  spdlog::info("tester {}: session ended ({}), {} records", options.tester_id,
               disconnected ? "disconnected" : to_string(reason),
               session.records_emitted());
  if (disconnected) return 3;
  return reason == TesterSession::EndReason::kTimeSyncFailed ? 4 : 0;
}

int run_tester_offline(const TestDescription& description, const TesterOptions& options,
                       const Clock& clock, std::ostream& out) {
  StopSignal stop;
  TesterOptions session_options = options;
  if (options.calibrate_runs > 0 && !options.client_overhead_ms) {
    session_options.client_overhead_ms = calibrate_overhead(
        description.client_command, options.calibrate_runs, description.client_timeout, clock);
  }
  TesterSession session(
      description, session_options, clock,
      [&](const InvocationRecord& record, const ClockOffset& offset) {
        InvocationRecord global = record;
        global.start_local_ms = to_global(record.start_local_ms, offset);
        global.end_local_ms = to_global(record.end_local_ms, offset);
        out << format_record(global) << '\n';
        out.flush();
      },
      stop);
  const auto reason = session.run();
  return reason == TesterSession::EndReason::kTimeSyncFailed ? 4 : 0;
}

std::optional<std::int64_t> calibrate_overhead(std::string_view client_command, int runs,
                                               Millis timeout, const Clock& clock) {
  if (runs <= 0) return std::nullopt;
  NoopTarget target;
  const auto argv =
      split_command(expand_client_command(client_command, target.address().to_string()));
  std::vector<std::int64_t> durations;
  for (int i = 0; i < runs; ++i) {
    auto result = invoke_client(argv, timeout, clock);
    if (result.record.outcome == Outcome::kSuccess) {
      durations.push_back(result.record.duration_ms());
    }
  }
  if (durations.empty()) return std::nullopt;
  std::sort(durations.begin(), durations.end());
  const auto mid = durations.size() / 2;
  return durations.size() % 2 == 1 ? durations[mid]
                                   : (durations[mid - 1] + durations[mid]) / 2;
}

}  // namespace diperf
