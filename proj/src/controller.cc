#include "diperf/controller.h"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <fstream>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "diperf/clock.h"
#include "diperf/process.h"

namespace diperf {

namespace {

using SteadyClock = std::chrono::steady_clock;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

ExperimentPlan validate(const ExperimentPlan& plan) {
  ExperimentPlan out = plan;
  if (out.description.client_command.empty()) {
    // The client command is derived from the payload at launch time.
    out.description.client_command = "placeholder";
    validate(out.description);
    out.description.client_command.clear();
  } else {
    validate(out.description);
  }
  if (out.ramp_delay.count() < 0) throw ValidationError("ramp_delay", "must be >= 0");
  if (out.candidates.empty()) throw ValidationError("candidates", "need at least one node");
  if (out.client_payload.empty()) throw ValidationError("client", "payload is required");
  if (out.output_path.empty()) throw ValidationError("out", "output path is required");
  if (out.heartbeat.count() <= 0) throw ValidationError("heartbeat", "must be > 0");
  if (out.fail_after < 0) throw ValidationError("fail_after", "must be >= 0");
  if (out.live_quantum_s < 0) throw ValidationError("live_quantum", "must be >= 0");
  return out;
}

std::string_view to_string(TesterState state) {
  switch (state) {
    case TesterState::kActive:
      return "active";
    case TesterState::kFailed:
      return "failed";
    case TesterState::kFinished:
      return "finished";
  }
  return "?";
}

void ReporterRegistry::add(int tester_id, std::string node_id, std::int64_t launch_time_ms) {
  TesterEntry entry;
  entry.tester_id = tester_id;
  entry.node_id = std::move(node_id);
  entry.launch_time_ms = launch_time_ms;
  entries_[tester_id] = std::move(entry);
}

bool ReporterRegistry::on_tester_failure(int tester_id, std::string reason,
                                         std::int64_t when_ms) {
  auto* entry = find(tester_id);
  if (entry == nullptr) {
    spdlog::warn("failure notice for unknown tester {} ignored", tester_id);
    return false;
  }
  if (entry->state != TesterState::kActive) return false;
  entry->state = TesterState::kFailed;
  entry->reason = std::move(reason);
  entry->failure_time_ms = when_ms;
  return true;
}

bool ReporterRegistry::mark_finished(int tester_id, std::string reason) {
  auto* entry = find(tester_id);
  if (entry == nullptr || entry->state != TesterState::kActive) return false;
  entry->state = TesterState::kFinished;
  entry->reason = std::move(reason);
  return true;
}

bool ReporterRegistry::accepts_records(int tester_id) const {
  const auto* entry = find(tester_id);
  return entry != nullptr && entry->state == TesterState::kActive;
}

TesterEntry* ReporterRegistry::find(int tester_id) {
  auto it = entries_.find(tester_id);
  return it == entries_.end() ? nullptr : &it->second;
}

const TesterEntry* ReporterRegistry::find(int tester_id) const {
  auto it = entries_.find(tester_id);
  return it == entries_.end() ? nullptr : &it->second;
}

std::size_t ReporterRegistry::count(TesterState state) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(),
      [state](const auto& kv) { return kv.second.state == state; }));
}

LiveView::LiveView(std::int64_t quantum_s) : quantum_s_(quantum_s) {
  if (quantum_s_ <= 0) throw ValidationError("quantum", "must be > 0");
}

void LiveView::add(const InvocationRecord& r) {
  std::lock_guard lock(mutex_);
  intervals_.emplace_back(r.start_local_ms, r.end_local_ms);
  if (r.outcome != Outcome::kSuccess) return;
  const auto q = floor_div(r.end_local_ms, quantum_s_ * 1000) * quantum_s_;
  auto& bucket = buckets_[q];
  ++bucket.completed;
  std::int64_t response = r.duration_ms() - 2 * r.latency_ms.value_or(0) -
                          r.overhead_ms.value_or(0);
  bucket.response_sum_ms += std::max<std::int64_t>(0, response);
}

LiveSnapshot LiveView::snapshot(std::int64_t quantum_start_s) const {
  std::lock_guard lock(mutex_);
  LiveSnapshot s;
  s.quantum_start_s = quantum_start_s;
  if (auto it = buckets_.find(quantum_start_s); it != buckets_.end()) {
    s.completed = it->second.completed;
    s.mean_response_ms = static_cast<double>(it->second.response_sum_ms) /
                         static_cast<double>(it->second.completed);
  }
  s.throughput_per_min =
      static_cast<double>(s.completed) * 60.0 / static_cast<double>(quantum_s_);
  const auto t = quantum_start_s * 1000;
  for (const auto& [start, end] : intervals_) {
    if (start <= t && t < end) ++s.load;
  }
  return s;
}

std::string LiveView::csv_header() {
  return "time,completed,throughput_per_min,load,mean_response_ms";
}

std::string LiveView::csv_row(const LiveSnapshot& s) {
  return fmt::format("{},{},{:.3f},{},{:.3f}", s.quantum_start_s, s.completed,
                     s.throughput_per_min, s.load, s.mean_response_ms);
}

std::string ExperimentSummary::to_text() const {
  std::string out;
  out += fmt::format("candidates {}\navailable {}\n", candidates, available);
  for (const auto& d : deployments) {
    out += fmt::format("deploy {} {}{}\n", d.node_id, d.ok ? "ok" : "failed",
                       d.ok ? "" : " " + d.error);
  }
  out += fmt::format("span_ms {}\nrecords_persisted {}\nrecords_discarded {}\n", span_ms(),
                     records_persisted, records_discarded);
  for (const auto& t : testers) {
    out += fmt::format("tester {} node {} state {} records {} launch_ms {}", t.tester_id,
                       t.node_id, to_string(t.state), t.records, t.launch_time_ms);
    if (!t.reason.empty()) out += fmt::format(" reason {}", t.reason);
    if (t.failure_time_ms) out += fmt::format(" failed_at_ms {}", *t.failure_time_ms);
    out += '\n';
  }
  return out;
}

namespace {

class Experiment {
 public:
  explicit Experiment(const ExperimentPlan& plan) : plan_(plan) {}

  ExperimentSummary run();

 private:
  struct Slot {
    int tester_id = 0;
    std::unique_ptr<LineChannel> channel;
    std::thread handler;
    std::atomic<std::int64_t> last_seen_steady_ms{0};
    std::atomic<bool> acked{false};
    std::int64_t launched_steady_ms = 0;
  };

  std::int64_t global_now() const { return clock_.now_ms() + clock_offset_.offset_ms; }
  static std::int64_t steady_ms() {
    return std::chrono::duration_cast<Millis>(SteadyClock::now().time_since_epoch())
        .count();
  }

  void handle_channel(Slot& slot);
  void on_record(Slot& slot, std::string_view line);
  // Caller holds mutex_.
  bool fail_locked(int tester_id, const std::string& reason);
  void heartbeat_loop();
  void live_loop();
  void write_line(const std::string& line);

  const ExperimentPlan& plan_;
  SystemClock clock_;
  ClockOffset clock_offset_;
  std::mutex mutex_;
  std::condition_variable changed_;
  ReporterRegistry registry_;
  std::ofstream out_;
  std::unique_ptr<LiveView> live_;
  std::vector<std::unique_ptr<Slot>> slots_;
  StopSignal shutdown_;
  std::int64_t persisted_ = 0;
  std::int64_t discarded_ = 0;
  std::int64_t last_end_ms_ = 0;
};

void Experiment::write_line(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
}

bool Experiment::fail_locked(int tester_id, const std::string& reason) {
  const auto now = global_now();
  if (!registry_.on_tester_failure(tester_id, reason, now)) return false;
  spdlog::warn("tester {} failed: {}", tester_id, reason);
  write_line(fmt::format("FAIL {} {} {}", tester_id, now, reason));
  last_end_ms_ = std::max(last_end_ms_, now);
  changed_.notify_all();
  return true;
}

void Experiment::on_record(Slot& slot, std::string_view line) {
  WireRecord wire;
  try {
    wire = parse_wire_record(line);
  } catch (const ParseError& e) {
    spdlog::warn("tester {}: {}", slot.tester_id, e.what());
    return;
  }
  bool drop = false;
  {
    std::lock_guard lock(mutex_);
    if (!registry_.accepts_records(slot.tester_id)) {
      ++discarded_;
      return;
    }
    auto* entry = registry_.find(slot.tester_id);
    InvocationRecord global = wire.record;
    // The channel identity is authoritative for the tester id.
    global.tester_id = slot.tester_id;
    global.start_local_ms = to_global(wire.record.start_local_ms, wire.offset);
    global.end_local_ms = to_global(wire.record.end_local_ms, wire.offset);
    if (entry->offsets.empty() || entry->offsets.back().offset_ms != wire.offset.offset_ms ||
        entry->offsets.back().uncertainty_ms != wire.offset.uncertainty_ms) {
      ClockOffset offset = wire.offset;
      offset.tester_id = slot.tester_id;
      entry->offsets.push_back(offset);
    }
    write_line(format_record(global));
    ++persisted_;
    ++entry->records;
    if (live_) live_->add(global);
    if (global.outcome == Outcome::kSuccess) {
      entry->consecutive_failures = 0;
    } else if (++entry->consecutive_failures >= plan_.fail_after && plan_.fail_after > 0) {
      drop = fail_locked(slot.tester_id,
                         fmt::format("client-failures:{}", entry->consecutive_failures));
    }
  }
  if (drop) slot.channel->send(protocol::kStop);
}

void Experiment::handle_channel(Slot& slot) {
  std::string line;
  for (;;) {
    auto status = slot.channel->receive(line, Millis(1000), &shutdown_);
    if (status == LineReader::Status::kTimeout) continue;
    if (status == LineReader::Status::kStopped) break;
    if (status == LineReader::Status::kClosed) {
      std::lock_guard lock(mutex_);
      fail_locked(slot.tester_id, "disconnect");
      break;
    }
    slot.last_seen_steady_ms = steady_ms();
    if (line.rfind("REC ", 0) == 0) {
      on_record(slot, line);
    } else if (line == protocol::kAck) {
      slot.acked = true;
    } else if (line == protocol::kPong) {
    } else if (line.rfind("BYE", 0) == 0) {
      std::string reason = line.size() > 4 ? line.substr(4) : "done";
      std::lock_guard lock(mutex_);
      if (reason == "done" || reason == "stopped") {
        if (registry_.mark_finished(slot.tester_id, reason)) {
          last_end_ms_ = std::max(last_end_ms_, global_now());
          changed_.notify_all();
        }
      } else {
        fail_locked(slot.tester_id, reason);
      }
      break;
    } else {
      spdlog::warn("tester {}: unexpected line '{}'", slot.tester_id, line);
    }
  }
  slot.channel->close(Millis(3000));
}

void Experiment::heartbeat_loop() {
  const auto hb = plan_.heartbeat.count();
  while (sleep_for(plan_.heartbeat, &shutdown_)) {
    const auto now = steady_ms();
    std::vector<Slot*> to_ping;
    std::vector<Slot*> to_close;
    {
      std::lock_guard lock(mutex_);
      for (auto& slot : slots_) {
        if (!registry_.accepts_records(slot->tester_id)) continue;
        if (!slot->acked && now - slot->launched_steady_ms > plan_.ack_timeout.count()) {
          if (fail_locked(slot->tester_id, "no-ack")) to_close.push_back(slot.get());
        } else if (now - slot->last_seen_steady_ms > 2 * hb) {
          if (fail_locked(slot->tester_id, "heartbeat-timeout")) {
            to_close.push_back(slot.get());
          }
        } else {
          to_ping.push_back(slot.get());
        }
      }
    }
    for (auto* slot : to_ping) slot->channel->send(protocol::kPing);
    for (auto* slot : to_close) slot->channel->send(protocol::kStop);
  }
}

void Experiment::live_loop() {
  const auto q = live_->quantum_s();
  *plan_.live_out << LiveView::csv_header() << '\n';
  std::int64_t next = (global_now() / 1000 / q + 1) * q;
  for (;;) {
    const auto wait = (next + q) * 1000 - global_now();
    if (!sleep_for(Millis(std::max<std::int64_t>(0, wait)), &shutdown_)) return;
    *plan_.live_out << LiveView::csv_row(live_->snapshot(next)) << '\n';
    plan_.live_out->flush();
    next += q;
  }
}

ExperimentSummary Experiment::run() {
  ExperimentSummary summary;
  summary.candidates = plan_.candidates.size();
  if (!plan_.description.timeserver_address.empty()) {
    try {
      clock_offset_ =
          synchronize(HostPort::parse(plan_.description.timeserver_address), clock_, 0);
    } catch (const NetError& e) {
      spdlog::warn("controller clock sync failed ({}); using local clock", e.what());
    }
  }

  const auto available =
      probe_availability(plan_.candidates, plan_.probe_timeout, plan_.transport);
  summary.available = available.size();
  if (available.empty()) throw Error("no tester nodes available");
  summary.deployments = distribute_code(plan_.client_payload, available, plan_.transport);
  std::vector<std::pair<NodeEndpoint, std::string>> deployed;
  for (std::size_t i = 0; i < available.size(); ++i) {
    const auto& report = summary.deployments[i];
    if (report.ok) {
      deployed.emplace_back(available[i], report.staged_path);
    } else {
      spdlog::warn("deployment to {} failed: {}", report.node_id, report.error);
    }
  }
  if (deployed.empty()) throw Error("client code could not be deployed to any node");

  out_.open(plan_.output_path, std::ios::out | std::ios::trunc);
  if (!out_) throw Error(fmt::format("cannot write {}", plan_.output_path.string()));
  if (plan_.live_quantum_s > 0 && plan_.live_out != nullptr) {
    live_ = std::make_unique<LiveView>(plan_.live_quantum_s);
  }

  std::vector<std::string> tester_command = plan_.tester_command;
  if (tester_command.empty()) tester_command = {self_executable(), "tester"};

  std::thread heartbeat([this] { heartbeat_loop(); });
  std::thread live;
  if (live_) live = std::thread([this] { live_loop(); });

  const auto t0 = SteadyClock::now();
  summary.started_ms = global_now();
  for (std::size_t i = 0; i < deployed.size(); ++i) {
    std::this_thread::sleep_until(t0 + plan_.ramp_delay * static_cast<std::int64_t>(i));
    const int tester_id = static_cast<int>(i) + 1;
    const auto& [node, staged] = deployed[i];
    TestDescription description = plan_.description;
    description.client_command = fmt::format("{} {}", shell_quote(staged), plan_.client_args);
    auto command = tester_command;
    command.insert(command.end(), {"--controller", "stdio", "--id", std::to_string(tester_id),
                                   "--heartbeat-ms", std::to_string(plan_.heartbeat.count())});
    auto slot = std::make_unique<Slot>();
    slot->tester_id = tester_id;
    slot->launched_steady_ms = steady_ms();
    slot->last_seen_steady_ms = slot->launched_steady_ms;
    {
      std::lock_guard lock(mutex_);
      registry_.add(tester_id, node.node_id, global_now());
    }
    try {
      slot->channel = open_control_channel(node, command, plan_.transport);
    } catch (const Error& e) {
      std::lock_guard lock(mutex_);
      fail_locked(tester_id, fmt::format("launch: {}", e.what()));
      continue;
    }
    spdlog::info("launched tester {} on {}", tester_id, node.node_id);
    slot->channel->send(protocol::encode_start(description));
    Slot* raw = slot.get();
    {
      std::lock_guard lock(mutex_);
      slots_.push_back(std::move(slot));
    }
    raw->handler = std::thread([this, raw] { handle_channel(*raw); });
  }

  {
    std::unique_lock lock(mutex_);
    changed_.wait(lock, [this] { return registry_.count(TesterState::kActive) == 0; });
  }
  shutdown_.raise();
  heartbeat.join();
  if (live.joinable()) live.join();
  for (auto& slot : slots_) {
    if (slot->handler.joinable()) slot->handler.join();
  }

  std::lock_guard lock(mutex_);
  summary.finished_ms = std::max(last_end_ms_, summary.started_ms);
  summary.records_persisted = persisted_;
  summary.records_discarded = discarded_;
  for (const auto& [id, entry] : registry_.entries()) summary.testers.push_back(entry);
  return summary;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentPlan& plan) {
  const auto checked = validate(plan);
  Experiment experiment(checked);
  return experiment.run();
}

}  // namespace diperf
