// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit status
// is nonzero when any criterion fails. `--only N` (repeatable) runs a subset.

#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "diperf/analysis.h"
#include "diperf/clock.h"
#include "diperf/controller.h"
#include "diperf/reports.h"
#include "diperf/tester.h"
#include "diperf/timesync.h"
#include "oracle.h"
#include "test_support.h"

namespace fs = std::filesystem;
using namespace diperf;
using testing_support::BackgroundServer;
using testing_support::TempDir;
using SteadyClock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(ok ? what : "FAILED " + what);
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::int64_t wall_ms() { return SystemClock().now_ms(); }

double seconds_since(SteadyClock::time_point t) {
  return std::chrono::duration<double>(SteadyClock::now() - t).count();
}

std::string fmt_d(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

bool close_rel(double a, double b, double rel) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

// Controller plan for n testers on the local backend.
struct LocalRun {
  TempDir dir;
  ExperimentPlan plan;

  LocalRun(int testers, const std::string& client_body, const std::string& client_args) {
    testing_support::write_script(dir / "client.sh", client_body);
    for (int i = 0; i < testers; ++i) {
      plan.candidates.push_back({"n" + std::to_string(i + 1), "127.0.0.1", Backend::kLocal});
    }
    plan.client_payload = dir / "client.sh";
    plan.client_args = client_args;
    plan.output_path = dir / "records.txt";
    plan.transport.staging_root = dir / "staging";
    plan.tester_command = {testing_support::diperf_binary(), "tester"};
    plan.heartbeat = Millis(5000);
    plan.description.sync_interval = Millis(300000);
    plan.description.client_timeout = Millis(120000);
  }

  RecordSet records() const { return load_record_file(plan.output_path); }
};

std::string forward_to(const std::string& subcommand) {
  return "exec '" + testing_support::diperf_binary() + "' " + subcommand + " \"$@\"\n";
}

// Throughput quanta during which every load sample is at least `min_load`,
// skipping the first and last quantum of the series.
std::vector<SeriesPoint> saturated_quanta(const MetricSeries& throughput,
                                          const MetricSeries& load, double min_load,
                                          std::int64_t not_before_s = INT64_MIN) {
  std::map<std::int64_t, double> at;
  for (const auto& p : load.points) at[p.quantum_start_s] = p.value;
  std::vector<SeriesPoint> out;
  const auto& pts = throughput.points;
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    if (pts[i].quantum_start_s < not_before_s) continue;
    bool busy = true;
    for (auto t = pts[i].quantum_start_s; t < pts[i].quantum_start_s + throughput.quantum_s;
         t += load.quantum_s) {
      auto it = at.find(t);
      if (it == at.end() || it->second < min_load) busy = false;
    }
    if (busy) out.push_back(pts[i]);
  }
  return out;
}

std::int64_t count_outcome(std::span<const GlobalRecord> rs, Outcome o) {
  return std::count_if(rs.begin(), rs.end(), [o](const auto& r) { return r.outcome == o; });
}

// ---------------------------------------------------------------------------

Verdict saturation_run() {
  Verdict v;
  const auto began = SteadyClock::now();
  BackgroundServer ts({"timeserver"});
  BackgroundServer svc(
      {"mock-service", "--slots", "1", "--service-ms", "700", "--queue", "unbounded"});
  LocalRun run(40, forward_to("mock-client"), "{target}");
  run.plan.ramp_delay = Millis(10000);
  run.plan.description.experiment_duration = Millis(600000);
  run.plan.description.invocation_interval = Millis(1000);
  run.plan.description.target_address = svc.address().to_string();
  run.plan.description.timeserver_address = ts.address().to_string();
  run_experiment(run.plan);
  const double runtime = seconds_since(began);

  const auto set = run.records();
  const auto norm = normalize(set.records, set.offsets);
  const auto& rs = norm.records;
  v.check(norm.diagnostics.missing_offset == 0 && set.failures.empty(),
          "no tester failures or unmapped records");

  const double plateau = 60.0 * 1000.0 / 700.0;
  const auto load = load_series(rs, 1);
  const auto tp60 = throughput_series(rs, 60);
  const auto busy = saturated_quanta(tp60, load, 2.0);
  double lo = 1e9, hi = 0, sum = 0;
  for (const auto& p : busy) {
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
    sum += p.value;
  }
  v.check(busy.size() >= 8 && lo >= plateau * 0.9 && hi <= plateau * 1.1,
          "plateau " + std::to_string(busy.size()) + " saturated minutes in [" + fmt_d(lo, 0) +
              "," + fmt_d(hi, 0) + "]/min, mean " +
              fmt_d(busy.empty() ? 0 : sum / busy.size(), 1) + " vs 85.7 +-10%");

  const auto tp10 = throughput_series(rs, 10);
  const auto sat = saturation_estimate(tp10, load);
  v.check(sat.saturated && sat.capacity <= 3,
          "capacity " + (sat.saturated ? fmt_d(sat.capacity, 0) : std::string("unsaturated")) +
              " <= 3");

  std::int64_t first = INT64_MAX, last = INT64_MIN;
  for (const auto& r : rs) {
    first = std::min(first, r.start_ms);
    last = std::max(last, r.end_ms);
  }
  const auto ok = count_outcome(rs, Outcome::kSuccess);
  const double per_job = ok > 0 ? static_cast<double>(last - first) / ok : 0.0;
  v.check(std::abs(per_job - 700.0) <= 70.0,
          std::to_string(ok) + " jobs, " + fmt_d(per_job, 1) + " ms per job vs 700 +-10%");
  v.check(runtime <= 20 * 60, "runtime " + fmt_d(runtime, 0) + "s <= 1200s");
  return v;
}

// ---------------------------------------------------------------------------

Verdict overload_run() {
  Verdict v;
  const auto began = SteadyClock::now();
  BackgroundServer ts({"timeserver"});
  BackgroundServer svc({"mock-service", "--slots", "1", "--service-ms", "700", "--queue", "10"});
  LocalRun run(20, forward_to("mock-client"), "{target}");
  run.plan.ramp_delay = Millis(5000);
  run.plan.description.experiment_duration = Millis(240000);
  run.plan.description.invocation_interval = Millis(1000);
  run.plan.description.target_address = svc.address().to_string();
  run.plan.description.timeserver_address = ts.address().to_string();
  run.plan.fail_after = 3;
  run_experiment(run.plan);
  const double runtime = seconds_since(began);

  const auto set = run.records();
  const auto norm = normalize(set.records, set.offsets);
  const auto& rs = norm.records;
  const int capacity = 1 + 10;

  // In-flight requests of other invocations at the moment each rejected one began.
  int rejected = 0;
  int min_in_flight = INT32_MAX;
  for (const auto& r : rs) {
    if (r.outcome != Outcome::kServiceError) continue;
    ++rejected;
    int n = 0;
    for (const auto& o : rs) {
      if (&o != &r && o.outcome == Outcome::kSuccess && o.start_ms <= r.start_ms &&
          r.start_ms < o.end_ms) {
        ++n;
      }
    }
    min_in_flight = std::min(min_in_flight, n);
  }
  // One request of slack: a tester stamps its start a few ms before the
  // request reaches the service.
  v.check(rejected > 0 && min_in_flight >= capacity - 1,
          std::to_string(rejected) + " rejections, each with >= " +
              std::to_string(rejected ? min_in_flight : 0) + " requests in flight (capacity " +
              std::to_string(capacity) + ", need >= " + std::to_string(capacity - 1) + ")");

  std::int64_t last_fail = INT64_MIN;
  bool reasons_ok = !set.failures.empty();
  for (const auto& f : set.failures) {
    last_fail = std::max(last_fail, f.time_ms);
    reasons_ok = reasons_ok && f.reason == "client-failures:3";
  }
  v.check(reasons_ok, "pool shrank by " + std::to_string(set.failures.size()) + " of 20 testers");

  const double plateau = 20.0 * 1000.0 / 700.0;
  const auto load = load_series(rs, 1);
  const auto tp20 = throughput_series(rs, 20);
  const auto after = saturated_quanta(tp20, load, 2.0, oracle::floor_div(last_fail, 1000) + 20);
  double lo = 1e9, hi = 0;
  for (const auto& p : after) {
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  v.check(after.size() >= 3 && lo >= plateau * 0.9 && hi <= plateau * 1.1,
          "after shrink " + std::to_string(after.size()) + " quanta in [" + fmt_d(lo, 0) + "," +
              fmt_d(hi, 0) + "]/20s vs 28.6 +-10%");
  v.check(runtime <= 15 * 60, "runtime " + fmt_d(runtime, 0) + "s <= 900s");
  return v;
}

// ---------------------------------------------------------------------------

// Relays one TIME exchange, holding each direction for `delay`.
class DelayProxy {
 public:
  DelayProxy(HostPort upstream, Millis delay)
      : upstream_(std::move(upstream)),
        delay_(delay),
        listener_(TcpListener::bind(HostPort::parse("127.0.0.1:0"))) {
    thread_ = std::thread([this] { loop(); });
  }
  ~DelayProxy() {
    stopping_ = true;
    stop_.raise();
    thread_.join();
    for (auto& t : workers_) t.join();
  }
  HostPort address() const { return listener_.local_address(); }

 private:
  void loop() {
    while (!stopping_) {
      UniqueFd fd;
      try {
        fd = listener_.accept(Millis(200), &stop_);
      } catch (const Error&) {
        return;
      }
      if (!fd.valid()) continue;
      workers_.emplace_back([this, c = std::move(fd)]() mutable { relay(std::move(c)); });
    }
  }

  void relay(UniqueFd client) {
    try {
      std::string line;
      LineReader from_client(client.get());
      if (from_client.read_line(line, Millis(5000)) != LineReader::Status::kLine) return;
      std::this_thread::sleep_for(delay_);
      auto up = connect_tcp(upstream_, Millis(5000));
      write_all(up.get(), line + "\n");
      LineReader from_up(up.get());
      if (from_up.read_line(line, Millis(5000)) != LineReader::Status::kLine) return;
      std::this_thread::sleep_for(delay_);
      write_all(client.get(), line + "\n");
    } catch (const Error&) {
    }
  }

  HostPort upstream_;
  Millis delay_;
  TcpListener listener_;
  StopSignal stop_;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
  std::vector<std::thread> workers_;
};

Verdict clock_reconciliation() {
  Verdict v;
  const auto began = SteadyClock::now();
  SystemClock global;
  TimeServer server(global);
  server.start(HostPort::parse("127.0.0.1:0"));

  constexpr int kTesters = 50;
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<std::int64_t> offset_dist(-5'000'000, 5'000'000);
  std::uniform_int_distribution<int> latency_dist(0, 80);
  std::vector<std::int64_t> truth(kTesters);
  std::vector<std::unique_ptr<SkewedClock>> clocks;
  std::vector<std::unique_ptr<DelayProxy>> proxies;
  for (int i = 0; i < kTesters; ++i) {
    truth[i] = offset_dist(rng);
    // global = local + offset
    clocks.push_back(std::make_unique<SkewedClock>(-truth[i]));
    proxies.push_back(
        std::make_unique<DelayProxy>(server.address(), Millis(latency_dist(rng))));
  }
  std::vector<std::future<ClockOffset>> sync;
  for (int i = 0; i < kTesters; ++i) {
    sync.push_back(std::async(std::launch::async, [&, i] {
      return synchronize(proxies[i]->address(), *clocks[i], i + 1);
    }));
  }
  OffsetHistory history;
  std::int64_t worst = 0;
  for (int i = 0; i < kTesters; ++i) {
    const auto est = sync[i].get();
    worst = std::max(worst, std::abs(est.offset_ms - truth[i]));
    history.add(est);
  }
  v.check(worst <= 80, "worst offset error " + std::to_string(worst) + "ms <= 80ms over " +
                           std::to_string(kTesters) + " testers");

  // Known event order: one event every 200ms, each stamped by a random
  // tester on its own (skewed) clock.
  constexpr int kEvents = 100;
  std::uniform_int_distribution<int> who(0, kTesters - 1);
  std::vector<InvocationRecord> events;
  auto next = SteadyClock::now();
  for (int k = 0; k < kEvents; ++k) {
    std::this_thread::sleep_until(next);
    next += std::chrono::milliseconds(200);
    const int t = who(rng);
    const auto local = clocks[t]->now_ms();
    events.push_back({t + 1, k, local, local + 1, Outcome::kSuccess, {}, {}});
  }
  auto mapped = normalize(events, history).records;
  std::stable_sort(mapped.begin(), mapped.end(),
                   [](const auto& a, const auto& b) { return a.start_ms < b.start_ms; });
  bool ordered = mapped.size() == kEvents;
  for (int k = 0; ordered && k < kEvents; ++k) ordered = mapped[k].sequence == k;
  v.check(ordered, std::to_string(kEvents) + " events reordered exactly");
  const double runtime = seconds_since(began);
  v.check(runtime <= 60, "runtime " + fmt_d(runtime, 0) + "s <= 60s");
  return v;
}

// ---------------------------------------------------------------------------

struct RandomSet {
  std::vector<InvocationRecord> records;
  std::vector<ClockOffset> offsets;
};

RandomSet random_set(std::mt19937_64& rng) {
  RandomSet s;
  const int testers = std::uniform_int_distribution<int>(1, 12)(rng);
  const int n = std::uniform_int_distribution<int>(1, 1000)(rng);
  std::uniform_int_distribution<std::int64_t> start(-50'000, 150'000);
  std::uniform_int_distribution<std::int64_t> dur(0, 20'000);
  std::uniform_int_distribution<std::int64_t> off(-100'000, 100'000);
  for (int t = 1; t <= testers; ++t) {
    const int k = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int j = 0; j < k; ++j) {
      // The first offset sometimes comes after early records: those stay unmapped.
      const auto at = j == 0 && rng() % 4 == 0 ? start(rng) : INT64_MIN / 4 + j;
      s.offsets.push_back({t, off(rng), 5, at});
    }
  }
  for (int i = 0; i < n; ++i) {
    InvocationRecord r;
    r.tester_id = std::uniform_int_distribution<int>(1, testers)(rng);
    r.sequence = i;
    r.start_local_ms = start(rng);
    r.end_local_ms = r.start_local_ms + dur(rng);
    const auto o = rng() % 10;
    r.outcome = o < 7 ? Outcome::kSuccess
                      : o == 7 ? Outcome::kTimeout
                               : o == 8 ? Outcome::kStartFailure : Outcome::kServiceError;
    if (rng() % 2) r.latency_ms = std::uniform_int_distribution<std::int64_t>(0, 500)(rng);
    if (rng() % 3 == 0) r.overhead_ms = std::uniform_int_distribution<std::int64_t>(0, 300)(rng);
    s.records.push_back(r);
  }
  return s;
}

std::map<std::int64_t, double> as_map(const MetricSeries& s) {
  std::map<std::int64_t, double> m;
  for (const auto& p : s.points) m[p.quantum_start_s] = p.value;
  return m;
}

bool maps_match(const std::map<std::int64_t, double>& a, const std::map<std::int64_t, double>& b,
                double rel) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, x] : a) {
    auto it = b.find(k);
    if (it == b.end()) return false;
    if (rel == 0 ? x != it->second : !close_rel(x, it->second, rel)) return false;
  }
  return true;
}

bool points_match(const std::vector<SeriesPoint>& a, const std::vector<SeriesPoint>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].quantum_start_s != b[i].quantum_start_s) return false;
    if (!close_rel(a[i].value, b[i].value, 1e-9)) return false;
  }
  return true;
}

std::vector<SeriesPoint> to_points(const std::map<std::int64_t, double>& m) {
  std::vector<SeriesPoint> out;
  for (const auto& [t, x] : m) out.push_back({t, x});
  return out;
}

Verdict metric_oracles() {
  Verdict v;
  const auto began = SteadyClock::now();
  std::mt19937_64 rng(4);
  std::map<std::string, int> mismatches;
  const std::int64_t quanta_t[] = {1, 7, 60};
  const std::int64_t quanta_l[] = {1, 2, 5};
  const std::int64_t quanta_r[] = {1, 10, 60};
  const std::int64_t windows[] = {1, 30, 160};
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_set(rng);
    OffsetHistory h;
    for (const auto& o : s.offsets) h.add(o);
    auto mine = normalize(s.records, h).records;
    auto ref = oracle::normalize(s.records, s.offsets);
    auto by_key = [](const GlobalRecord& a, const GlobalRecord& b) {
      return std::tie(a.tester_id, a.sequence) < std::tie(b.tester_id, b.sequence);
    };
    std::sort(mine.begin(), mine.end(), by_key);
    std::sort(ref.begin(), ref.end(), by_key);
    if (mine != ref) ++mismatches["normalize"];
    const auto qt = quanta_t[trial % 3], ql = quanta_l[(trial / 3) % 3],
               qr = quanta_r[(trial / 9) % 3], w = windows[trial % 3];

    const auto tp = throughput_series(ref, qt);
    const auto ref_tp = oracle::throughput(ref, qt);
    if (!maps_match(as_map(tp), ref_tp, 0)) ++mismatches["throughput"];
    if (!maps_match(as_map(load_series(ref, ql)), oracle::load(ref, ql), 0)) ++mismatches["load"];
    const auto rt = response_series(ref, qr);
    const auto ref_rt = oracle::response(ref, qr);
    if (!maps_match(as_map(rt), ref_rt, 1e-9)) ++mismatches["response"];
    if (!points_match(moving_average(tp, w).series.points,
                      oracle::moving_average(to_points(ref_tp), w)) ||
        !points_match(moving_average(rt, w).series.points,
                      oracle::moving_average(to_points(ref_rt), w))) {
      ++mismatches["moving_average"];
    }

    const auto peak = oracle::peak_window(ref);
    if (detect_peak_window(ref) != peak) ++mismatches["peak_window"];
    if (!ref.empty()) {
      const auto ref_stats = oracle::client_stats(ref, *peak);
      const auto stats = client_stats(ref);
      bool same = stats.size() == ref_stats.size();
      for (const auto& c : stats) {
        auto it = ref_stats.find(c.tester_id);
        if (it == ref_stats.end()) {
          same = false;
          continue;
        }
        const auto& o = it->second;
        same = same && c.jobs_completed == o.jobs;
        const double util = o.total > 0 ? static_cast<double>(o.jobs) / o.total : 0.0;
        same = same && (util == 0 ? c.utilization.value() == 0
                                  : close_rel(c.utilization.value(), util, 1e-9));
        same = same && (o.jobs > 0 ? c.fairness == o.total : !c.fairness.has_value());
      }
      if (!same) ++mismatches["client_stats"];
    }
  }
  for (const char* name : {"normalize", "throughput", "load", "response", "moving_average",
                           "peak_window", "client_stats"}) {
    v.check(mismatches[name] == 0,
            std::string(name) + " " + std::to_string(100 - mismatches[name]) + "/100");
  }
  const double runtime = seconds_since(began);
  v.check(runtime <= 120, "runtime " + fmt_d(runtime, 0) + "s <= 120s");
  return v;
}

// ---------------------------------------------------------------------------

Verdict fairness_properties() {
  Verdict v;
  // Full overlap: every tester active over the same window.
  std::mt19937_64 rng(5);
  bool sum_ok = true, identity_ok = true;
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int testers = std::uniform_int_distribution<int>(1, 10)(rng);
    std::vector<GlobalRecord> rs;
    std::int64_t seq = 0;
    for (int t = 1; t <= testers; ++t) {
      rs.push_back({t, seq++, 0, 10, Outcome::kSuccess, 10});
      rs.push_back({t, seq++, 99'990, 100'000, Outcome::kSuccess, 10});
      const int n = std::uniform_int_distribution<int>(0, 200)(rng);
      for (int i = 0; i < n; ++i) {
        const auto s = std::uniform_int_distribution<std::int64_t>(0, 99'000)(rng);
        rs.push_back({t, seq++, s, s + 500, rng() % 5 ? Outcome::kSuccess : Outcome::kTimeout,
                      500});
      }
    }
    const auto stats = client_stats(rs);
    double sum = 0;
    for (const auto& c : stats) {
      sum += c.utilization.value();
      if (c.fairness) {
        identity_ok = identity_ok &&
                      *c.fairness * c.utilization.numerator ==
                          c.jobs_completed * c.utilization.denominator;
      }
    }
    worst = std::max(worst, std::abs(sum - 1.0));
    sum_ok = sum_ok && std::abs(sum - 1.0) <= 1e-9;
  }
  v.check(sum_ok, "sum of utilization = 1 (worst deviation " + fmt_d(worst, 12) + ")");
  v.check(identity_ok, "fairness x utilization = jobs exactly");

  // Identical backlogged clients on a FIFO service.
  BackgroundServer svc(
      {"mock-service", "--slots", "1", "--service-ms", "200", "--queue", "unbounded"});
  LocalRun run(8, forward_to("mock-client"), "{target}");
  run.plan.ramp_delay = Millis(0);
  run.plan.description.experiment_duration = Millis(60000);
  run.plan.description.invocation_interval = Millis(0);
  run.plan.description.target_address = svc.address().to_string();
  run_experiment(run.plan);
  const auto set = run.records();
  const auto rs = normalize(set.records, set.offsets).records;
  const auto stats = client_stats(rs);
  std::int64_t lo = INT64_MAX, hi = 0;
  for (const auto& c : stats) {
    lo = std::min(lo, c.jobs_completed);
    hi = std::max(hi, c.jobs_completed);
  }
  v.check(stats.size() == 8 && hi - lo <= 2 && lo > 0,
          "FIFO peak-window jobs per client in [" + std::to_string(lo) + "," +
              std::to_string(hi) + "], spread <= 2");
  return v;
}

// ---------------------------------------------------------------------------

struct OfflineRun {
  std::vector<InvocationRecord> records;
  int status = -1;
};

OfflineRun offline(const fs::path& dir, const std::string& name, const std::string& body,
                   std::int64_t duration_ms, std::int64_t interval_ms,
                   std::int64_t timeout_ms = 120000,
                   std::optional<double> max_rate = std::nullopt) {
  testing_support::write_script(dir / name, body);
  TestDescription d;
  d.experiment_duration = Millis(duration_ms);
  d.invocation_interval = Millis(interval_ms);
  d.client_timeout = Millis(timeout_ms);
  d.client_command = (dir / name).string();
  d.max_invocation_rate = max_rate;
  TesterOptions opts;
  opts.latency_probes = 0;
  std::ostringstream out;
  SystemClock clock;
  OfflineRun r;
  r.status = run_tester_offline(d, opts, clock, out);
  std::istringstream in(out.str());
  r.records = read_records(in).records;
  return r;
}

std::optional<pid_t> parent_of(pid_t pid) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  std::string stat;
  if (!std::getline(in, stat)) return std::nullopt;
  const auto close = stat.rfind(')');
  if (close == std::string::npos) return std::nullopt;
  std::istringstream rest(stat.substr(close + 1));
  char state;
  pid_t ppid;
  if (!(rest >> state >> ppid)) return std::nullopt;
  return ppid;
}

std::vector<pid_t> children_of(pid_t parent) {
  std::vector<pid_t> out;
  for (const auto& e : fs::directory_iterator("/proc")) {
    const auto name = e.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) continue;
    const pid_t pid = std::stoi(name);
    if (parent_of(pid) == parent) out.push_back(pid);
  }
  return out;
}

bool any_process_mentions(const std::string& needle) {
  for (const auto& e : fs::directory_iterator("/proc")) {
    const auto name = e.path().filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit)) continue;
    const auto cmdline = testing_support::read_file(e.path() / "cmdline");
    if (cmdline.find(needle) != std::string::npos) return true;
  }
  return false;
}

Verdict tester_behaviour() {
  Verdict v;
  TempDir dir;
  auto pacing = std::async(std::launch::async,
                           [&] { return offline(dir.path(), "p.sh", "sleep 0.3\n", 5000, 1000); });
  auto b2b = std::async(std::launch::async,
                        [&] { return offline(dir.path(), "b.sh", "sleep 1.3\n", 5000, 1000); });
  auto slow = std::async(std::launch::async, [&] {
    return offline(dir.path(), "t.sh", "sleep 5\n", 2500, 1000, 1000);
  });
  auto rate = std::async(std::launch::async, [&] {
    return offline(dir.path(), "r.sh", "exit 0\n", 5000, 0, 120000, 3.0);
  });

  {
    const auto r = pacing.get();
    bool ok = r.status == 0 && r.records.size() >= 4;
    std::int64_t lo = INT64_MAX, hi = 0;
    for (std::size_t i = 1; i < r.records.size(); ++i) {
      const auto gap = r.records[i].start_local_ms - r.records[i - 1].start_local_ms;
      lo = std::min(lo, gap);
      hi = std::max(hi, gap);
    }
    ok = ok && lo >= 1000 && hi <= 1050;
    v.check(ok, "pacing: " + std::to_string(r.records.size()) + " runs, start gaps [" +
                    std::to_string(lo) + "," + std::to_string(hi) + "]ms");
  }
  {
    const auto r = b2b.get();
    bool ok = r.status == 0 && r.records.size() >= 3;
    std::int64_t worst = 0;
    for (std::size_t i = 1; i < r.records.size(); ++i) {
      worst = std::max(worst, r.records[i].start_local_ms - r.records[i - 1].end_local_ms);
    }
    ok = ok && worst < 50;
    v.check(ok, "back-to-back: next start within " + std::to_string(worst) + "ms of end");
  }
  {
    const auto r = slow.get();
    bool ok = r.status == 0 && !r.records.empty();
    std::int64_t longest = 0;
    for (const auto& rec : r.records) {
      ok = ok && rec.outcome == Outcome::kTimeout && rec.duration_ms() >= 1000;
      longest = std::max(longest, rec.duration_ms());
    }
    ok = ok && longest <= 1200;
    v.check(ok, "timeout: " + std::to_string(r.records.size()) +
                    " TIMEOUT records, longest " + std::to_string(longest) + "ms");
  }
  {
    const auto r = rate.get();
    int worst = 0;
    for (const auto& a : r.records) {
      int in_window = 0;
      for (const auto& b : r.records) {
        const auto dt = b.start_local_ms - a.start_local_ms;
        if (dt >= 0 && dt < 1000) ++in_window;
      }
      worst = std::max(worst, in_window);
    }
    v.check(r.status == 0 && r.records.size() >= 12 && worst <= 3,
            "max rate: " + std::to_string(r.records.size()) + " runs in 5s, at most " +
                std::to_string(worst) + " per second");
  }

  // Controller killed mid-run: every tester must go within 2 heartbeats.
  ::prctl(PR_SET_CHILD_SUBREAPER, 1);
  testing_support::write_script(dir / "slow.sh", "sleep 0.3\n");
  std::string nodes;
  for (int i = 1; i <= 5; ++i) nodes += "n" + std::to_string(i) + " 127.0.0.1 local\n";
  testing_support::write_file(dir / "nodes", nodes);
  const std::int64_t heartbeat_ms = 1000;
  auto controller = ChildProcess::spawn(
      {testing_support::diperf_binary(), "controller", "--targets", (dir / "nodes").string(),
       "--client", (dir / "slow.sh").string(), "--target-service", "127.0.0.1:9", "--ramp", "0",
       "--duration", "60", "--interval", "0.5", "--heartbeat", "1", "--staging-dir",
       (dir / "stage").string(), "--out", (dir / "rec.txt").string()});
  std::this_thread::sleep_for(std::chrono::seconds(3));
  const auto testers = children_of(controller.pid());
  const auto killed_at = wall_ms();
  const auto killed_steady = SteadyClock::now();
  ::kill(controller.pid(), SIGKILL);
  controller.wait();
  const auto size_at_kill = fs::file_size(dir / "rec.txt");

  std::set<pid_t> left(testers.begin(), testers.end());
  std::map<pid_t, int> status;
  while (!left.empty() && seconds_since(killed_steady) < 10) {
    for (auto it = left.begin(); it != left.end();) {
      int st = 0;
      const auto r = ::waitpid(*it, &st, WNOHANG);
      const bool gone = r == *it || (r < 0 && ::kill(*it, 0) != 0);
      if (gone) {
        status[*it] = r == *it && WIFEXITED(st) ? WEXITSTATUS(st) : -1;
        it = left.erase(it);
      } else {
        ++it;
      }
    }
    if (!left.empty()) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  const double stop_ms = seconds_since(killed_steady) * 1000.0;
  ::prctl(PR_SET_CHILD_SUBREAPER, 0);
  while (::waitpid(-1, nullptr, WNOHANG) > 0) {
  }
  bool exit_codes = true;
  for (const auto& [pid, st] : status) exit_codes = exit_codes && st == 3;
  v.check(testers.size() == 5 && left.empty() && stop_ms <= 2.0 * heartbeat_ms,
          "disconnect: " + std::to_string(testers.size() - left.size()) + "/" +
              std::to_string(testers.size()) + " testers stopped within " + fmt_d(stop_ms, 0) +
              "ms (limit " + std::to_string(2 * heartbeat_ms) + "ms)");
  v.check(exit_codes, "testers exited with the disconnect status");
  v.check(!any_process_mentions((dir / "stage").string()), "no client left running");

  std::this_thread::sleep_for(std::chrono::milliseconds(500));
  const auto set = load_record_file(dir / "rec.txt");
  std::int64_t late = 0;
  for (const auto& r : set.records) late += r.start_local_ms > killed_at;
  v.check(!set.records.empty() && late == 0 && fs::file_size(dir / "rec.txt") == size_at_kill,
          std::to_string(set.records.size()) + " records persisted, " + std::to_string(late) +
              " after the disconnect");
  return v;
}

// ---------------------------------------------------------------------------

Verdict http_run() {
  Verdict v;
  const auto began = SteadyClock::now();
  BackgroundServer ts({"timeserver"});
  BackgroundServer http({"http-service", "--delay-ms", "100", "--path", "/cgi"});
  LocalRun run(20, forward_to("http-get"), "http://{target}/cgi");
  run.plan.ramp_delay = Millis(5000);
  run.plan.description.experiment_duration = Millis(180000);
  run.plan.description.invocation_interval = Millis(0);
  run.plan.description.max_invocation_rate = 3.0;
  run.plan.description.target_address = http.address().to_string();
  run.plan.description.timeserver_address = ts.address().to_string();
  const auto summary = run_experiment(run.plan);
  const double runtime = seconds_since(began);

  const auto set = run.records();
  AnalyzeOptions opt;
  opt.quantum_throughput_s = 10;
  opt.quantum_response_s = 10;
  opt.quantum_load_s = 1;
  opt.ma_window_s = 30;
  TempDir out;
  std::optional<ReportBundle> bundle;
  std::string error;
  try {
    bundle = write_report_bundle(set, opt, out / "report");
  } catch (const std::exception& e) {
    error = e.what();
  }
  const auto fit = testing_support::read_file(out / "report" / "fit.txt");
  const bool clean = bundle && bundle->diagnostics.missing_offset == 0 &&
                     bundle->diagnostics.clamped_response == 0 && set.failures.empty() &&
                     fit.find("unavailable") == std::string::npos;
  v.check(clean, "analysis clean" + (error.empty() ? "" : ": " + error));
  if (!bundle) return v;

  const auto rs = normalize(set.records, set.offsets).records;
  v.check(count_outcome(rs, Outcome::kSuccess) == static_cast<std::int64_t>(rs.size()),
          std::to_string(rs.size()) + " requests, all successful");

  // Launch times in global ms: first start per tester.
  std::map<int, std::int64_t> first_start, last_end;
  for (const auto& r : rs) {
    auto [a, fa] = first_start.try_emplace(r.tester_id, r.start_ms);
    if (!fa) a->second = std::min(a->second, r.start_ms);
    auto [b, fb] = last_end.try_emplace(r.tester_id, r.end_ms);
    if (!fb) b->second = std::max(b->second, r.end_ms);
  }
  std::int64_t last_launch = INT64_MIN, first_end = INT64_MAX;
  for (const auto& [id, t] : first_start) last_launch = std::max(last_launch, t);
  for (const auto& [id, t] : last_end) first_end = std::min(first_end, t);

  const auto& tp = bundle->throughput.points;
  bool monotone = true;
  int ramp_quanta = 0;
  for (std::size_t i = 1; i < tp.size(); ++i) {
    if ((tp[i].quantum_start_s + 10) * 1000 > last_launch) break;
    ++ramp_quanta;
    monotone = monotone && tp[i].value >= tp[i - 1].value;
  }
  v.check(monotone && ramp_quanta >= 5,
          "ramp: " + std::to_string(ramp_quanta) + " quanta non-decreasing");

  const double plateau = 20 * 3.0 * 10;
  double lo = 1e9, hi = 0;
  int flat = 0;
  for (const auto& p : tp) {
    if (p.quantum_start_s * 1000 < last_launch || (p.quantum_start_s + 10) * 1000 > first_end) {
      continue;
    }
    ++flat;
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  v.check(flat >= 5 && lo >= plateau * 0.9 && hi <= plateau * 1.1,
          "flat: " + std::to_string(flat) + " quanta in [" + fmt_d(lo, 0) + "," + fmt_d(hi, 0) +
              "]/10s vs 600 +-10%");

  double rlo = 1e9, rhi = 0;
  for (const auto& p : bundle->response.points) {
    rlo = std::min(rlo, p.value);
    rhi = std::max(rhi, p.value);
  }
  v.check(!bundle->response.empty() && rlo >= 100 && rhi <= 200,
          "response quanta in [" + fmt_d(rlo, 0) + "," + fmt_d(rhi, 0) + "]ms");
  v.check(runtime <= 10 * 60, "runtime " + fmt_d(runtime, 0) + "s <= 600s");
  (void)summary;
  return v;
}

// ---------------------------------------------------------------------------

Verdict fit_sanity() {
  Verdict v;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> magnitude(50, 100);
  std::normal_distribution<double> gauss(0, 1);
  constexpr int kSamples = 400'000;
  int fits = 0, good = 0;
  double worst = 0;
  for (int degree = 1; degree <= 3; ++degree) {
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<double> c(degree + 1);
      for (auto& x : c) x = magnitude(rng) * (rng() % 2 ? 1 : -1);
      MetricSeries s;
      s.quantum_s = 1;
      s.points.reserve(kSamples);
      for (int i = 0; i < kSamples; ++i) {
        const double x = static_cast<double>(i) / (kSamples - 1);
        double y = 0;
        for (int k = degree; k >= 0; --k) y = y * x + c[k];
        s.points.push_back({i, y * (1.0 + 0.05 * gauss(rng))});
      }
      const auto fit = polyfit(s, degree);
      bool ok = fit.coefficients.size() == c.size();
      for (std::size_t k = 0; ok && k < c.size(); ++k) {
        const double rel = std::abs(fit.coefficients[k] - c[k]) / std::abs(c[k]);
        worst = std::max(worst, rel);
        ok = rel <= 0.05;
      }
      ++fits;
      good += ok;
    }
  }
  v.check(good == fits, "polyfit " + std::to_string(good) + "/" + std::to_string(fits) +
                            " generators within 5% (worst " + fmt_d(worst * 100, 2) + "%)");

  bool identity = true;
  for (double value : {0.0, 1.0, 86.0, 0.1, 1234.5678, -3.3}) {
    for (std::int64_t w : {1, 7, 160, 10000}) {
      MetricSeries s;
      s.quantum_s = 3;
      for (int i = 0; i < 500; ++i) s.points.push_back({i * 3, value});
      for (const auto& p : moving_average(s, w).series.points) {
        identity = identity && std::abs(p.value - value) <= 1e-12 * std::max(1.0, std::abs(value));
      }
    }
  }
  v.check(identity, "moving average of constants is the identity");

  TempDir dir;
  std::ostringstream text;
  std::mt19937_64 gen(9);
  for (int i = 0; i < 3; ++i) {
    const auto s = random_set(gen);
    for (const auto& r : s.records) text << format_record(r) << '\n';
  }
  text << "FAIL 2 1000 disconnect\n";
  testing_support::write_file(dir / "rec.txt", text.str());
  bool same = true;
  for (const char* out : {"a", "b"}) {
    same = same && testing_support::run_diperf({"analyze", "--records",
                                                (dir / "rec.txt").string(), "--out-dir",
                                                (dir / out).string()}) == 0;
  }
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    const auto twin = dir / "b" / e.path().filename();
    same = same && fs::exists(twin) &&
           testing_support::read_file(e.path()) == testing_support::read_file(twin);
  }
  v.check(same && files > 0, "analyze reruns byte-identical over " + std::to_string(files) +
                                 " files");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(spdlog::level::err);
  ::signal(SIGPIPE, SIG_IGN);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"saturation plateau and capacity", saturation_run},
      {"overload rejection and recovery", overload_run},
      {"clock reconciliation", clock_reconciliation},
      {"metric oracle equivalence", metric_oracles},
      {"fairness and utilization", fairness_properties},
      {"tester behaviour and disconnect", tester_behaviour},
      {"http fixed-delay run", http_run},
      {"fit sanity and determinism", fit_sanity},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    std::string detail;
    for (const auto& note : v.notes) detail += (detail.empty() ? "" : "; ") + note;
    std::cout << "criterion " << n << " " << (v.pass ? "PASS" : "FAIL") << " ["
              << criteria[i].first << "] " << detail << std::endl;
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
