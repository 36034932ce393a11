#include "diperf/analysis.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <set>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace diperf {

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

void require_quantum(std::int64_t quantum_s) {
  if (quantum_s <= 0) throw ValidationError("quantum", "must be > 0");
}

}  // namespace

NormalizedRecords normalize(std::span<const InvocationRecord> records,
                            const OffsetHistory& offsets, const NormalizeOptions& options) {
  NormalizedRecords out;
  out.records.reserve(records.size());
  for (const auto& r : records) {
    const auto* offset = offsets.lookup(r.tester_id, r.start_local_ms);
    if (offset == nullptr) {
      ++out.diagnostics.missing_offset;
      continue;
    }
    GlobalRecord g;
    g.tester_id = r.tester_id;
    g.sequence = r.sequence;
    g.start_ms = to_global(r.start_local_ms, *offset);
    g.end_ms = to_global(r.end_local_ms, *offset);
    g.outcome = r.outcome;
    if (r.outcome == Outcome::kSuccess) {
      std::int64_t response = r.duration_ms() -
                              options.latency_legs * r.latency_ms.value_or(0) -
                              r.overhead_ms.value_or(0);
      if (response < 0) {
        ++out.diagnostics.clamped_response;
        response = 0;
      }
      g.response_ms = response;
    }
    out.records.push_back(g);
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const GlobalRecord& a, const GlobalRecord& b) {
              return std::tie(a.start_ms, a.tester_id, a.sequence) <
                     std::tie(b.start_ms, b.tester_id, b.sequence);
            });
  return out;
}

MetricSeries throughput_series(std::span<const GlobalRecord> records, std::int64_t quantum_s) {
  require_quantum(quantum_s);
  MetricSeries series{quantum_s, {}};
  std::map<std::int64_t, std::int64_t> counts;
  for (const auto& r : records) {
    if (r.outcome != Outcome::kSuccess) continue;
    ++counts[floor_div(r.end_ms, quantum_s * 1000)];
  }
  if (counts.empty()) return series;
  for (auto k = counts.begin()->first; k <= counts.rbegin()->first; ++k) {
    auto it = counts.find(k);
    series.points.push_back(
        {k * quantum_s, it == counts.end() ? 0.0 : static_cast<double>(it->second)});
  }
  return series;
}

MetricSeries load_series(std::span<const GlobalRecord> records, std::int64_t quantum_s) {
  require_quantum(quantum_s);
  MetricSeries series{quantum_s, {}};
  if (records.empty()) return series;
  const std::int64_t step = quantum_s * 1000;
  std::int64_t min_start = std::numeric_limits<std::int64_t>::max();
  std::int64_t max_end = std::numeric_limits<std::int64_t>::min();
  for (const auto& r : records) {
    min_start = std::min(min_start, r.start_ms);
    max_end = std::max(max_end, r.end_ms);
  }
  const std::int64_t first = floor_div(min_start, step);
  const std::int64_t last = std::max(first, floor_div(max_end - 1, step));
  std::vector<std::int64_t> delta(static_cast<std::size_t>(last - first + 2), 0);
  for (const auto& r : records) {
    // Instants k * step with start <= k * step < end.
    const std::int64_t lo = ceil_div(r.start_ms, step);
    const std::int64_t hi = ceil_div(r.end_ms, step) - 1;
    if (hi < lo) continue;
    delta[static_cast<std::size_t>(lo - first)] += 1;
    delta[static_cast<std::size_t>(hi - first + 1)] -= 1;
  }
  std::int64_t running = 0;
  for (std::int64_t k = first; k <= last; ++k) {
    running += delta[static_cast<std::size_t>(k - first)];
    series.points.push_back({k * quantum_s, static_cast<double>(running)});
  }
  return series;
}

MetricSeries response_series(std::span<const GlobalRecord> records, std::int64_t quantum_s) {
  require_quantum(quantum_s);
  std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> buckets;
  for (const auto& r : records) {
    if (r.outcome != Outcome::kSuccess || !r.response_ms) continue;
    auto& [sum, count] = buckets[floor_div(r.end_ms, quantum_s * 1000)];
    sum += *r.response_ms;
    ++count;
  }
  MetricSeries series{quantum_s, {}};
  for (const auto& [k, acc] : buckets) {
    series.points.push_back(
        {k * quantum_s, static_cast<double>(acc.first) / static_cast<double>(acc.second)});
  }
  return series;
}

std::vector<std::pair<int, TimeWindow>> active_windows(std::span<const GlobalRecord> records) {
  std::map<int, TimeWindow> windows;
  for (const auto& r : records) {
    auto [it, inserted] = windows.try_emplace(r.tester_id, TimeWindow{r.start_ms, r.end_ms});
    if (!inserted) {
      it->second.start_ms = std::min(it->second.start_ms, r.start_ms);
      it->second.end_ms = std::max(it->second.end_ms, r.end_ms);
    }
  }
  return {windows.begin(), windows.end()};
}

std::optional<TimeWindow> detect_peak_window(std::span<const GlobalRecord> records) {
  const auto windows = active_windows(records);
  if (windows.empty()) return std::nullopt;
  // Closed windows become half-open [start, end + 1) in integer milliseconds.
  std::map<std::int64_t, int> events;
  for (const auto& [id, w] : windows) {
    events[w.start_ms] += 1;
    events[w.end_ms + 1] -= 1;
  }
  int max_active = 0;
  {
    int active = 0;
    for (const auto& [t, d] : events) {
      active += d;
      max_active = std::max(max_active, active);
    }
  }
  std::optional<TimeWindow> best;
  std::int64_t run_start = 0;
  bool in_run = false;
  int active = 0;
  for (const auto& [t, d] : events) {
    const bool was_max = active == max_active;
    active += d;
    const bool is_max = active == max_active;
    if (!was_max && is_max) {
      run_start = t;
      in_run = true;
    }
    if (was_max && !is_max && in_run) {
      TimeWindow w{run_start, t - 1};
      if (!best || (w.end_ms - w.start_ms) > (best->end_ms - best->start_ms)) best = w;
      in_run = false;
    }
  }
  return best;
}

std::vector<ClientStats> client_stats(std::span<const GlobalRecord> records,
                                      std::optional<TimeWindow> peak_window) {
  std::vector<ClientStats> stats;
  if (records.empty()) return stats;
  if (!peak_window) peak_window = detect_peak_window(records);
  std::vector<std::int64_t> all_ends;
  std::map<int, std::vector<std::int64_t>> own_ends;
  for (const auto& r : records) {
    if (r.outcome != Outcome::kSuccess) continue;
    all_ends.push_back(r.end_ms);
    own_ends[r.tester_id].push_back(r.end_ms);
  }
  std::sort(all_ends.begin(), all_ends.end());
  for (auto& [id, ends] : own_ends) std::sort(ends.begin(), ends.end());
  auto count_in = [](const std::vector<std::int64_t>& sorted, const TimeWindow& w) {
    if (w.end_ms < w.start_ms) return std::int64_t{0};
    auto lo = std::lower_bound(sorted.begin(), sorted.end(), w.start_ms);
    auto hi = std::upper_bound(sorted.begin(), sorted.end(), w.end_ms);
    return static_cast<std::int64_t>(hi - lo);
  };
  static const std::vector<std::int64_t> kNone;
  for (const auto& [id, active] : active_windows(records)) {
    ClientStats s;
    s.tester_id = id;
    s.active_start_ms = active.start_ms;
    s.active_end_ms = active.end_ms;
    const TimeWindow w{std::max(active.start_ms, peak_window->start_ms),
                       std::min(active.end_ms, peak_window->end_ms)};
    auto own = own_ends.find(id);
    s.jobs_completed = count_in(own == own_ends.end() ? kNone : own->second, w);
    const auto total = count_in(all_ends, w);
    s.utilization = Ratio{s.jobs_completed, total > 0 ? total : 1};
    if (s.jobs_completed > 0) s.fairness = total;
    stats.push_back(s);
  }
  return stats;
}

double PolynomialModel::evaluate(double t_s) const {
  const double x = (t_s - origin_s) / span_s;
  double acc = 0.0;
  for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) acc = acc * x + *it;
  return acc;
}

SmoothedSeries moving_average(const MetricSeries& series, std::int64_t window_s) {
  if (window_s <= 0) throw ValidationError("window", "must be > 0");
  SmoothedSeries out{MovingAverageModel{window_s}, MetricSeries{series.quantum_s, {}}};
  const auto& pts = series.points;
  std::size_t lo = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (pts[lo].quantum_start_s <= pts[i].quantum_start_s - window_s) ++lo;
    // Summed afresh per point so the result is order-independent.
    double sum = 0.0;
    for (std::size_t j = lo; j <= i; ++j) sum += pts[j].value;
    out.series.points.push_back({pts[i].quantum_start_s, sum / static_cast<double>(i - lo + 1)});
  }
  return out;
}

PolynomialModel polyfit(const MetricSeries& series, int degree) {
  if (degree < 0) throw ValidationError("degree", "must be >= 0");
  const auto n = series.points.size();
  if (n < static_cast<std::size_t>(degree) + 1) {
    throw Error(fmt::format("polyfit: {} points cannot determine a degree-{} polynomial", n,
                            degree));
  }
  PolynomialModel model;
  model.degree = degree;
  const double t_min = static_cast<double>(series.points.front().quantum_start_s);
  const double t_max = static_cast<double>(series.points.back().quantum_start_s);
  model.origin_s = t_min;
  model.span_s = t_max > t_min ? t_max - t_min : 1.0;

  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), degree + 1);
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double x =
        (static_cast<double>(series.points[i].quantum_start_s) - model.origin_s) / model.span_s;
    double p = 1.0;
    for (int k = 0; k <= degree; ++k) {
      a(static_cast<Eigen::Index>(i), k) = p;
      p *= x;
    }
    b(static_cast<Eigen::Index>(i)) = series.points[i].value;
  }
  const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
  model.coefficients.assign(c.data(), c.data() + c.size());
  for (double v : model.coefficients) {
    if (!std::isfinite(v)) throw Error("polyfit: non-finite coefficient");
  }
  const Eigen::VectorXd residual = a * c - b;
  model.rms_residual = std::sqrt(residual.squaredNorm() / static_cast<double>(n));
  return model;
}

SaturationEstimate saturation_estimate(const MetricSeries& throughput, const MetricSeries& load,
                                       double gain_threshold) {
  if (throughput.empty() || load.empty()) {
    throw Error("saturation_estimate: both series must be non-empty");
  }
  std::map<std::int64_t, double> load_at;
  for (const auto& p : load.points) load_at[p.quantum_start_s] = p.value;

  std::map<std::int64_t, std::pair<double, int>> by_level;
  for (const auto& p : throughput.points) {
    double sum = 0.0;
    int samples = 0;
    for (auto t = p.quantum_start_s; t < p.quantum_start_s + throughput.quantum_s;
         t += load.quantum_s) {
      auto it = load_at.find(t);
      sum += it == load_at.end() ? 0.0 : it->second;
      ++samples;
    }
    const auto level = std::llround(sum / std::max(samples, 1));
    if (level <= 0) continue;
    auto& acc = by_level[level];
    acc.first += p.value / static_cast<double>(throughput.quantum_s);
    ++acc.second;
  }
  SaturationEstimate out;
  for (const auto& [level, acc] : by_level) {
    out.curve.push_back({static_cast<double>(level), acc.first / acc.second});
  }
  if (out.curve.empty()) {
    throw Error("saturation_estimate: series do not overlap in time");
  }
  double base_slope = out.curve.front().throughput / out.curve.front().load;
  if (base_slope <= 0.0) {
    for (const auto& p : out.curve) base_slope = std::max(base_slope, p.throughput / p.load);
  }
  const double limit = gain_threshold * base_slope;
  // Gain from level i to the mean of every higher level: averaging over the
  // rest of the curve keeps one noisy quantum from moving the knee.
  double later_t = 0.0;
  double later_l = 0.0;
  for (const auto& p : out.curve) {
    later_t += p.throughput;
    later_l += p.load;
  }
  for (std::size_t i = 0; i + 1 < out.curve.size(); ++i) {
    later_t -= out.curve[i].throughput;
    later_l -= out.curve[i].load;
    const double n = static_cast<double>(out.curve.size() - i - 1);
    const double gain =
        (later_t / n - out.curve[i].throughput) / (later_l / n - out.curve[i].load);
    const bool flat = base_slope <= 0.0 || gain < limit;
    if (flat) {
      out.saturated = true;
      out.capacity = out.curve[i].load;
      return out;
    }
  }
  out.capacity = out.curve.back().load;
  return out;
}

RecordSet read_records(std::istream& in) {
  RecordSet set;
  std::set<int> testers;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty() || fields[0].front() == '#') continue;
    try {
      if (fields[0] == "REC") {
        set.records.push_back(parse_record(line));
        testers.insert(set.records.back().tester_id);
      } else if (fields[0] == "FAIL" && fields.size() >= 3) {
        FailureEvent f;
        f.tester_id = std::stoi(std::string(fields[1]));
        f.time_ms = std::stoll(std::string(fields[2]));
        for (std::size_t i = 3; i < fields.size(); ++i) {
          if (i > 3) f.reason += ' ';
          f.reason += fields[i];
        }
        set.failures.push_back(std::move(f));
      } else {
        throw ParseError(fmt::format("unrecognised line '{}'", line));
      }
    } catch (const std::logic_error& e) {
      throw ParseError(fmt::format("line {}: {}", line_no, e.what()));
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  for (int id : testers) {
    set.offsets.add(ClockOffset{id, 0, 0, std::numeric_limits<std::int64_t>::min()});
  }
  return set;
}

RecordSet load_record_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open record file {}", path.string()));
  return read_records(in);
}

}  // namespace diperf
