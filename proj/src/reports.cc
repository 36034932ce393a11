#include "diperf/reports.h"

#include <fstream>
#include <map>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace diperf {

namespace fs = std::filesystem;

std::vector<BubblePoint> bubble_data(std::span<const ClientStats> stats,
                                     const MetricSeries& load) {
  std::vector<BubblePoint> out;
  for (const auto& s : stats) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (const auto& p : load.points) {
      const auto t_ms = p.quantum_start_s * 1000;
      if (t_ms >= s.active_start_ms && t_ms <= s.active_end_ms) {
        sum += p.value;
        ++n;
      }
    }
    out.push_back({s.tester_id, n > 0 ? sum / static_cast<double>(n) : 0.0, s.jobs_completed});
  }
  return out;
}

void write_series_csv(std::ostream& out, const MetricSeries& series) {
  out << "time,value\n";
  for (const auto& p : series.points) fmt::print(out, "{},{}\n", p.quantum_start_s, p.value);
}

void write_client_stats_csv(std::ostream& out, std::span<const ClientStats> stats) {
  out << "tester_id,jobs,utilization,fairness\n";
  for (const auto& s : stats) {
    fmt::print(out, "{},{},{},{}\n", s.tester_id, s.jobs_completed, s.utilization.value(),
               s.fairness ? std::to_string(*s.fairness) : std::string("-"));
  }
}

void write_bubble_csv(std::ostream& out, std::span<const BubblePoint> bubbles) {
  out << "tester_id,mean_aggregate_load,jobs_completed\n";
  for (const auto& b : bubbles) {
    fmt::print(out, "{},{},{}\n", b.tester_id, b.mean_aggregate_load, b.jobs_completed);
  }
}

namespace {

class BundleWriter {
 public:
  explicit BundleWriter(ReportBundle& bundle) : bundle_(bundle) {}

  std::ofstream open(const std::string& name) {
    const auto path = bundle_.directory / name;
    std::ofstream out(path, std::ios::out | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    bundle_.files.push_back(path);
    return out;
  }

 private:
  ReportBundle& bundle_;
};

std::optional<PolynomialModel> try_polyfit(const MetricSeries& series, int degree,
                                           std::string& why) {
  try {
    return polyfit(series, degree);
  } catch (const Error& e) {
    why = e.what();
    return std::nullopt;
  }
}

void write_fit(std::ostream& out, const std::string& name, std::int64_t window_s,
               const std::optional<PolynomialModel>& poly, const std::string& why) {
  fmt::print(out, "series {} moving_average window_s {}\n", name, window_s);
  if (!poly) {
    fmt::print(out, "series {} polynomial unavailable ({})\n", name, why);
    return;
  }
  fmt::print(out, "series {} polynomial degree {} origin_s {} span_s {} rms_residual {}",
             name, poly->degree, poly->origin_s, poly->span_s, poly->rms_residual);
  out << " coefficients";
  for (double c : poly->coefficients) fmt::print(out, " {}", c);
  out << '\n';
}

// Gnuplot columns: elapsed seconds, raw value, moving average, polynomial.
void write_timeline(std::ostream& out, const std::string& label, const MetricSeries& raw,
                    const MetricSeries& smoothed, const std::optional<PolynomialModel>& poly,
                    std::int64_t origin_s) {
  fmt::print(out, "# elapsed_s {} {}_moving_average {}_polynomial\n", label, label, label);
  for (std::size_t i = 0; i < raw.points.size(); ++i) {
    const auto& p = raw.points[i];
    fmt::print(out, "{} {} {} ", p.quantum_start_s - origin_s, p.value,
               smoothed.points[i].value);
    if (poly) {
      fmt::print(out, "{}\n", poly->evaluate(static_cast<double>(p.quantum_start_s)));
    } else {
      out << "NaN\n";
    }
  }
}

}  // namespace

ReportBundle write_report_bundle(const RecordSet& set, const AnalyzeOptions& options,
                                 const fs::path& out_dir) {
  ReportBundle bundle;
  bundle.directory = out_dir;
  fs::create_directories(out_dir);
  BundleWriter writer(bundle);

  auto normalized = normalize(set.records, set.offsets, options.normalize);
  bundle.diagnostics = normalized.diagnostics;
  const auto& records = normalized.records;
  bundle.throughput = throughput_series(records, options.quantum_throughput_s);
  bundle.load = load_series(records, options.quantum_load_s);
  bundle.response = response_series(records, options.quantum_response_s);
  bundle.stats = client_stats(records, options.peak_window);

  const auto throughput_ma = moving_average(bundle.throughput, options.ma_window_s).series;
  const auto response_ma = moving_average(bundle.response, options.ma_window_s).series;
  const auto load_ma = moving_average(bundle.load, options.ma_window_s).series;

  {
    auto out = writer.open("throughput.csv");
    write_series_csv(out, bundle.throughput);
  }
  {
    auto out = writer.open("throughput_ma.csv");
    write_series_csv(out, throughput_ma);
  }
  {
    auto out = writer.open("load.csv");
    write_series_csv(out, bundle.load);
  }
  {
    auto out = writer.open("load_ma.csv");
    write_series_csv(out, load_ma);
  }
  {
    auto out = writer.open("response.csv");
    write_series_csv(out, bundle.response);
  }
  {
    auto out = writer.open("response_ma.csv");
    write_series_csv(out, response_ma);
  }
  {
    auto out = writer.open("client_stats.csv");
    write_client_stats_csv(out, bundle.stats);
  }
  const auto bubbles = bubble_data(bundle.stats, bundle.load);
  {
    auto out = writer.open("bubble.csv");
    write_bubble_csv(out, bubbles);
  }

  std::string throughput_why;
  std::string response_why;
  std::string load_why;
  const auto throughput_poly =
      try_polyfit(bundle.throughput, options.poly_degree, throughput_why);
  const auto response_poly = try_polyfit(bundle.response, options.poly_degree, response_why);
  const auto load_poly = try_polyfit(bundle.load, options.poly_degree, load_why);
  {
    auto out = writer.open("fit.txt");
    write_fit(out, "throughput", options.ma_window_s, throughput_poly, throughput_why);
    write_fit(out, "response", options.ma_window_s, response_poly, response_why);
    write_fit(out, "load", options.ma_window_s, load_poly, load_why);
  }

  if (!bundle.throughput.empty() && !bundle.load.empty()) {
    try {
      bundle.saturation = saturation_estimate(bundle.throughput, bundle.load);
    } catch (const Error&) {
    }
  }

  const std::int64_t origin_s =
      records.empty() ? 0 : records.front().start_ms / 1000;
  {
    auto out = writer.open("fig_response.dat");
    write_timeline(out, "response_ms", bundle.response, response_ma, response_poly, origin_s);
  }
  {
    auto out = writer.open("fig_throughput.dat");
    write_timeline(out, "throughput", bundle.throughput, throughput_ma, throughput_poly,
                   origin_s);
  }
  {
    auto out = writer.open("fig_load.dat");
    write_timeline(out, "load", bundle.load, load_ma, load_poly, origin_s);
  }
  {
    auto out = writer.open("fig_utilization.dat");
    out << "# tester_id utilization fairness jobs\n";
    for (const auto& s : bundle.stats) {
      fmt::print(out, "{} {} {} {}\n", s.tester_id, s.utilization.value(),
                 s.fairness ? std::to_string(*s.fairness) : std::string("NaN"),
                 s.jobs_completed);
    }
  }
  {
    auto out = writer.open("fig_bubble.dat");
    out << "# tester_id mean_aggregate_load jobs_completed\n";
    for (const auto& b : bubbles) {
      fmt::print(out, "{} {} {}\n", b.tester_id, b.mean_aggregate_load, b.jobs_completed);
    }
  }

  {
    auto out = writer.open("summary.txt");
    std::map<Outcome, std::int64_t> by_outcome;
    for (const auto& r : records) ++by_outcome[r.outcome];
    fmt::print(out, "records {}\n", set.records.size());
    for (auto o : {Outcome::kSuccess, Outcome::kTimeout, Outcome::kStartFailure,
                   Outcome::kServiceError}) {
      fmt::print(out, "outcome {} {}\n", to_string(o), by_outcome[o]);
    }
    fmt::print(out, "missing_offset {}\nclamped_response {}\n",
               bundle.diagnostics.missing_offset, bundle.diagnostics.clamped_response);
    fmt::print(out, "tester_failures {}\n", set.failures.size());
    if (!records.empty()) {
      std::int64_t first = records.front().start_ms;
      std::int64_t last = first;
      for (const auto& r : records) last = std::max(last, r.end_ms);
      const auto successes = by_outcome[Outcome::kSuccess];
      fmt::print(out, "span_ms {}\n", last - first);
      if (successes > 0) {
        fmt::print(out, "ms_per_completed_job {}\n",
                   static_cast<double>(last - first) / static_cast<double>(successes));
      }
    }
    const auto peak = options.peak_window ? options.peak_window : detect_peak_window(records);
    if (peak) fmt::print(out, "peak_window_ms {} {}\n", peak->start_ms, peak->end_ms);
    if (bundle.saturation) {
      if (bundle.saturation->saturated) {
        fmt::print(out, "saturation_capacity_clients {}\n", bundle.saturation->capacity);
      } else {
        out << "saturation unsaturated\n";
      }
    }
  }
  return bundle;
}

}  // namespace diperf
