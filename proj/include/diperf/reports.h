#pragma once

// Report bundle written by `analyze`: per-series CSVs, per-client stats,
// fitted trend coefficients, a run summary, and gnuplot-ready data files
// laid out like the timeline, utilization and bubble figures.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "diperf/analysis.h"

namespace diperf {

struct AnalyzeOptions {
  std::int64_t quantum_throughput_s = 60;
  std::int64_t quantum_load_s = 1;
  std::int64_t quantum_response_s = 60;
  std::int64_t ma_window_s = 160;
  int poly_degree = 6;
  NormalizeOptions normalize;
  std::optional<TimeWindow> peak_window;
};

struct BubblePoint {
  int tester_id = 0;
  double mean_aggregate_load = 0.0;
  std::int64_t jobs_completed = 0;
};

// x = tester id, y = mean load over the tester's active window, size = jobs.
std::vector<BubblePoint> bubble_data(std::span<const ClientStats> stats,
                                     const MetricSeries& load);

void write_series_csv(std::ostream& out, const MetricSeries& series);
void write_client_stats_csv(std::ostream& out, std::span<const ClientStats> stats);
void write_bubble_csv(std::ostream& out, std::span<const BubblePoint> bubbles);

struct ReportBundle {
  std::filesystem::path directory;
  std::vector<std::filesystem::path> files;
  NormalizeDiagnostics diagnostics;
  MetricSeries throughput;
  MetricSeries load;
  MetricSeries response;
  std::vector<ClientStats> stats;
  std::optional<SaturationEstimate> saturation;
};

// Analyses a record set and writes every report file into out_dir.
// Output is a pure function of the inputs (byte-identical reruns).
ReportBundle write_report_bundle(const RecordSet& records, const AnalyzeOptions& options,
                                 const std::filesystem::path& out_dir);

}  // namespace diperf
