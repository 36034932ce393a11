#include "diperf/cli.h"

#include <csignal>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "diperf/controller.h"
#include "diperf/mock_target.h"
#include "diperf/process.h"
#include "diperf/reports.h"
#include "diperf/tester.h"
#include "diperf/timesync.h"
#include "diperf/transport.h"

namespace diperf {

namespace {

Millis seconds(double s) { return Millis(std::llround(s * 1000.0)); }

void setup_logging() {
  // stdout may be a control channel, so logs always go to stderr.
  auto logger = spdlog::stderr_color_mt("diperf");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");
  const char* level = std::getenv("DIPERF_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
}

// Blocks until SIGINT or SIGTERM. The signals must already be blocked.
void wait_for_termination() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
}

void block_termination_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

void announce(const HostPort& address) {
  std::cout << "LISTENING " << address.to_string() << std::endl;
}

std::unique_ptr<Clock> make_clock(std::int64_t skew_ms) {
  if (skew_ms == 0) return std::make_unique<SystemClock>();
  return std::make_unique<SkewedClock>(skew_ms);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int run_cli(int argc, char** argv) {
  std::signal(SIGPIPE, SIG_IGN);
  setup_logging();

  CLI::App app{"diperf: distributed performance testing"};
  app.require_subcommand(1);

  // timeserver
  auto* ts = app.add_subcommand("timeserver", "serve global time to testers");
  std::string ts_listen = "127.0.0.1:0";
  std::int64_t ts_skew = 0;
  ts->add_option("--listen", ts_listen, "host:port to bind");
  ts->add_option("--clock-skew-ms", ts_skew, "offset added to the system clock");

  // tester
  auto* tester = app.add_subcommand("tester", "run the tester agent");
  std::string t_controller;
  std::string t_desc;
  std::string t_out;
  TesterOptions t_opts;
  std::int64_t t_heartbeat_ms = t_opts.heartbeat.count();
  std::int64_t t_skew = 0;
  std::int64_t t_overhead = -1;
  tester->add_option("--controller", t_controller, "stdio or host:port");
  tester->add_option("--id", t_opts.tester_id, "tester id");
  tester->add_option("--heartbeat-ms", t_heartbeat_ms, "expected controller PING period");
  tester->add_option("--desc", t_desc, "test description JSON (offline mode)");
  tester->add_option("--out", t_out, "record file (offline mode)");
  tester->add_option("--calibrate", t_opts.calibrate_runs,
                     "measure client overhead with N runs against a no-op target");
  tester->add_option("--overhead-ms", t_overhead, "known client overhead");
  tester->add_option("--clock-skew-ms", t_skew, "offset added to the local clock");

  // controller
  auto* ctl = app.add_subcommand("controller", "run an experiment");
  std::string c_targets;
  std::string c_client;
  std::string c_target_service;
  std::string c_timeserver;
  std::string c_out;
  ExperimentPlan plan;
  double c_ramp = 25;
  double c_duration = 3600;
  double c_interval = 1;
  double c_sync = 300;
  double c_timeout = 120;
  double c_max_rate = 0;
  double c_heartbeat = 15;
  double c_probe_timeout = 10;
  std::int64_t c_live = 0;
  int c_calibrate = 0;
  std::string c_staging;
  ctl->add_option("--targets", c_targets, "nodes file")->required();
  ctl->add_option("--client", c_client, "client executable to distribute")->required();
  ctl->add_option("--client-args", plan.client_args,
                  "arguments after the client path; {target} is substituted");
  ctl->add_option("--target-service", c_target_service, "host:port under test")->required();
  ctl->add_option("--timeserver", c_timeserver, "host:port of the time server");
  ctl->add_option("--ramp", c_ramp, "seconds between tester starts");
  ctl->add_option("--duration", c_duration, "seconds each tester runs");
  ctl->add_option("--interval", c_interval, "minimum seconds between client starts");
  ctl->add_option("--sync", c_sync, "clock resync period, seconds");
  ctl->add_option("--timeout", c_timeout, "client timeout, seconds");
  ctl->add_option("--max-rate", c_max_rate, "max invocations per second per tester");
  ctl->add_option("--out", c_out, "record file")->required();
  ctl->add_option("--fail-after", plan.fail_after,
                  "drop a tester after N consecutive failed invocations");
  ctl->add_option("--heartbeat", c_heartbeat, "PING period, seconds");
  ctl->add_option("--probe-timeout", c_probe_timeout, "availability probe timeout, seconds");
  ctl->add_option("--live", c_live, "print live CSV every N seconds");
  ctl->add_option("--calibrate", c_calibrate, "testers calibrate client overhead with N runs");
  ctl->add_option("--staging-dir", c_staging, "staging root on every node");
  ctl->add_option("--ssh", plan.transport.ssh_program, "remote shell program");
  ctl->add_option("--scp", plan.transport.scp_program, "remote copy program");

  // mock-service
  auto* ms = app.add_subcommand("mock-service", "slot-limited line service");
  std::string ms_listen = "127.0.0.1:0";
  ServiceModel model;
  std::int64_t ms_service = model.base_service.count();
  std::string ms_queue = "unbounded";
  bool ms_exp = false;
  ms->add_option("--listen", ms_listen, "host:port to bind");
  ms->add_option("--slots", model.slots, "concurrent service slots");
  ms->add_option("--service-ms", ms_service, "service time per job");
  ms->add_option("--queue", ms_queue, "unbounded or max waiting jobs");
  ms->add_flag("--exponential", ms_exp, "exponential service times");
  ms->add_option("--seed", model.seed, "service time seed");

  auto* mc = app.add_subcommand("mock-client", "one JOB against a mock service");
  std::string mc_target;
  std::int64_t mc_timeout = 120000;
  mc->add_option("target", mc_target, "host:port")->required();
  mc->add_option("--timeout-ms", mc_timeout, "give up after this long");

  auto* hs = app.add_subcommand("http-service", "fixed-delay HTTP endpoint");
  std::string hs_listen = "127.0.0.1:0";
  std::int64_t hs_delay = 100;
  std::string hs_path = "/cgi";
  hs->add_option("--listen", hs_listen, "host:port to bind");
  hs->add_option("--delay-ms", hs_delay, "delay before answering");
  hs->add_option("--path", hs_path, "served path");

  auto* hg = app.add_subcommand("http-get", "fetch a URL; exit 0 on HTTP 200");
  std::string hg_url;
  std::int64_t hg_timeout = 120000;
  hg->add_option("url", hg_url, "http://host:port/path or host:port")->required();
  hg->add_option("--timeout-ms", hg_timeout, "give up after this long");

  auto* an = app.add_subcommand("analyze", "compute metrics from a record file");
  std::string an_records;
  std::string an_out;
  AnalyzeOptions an_opts;
  an->add_option("--records", an_records, "record file")->required();
  an->add_option("--out-dir", an_out, "output directory")->required();
  an->add_option("--quantum-throughput", an_opts.quantum_throughput_s, "seconds");
  an->add_option("--quantum-load", an_opts.quantum_load_s, "seconds");
  an->add_option("--quantum-response", an_opts.quantum_response_s, "seconds");
  an->add_option("--ma-window", an_opts.ma_window_s, "moving average window, seconds");
  an->add_option("--poly-degree", an_opts.poly_degree, "polynomial degree");
  an->add_option("--latency-legs", an_opts.normalize.latency_legs,
                 "network latency legs removed per request");

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    std::cerr << app.help();
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (*ts) {
      block_termination_signals();
      auto clock = make_clock(ts_skew);
      TimeServer server(*clock);
      server.start(HostPort::parse(ts_listen));
      announce(server.address());
      wait_for_termination();
      server.stop();
      return 0;
    }

    if (*tester) {
      auto clock = make_clock(t_skew);
      t_opts.heartbeat = Millis(t_heartbeat_ms);
      if (t_overhead >= 0) t_opts.client_overhead_ms = t_overhead;
      if (!t_controller.empty()) {
        if (t_controller == "stdio") {
          LineChannel channel(UniqueFd(dup(0)), UniqueFd(dup(1)));
          return run_tester_channel(channel, t_opts, *clock);
        }
        auto fd = connect_tcp(HostPort::parse(t_controller), Millis(10000));
        UniqueFd write_fd(dup(fd.get()));
        LineChannel channel(std::move(fd), std::move(write_fd));
        return run_tester_channel(channel, t_opts, *clock);
      }
      if (t_desc.empty() || t_out.empty()) {
        std::cerr << "error: tester needs --controller, or --desc and --out\n\n"
                  << tester->help();
        return 2;
      }
      const auto desc = validate(description_from_json(read_file(t_desc)));
      std::ofstream out(t_out);
      if (!out) throw Error("cannot write " + t_out);
      return run_tester_offline(desc, t_opts, *clock, out);
    }

    if (*ctl) {
      plan.description.experiment_duration = seconds(c_duration);
      plan.description.invocation_interval = seconds(c_interval);
      plan.description.sync_interval = seconds(c_sync);
      plan.description.client_timeout = seconds(c_timeout);
      plan.description.target_address = c_target_service;
      plan.description.timeserver_address = c_timeserver;
      if (c_max_rate > 0) plan.description.max_invocation_rate = c_max_rate;
      plan.candidates = load_nodes_file(c_targets);
      plan.client_payload = c_client;
      plan.output_path = c_out;
      plan.ramp_delay = seconds(c_ramp);
      plan.heartbeat = seconds(c_heartbeat);
      plan.probe_timeout = seconds(c_probe_timeout);
      if (!c_staging.empty()) plan.transport.staging_root = c_staging;
      if (c_calibrate > 0) {
        plan.tester_command = {self_executable(), "tester", "--calibrate",
                               std::to_string(c_calibrate)};
      }
      if (c_live > 0) {
        plan.live_quantum_s = c_live;
        plan.live_out = &std::cout;
      }
      const auto summary = run_experiment(plan);
      std::cerr << summary.to_text();
      return 0;
    }

    if (*ms) {
      block_termination_signals();
      model.base_service = Millis(ms_service);
      if (ms_queue != "unbounded") {
        model.queue_capacity = static_cast<std::size_t>(std::stoull(ms_queue));
      }
      if (ms_exp) model.times = ServiceTimes::kExponential;
      MockService service(validate(model));
      service.start(HostPort::parse(ms_listen));
      announce(service.address());
      wait_for_termination();
      service.stop();
      const auto c = service.counters();
      spdlog::info("mock-service: completed {} rejected {}", c.completed, c.rejected);
      return 0;
    }

    if (*mc) return mock_client(HostPort::parse(mc_target), Millis(mc_timeout));

    if (*hs) {
      block_termination_signals();
      HttpDelayService service(Millis(hs_delay), hs_path);
      service.start(HostPort::parse(hs_listen));
      announce(service.address());
      wait_for_termination();
      service.stop();
      return 0;
    }

    if (*hg) return http_get(hg_url, Millis(hg_timeout));

    if (*an) {
      const auto set = load_record_file(an_records);
      const auto bundle = write_report_bundle(set, an_opts, an_out);
      if (bundle.diagnostics.missing_offset > 0 || bundle.diagnostics.clamped_response > 0) {
        spdlog::warn("analyze: {} records without offset, {} responses clamped",
                     bundle.diagnostics.missing_offset, bundle.diagnostics.clamped_response);
      }
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace diperf
