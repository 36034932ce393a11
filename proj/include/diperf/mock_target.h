#pragma once

// Desk-scale target services used in place of a real deployment: a FIFO
// multi-slot queueing service speaking a one-line protocol, its one-shot
// client, a fixed-delay HTTP endpoint with a wget-like client, and a no-op
// target for client overhead calibration.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>

#include "diperf/model.h"
#include "diperf/net.h"

namespace httplib {
class Server;
}

namespace diperf {

enum class ServiceTimes { kDeterministic, kExponential };

struct ServiceModel {
  int slots = 1;
  Millis base_service{700};
  // Maximum number of waiting requests; nullopt means unbounded.
  std::optional<std::size_t> queue_capacity;
  ServiceTimes times = ServiceTimes::kDeterministic;
  std::uint64_t seed = 1;
};

ServiceModel validate(const ServiceModel& model);

// FIFO admission to a fixed number of service slots.
class SlotScheduler {
 public:
  explicit SlotScheduler(const ServiceModel& model);

  // Returns a ticket, or nullopt when every slot is busy and the queue is full.
  std::optional<std::uint64_t> admit();
  // Blocks until the ticket reaches a free slot, or returns false on shutdown.
  bool acquire(std::uint64_t ticket);
  void release();
  void shutdown();

  int busy() const;
  std::size_t waiting() const;

 private:
  const ServiceModel model_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::uint64_t> queue_;
  std::uint64_t next_ticket_ = 0;
  int busy_ = 0;
  bool shutdown_ = false;
};

struct ServiceCounters {
  std::uint64_t completed = 0;
  std::uint64_t rejected = 0;
  // Integral of requests-in-service over time, in slot-milliseconds.
  std::int64_t busy_slot_ms = 0;
};

// Wire: client sends "JOB\n"; the service answers "DONE\n" once the request
// has waited its turn and been served, or "BUSY\n" when the queue is full.
class MockService {
 public:
  explicit MockService(ServiceModel model);
  ~MockService();
  MockService(const MockService&) = delete;
  MockService& operator=(const MockService&) = delete;

  void start(const HostPort& listen);
  void stop();
  HostPort address() const { return address_; }
  ServiceCounters counters() const;

 private:
  void accept_loop();
  void handle(UniqueFd conn);
  Millis draw_service_time();

  ServiceModel model_;
  SlotScheduler scheduler_;
  TcpListener listener_;
  HostPort address_;
  StopSignal stop_;
  std::thread acceptor_;
  std::mutex workers_mutex_;
  std::list<std::thread> workers_;
  std::mutex rng_mutex_;
  std::mt19937_64 rng_;
  mutable std::mutex counters_mutex_;
  ServiceCounters counters_;
};

// Exit codes of the one-shot mock client.
inline constexpr int kClientOk = 0;
inline constexpr int kClientConnectFailed = 1;
inline constexpr int kClientRejected = 2;
inline constexpr int kClientProtocolError = 3;

int mock_client(const HostPort& target, Millis timeout);

// GET <path> answered with 200 after a fixed delay.
class HttpDelayService {
 public:
  explicit HttpDelayService(Millis delay, std::string path = "/cgi");
  ~HttpDelayService();
  HttpDelayService(const HttpDelayService&) = delete;
  HttpDelayService& operator=(const HttpDelayService&) = delete;

  void start(const HostPort& listen);
  void stop();
  HostPort address() const { return address_; }
  std::uint64_t served() const { return served_.load(); }

 private:
  Millis delay_;
  std::string path_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  HostPort address_;
  std::atomic<std::uint64_t> served_{0};
};

// wget-like: exit 0 on HTTP 200, nonzero otherwise.
int http_get(const std::string& url, Millis timeout);

// Answers any request immediately: "DONE\n" for line requests, an empty
// 200 response for HTTP. Used to measure a client's own execution cost.
class NoopTarget {
 public:
  NoopTarget();
  ~NoopTarget();
  NoopTarget(const NoopTarget&) = delete;
  NoopTarget& operator=(const NoopTarget&) = delete;
  HostPort address() const { return address_; }

 private:
  void loop();

  TcpListener listener_;
  HostPort address_;
  StopSignal stop_;
  std::thread thread_;
};

}  // namespace diperf
