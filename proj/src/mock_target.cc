#include "diperf/mock_target.h"

#include <sys/socket.h>
#include <unistd.h>

#include <chrono>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

namespace diperf {

using SteadyClock = std::chrono::steady_clock;

ServiceModel validate(const ServiceModel& model) {
  if (model.slots < 1) throw ValidationError("slots", "must be >= 1");
  if (model.base_service.count() <= 0) {
    throw ValidationError("service_ms", "must be > 0");
  }
  return model;
}

SlotScheduler::SlotScheduler(const ServiceModel& model) : model_(validate(model)) {}

std::optional<std::uint64_t> SlotScheduler::admit() {
  std::lock_guard lock(mutex_);
  if (shutdown_) return std::nullopt;
  const auto in_system = static_cast<std::size_t>(busy_) + queue_.size();
  if (model_.queue_capacity &&
      in_system >= static_cast<std::size_t>(model_.slots) + *model_.queue_capacity) {
    return std::nullopt;
  }
  const auto ticket = next_ticket_++;
  queue_.push_back(ticket);
  return ticket;
}

bool SlotScheduler::acquire(std::uint64_t ticket) {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] {
    return shutdown_ || (busy_ < model_.slots && !queue_.empty() && queue_.front() == ticket);
  });
  if (shutdown_) return false;
  queue_.pop_front();
  ++busy_;
  // The next ticket may also find a free slot.
  cv_.notify_all();
  return true;
}

void SlotScheduler::release() {
  {
    std::lock_guard lock(mutex_);
    --busy_;
  }
  cv_.notify_all();
}

void SlotScheduler::shutdown() {
  {
    std::lock_guard lock(mutex_);
    shutdown_ = true;
  }
  cv_.notify_all();
}

int SlotScheduler::busy() const {
  std::lock_guard lock(mutex_);
  return busy_;
}

std::size_t SlotScheduler::waiting() const {
  std::lock_guard lock(mutex_);
  return queue_.size();
}

MockService::MockService(ServiceModel model)
    : model_(validate(model)), scheduler_(model_), rng_(model_.seed) {}

MockService::~MockService() { stop(); }

void MockService::start(const HostPort& listen) {
  listener_ = TcpListener::bind(listen);
  address_ = listener_.local_address();
  acceptor_ = std::thread([this] { accept_loop(); });
}

void MockService::stop() {
  if (!acceptor_.joinable()) return;
  stop_.raise();
  scheduler_.shutdown();
  acceptor_.join();
  std::lock_guard lock(workers_mutex_);
  for (auto& w : workers_) w.join();
  workers_.clear();
}

ServiceCounters MockService::counters() const {
  std::lock_guard lock(counters_mutex_);
  return counters_;
}

void MockService::accept_loop() {
  struct Finished {
    std::mutex mutex;
    std::vector<std::thread::id> ids;
  };
  auto finished = std::make_shared<Finished>();
  while (!stop_.raised()) {
    auto conn = listener_.accept(Millis(200), &stop_);
    {
      std::scoped_lock lock(workers_mutex_, finished->mutex);
      for (auto id : finished->ids) {
        auto it = std::find_if(workers_.begin(), workers_.end(),
                               [id](const std::thread& t) { return t.get_id() == id; });
        if (it != workers_.end()) {
          it->join();
          workers_.erase(it);
        }
      }
      finished->ids.clear();
    }
    if (!conn.valid()) continue;
    std::lock_guard lock(workers_mutex_);
    workers_.emplace_back([this, finished, fd = conn.release()]() mutable {
      handle(UniqueFd(fd));
      std::lock_guard done(finished->mutex);
      finished->ids.push_back(std::this_thread::get_id());
    });
  }
}

Millis MockService::draw_service_time() {
  if (model_.times == ServiceTimes::kDeterministic) return model_.base_service;
  std::lock_guard lock(rng_mutex_);
  std::exponential_distribution<double> dist(1.0 / static_cast<double>(model_.base_service.count()));
  return Millis(std::max<std::int64_t>(1, std::llround(dist(rng_))));
}

void MockService::handle(UniqueFd conn) {
  LineReader reader(conn.get());
  std::string line;
  if (reader.read_line(line, Millis(10000), &stop_) != LineReader::Status::kLine) return;
  try {
    if (line != "JOB") {
      write_all(conn.get(), "ERR\n");
      return;
    }
    auto ticket = scheduler_.admit();
    if (!ticket) {
      {
        std::lock_guard lock(counters_mutex_);
        ++counters_.rejected;
      }
      write_all(conn.get(), "BUSY\n");
      return;
    }
    if (!scheduler_.acquire(*ticket)) return;
    const auto service = draw_service_time();
    const auto began = SteadyClock::now();
    const bool finished = sleep_for(service, &stop_);
    const auto spent =
        std::chrono::duration_cast<Millis>(SteadyClock::now() - began).count();
    scheduler_.release();
    if (!finished) return;
    {
      std::lock_guard lock(counters_mutex_);
      ++counters_.completed;
      counters_.busy_slot_ms += spent;
    }
    write_all(conn.get(), "DONE\n");
  } catch (const NetError& e) {
    spdlog::debug("mock service: {}", e.what());
  }
}

int mock_client(const HostPort& target, Millis timeout) {
  UniqueFd fd;
  try {
    fd = connect_tcp(target, timeout);
  } catch (const NetError&) {
    return kClientConnectFailed;
  }
  try {
    write_all(fd.get(), "JOB\n");
    LineReader reader(fd.get());
    std::string line;
    if (reader.read_line(line, timeout) != LineReader::Status::kLine) {
      return kClientProtocolError;
    }
    if (line == "DONE") return kClientOk;
    if (line == "BUSY") return kClientRejected;
  } catch (const NetError&) {
  }
  return kClientProtocolError;
}

HttpDelayService::HttpDelayService(Millis delay, std::string path)
    : delay_(delay), path_(std::move(path)), server_(std::make_unique<httplib::Server>()) {
  server_->new_task_queue = [] { return new httplib::ThreadPool(64); };
  server_->Get(path_, [this](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(delay_);
    served_.fetch_add(1);
    res.set_content("ok\n", "text/plain");
  });
}

HttpDelayService::~HttpDelayService() { stop(); }

void HttpDelayService::start(const HostPort& listen) {
  const std::string host = listen.host.empty() ? "0.0.0.0" : listen.host;
  int port = listen.port;
  if (port == 0) {
    port = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    port = -1;
  }
  if (port <= 0) throw NetError(fmt::format("http service: cannot bind {}", listen.to_string()));
  address_ = HostPort{host, static_cast<std::uint16_t>(port)};
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void HttpDelayService::stop() {
  if (!thread_.joinable()) return;
  server_->stop();
  thread_.join();
}

int http_get(const std::string& url, Millis timeout) {
  constexpr std::string_view kScheme = "http://";
  // A bare host:port[/path] is taken as http.
  const auto rest = url.rfind(kScheme, 0) == 0 ? url.substr(kScheme.size()) : url;
  if (rest.empty() || rest.find("://") != std::string::npos) return 4;
  const auto slash = rest.find('/');
  const std::string authority = rest.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : rest.substr(slash);
  httplib::Client client("http://" + authority);
  const auto seconds = timeout.count() / 1000;
  const auto micros = (timeout.count() % 1000) * 1000;
  client.set_connection_timeout(seconds, micros);
  client.set_read_timeout(seconds, micros);
  auto res = client.Get(path);
  if (!res) return 1;
  return res->status == 200 ? 0 : 8;
}

NoopTarget::NoopTarget() {
  listener_ = TcpListener::bind(HostPort{"127.0.0.1", 0});
  address_ = listener_.local_address();
  thread_ = std::thread([this] { loop(); });
}

NoopTarget::~NoopTarget() {
  stop_.raise();
  thread_.join();
}

void NoopTarget::loop() {
  while (!stop_.raised()) {
    auto conn = listener_.accept(Millis(200), &stop_);
    if (!conn.valid()) continue;
    LineReader reader(conn.get());
    std::string line;
    if (reader.read_line(line, Millis(2000), &stop_) != LineReader::Status::kLine) continue;
    try {
      if (line.find("HTTP/") != std::string::npos) {
        while (reader.read_line(line, Millis(2000), &stop_) == LineReader::Status::kLine &&
               !line.empty()) {
        }
        write_all(conn.get(),
                  "HTTP/1.1 200 OK\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
      } else {
        write_all(conn.get(), "DONE\n");
      }
    } catch (const NetError&) {
    }
  }
}

}  // namespace diperf
