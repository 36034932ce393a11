#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace diperf {

// Millisecond wall clock as seen by one node.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ms() const = 0;
};

class SystemClock final : public Clock {
 public:
  std::int64_t now_ms() const override {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }
};

// System clock displaced by a fixed skew. Lets a desk-scale run emulate
// nodes whose clocks disagree by arbitrary amounts.
class SkewedClock final : public Clock {
 public:
  explicit SkewedClock(std::int64_t skew_ms) : skew_ms_(skew_ms) {}
  std::int64_t now_ms() const override { return base_.now_ms() + skew_ms_; }

 private:
  SystemClock base_;
  std::int64_t skew_ms_;
};

class ManualClock final : public Clock {
 public:
  explicit ManualClock(std::int64_t start_ms = 0) : now_(start_ms) {}
  std::int64_t now_ms() const override { return now_.load(); }
  void set(std::int64_t ms) { now_.store(ms); }
  void advance(std::int64_t ms) { now_.fetch_add(ms); }

 private:
  std::atomic<std::int64_t> now_;
};

}  // namespace diperf
