#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <random>
#include <string>

#include "deltasync/common.hpp"

namespace deltasync::transport {

struct LinkShape {
  double rate_bps = std::numeric_limits<double>::infinity();  // infinity: unshaped
  Duration latency{};                                         // one-way
  Duration jitter{};                                          // +/- uniform
  double loss = 0.0;                                          // per-segment drop probability
  double corrupt = 0.0;                                       // per-segment payload bit-flip probability
  std::uint64_t seed = 1;
  std::uint64_t burst_bytes = 0;

  void validate() const {
    if (!(rate_bps > 0)) throw Error(ErrorCode::invalid_argument, "link rate must be positive");
    if (!(loss >= 0 && loss < 1)) throw Error(ErrorCode::invalid_argument, "loss must lie in [0,1)");
    if (!(corrupt >= 0 && corrupt < 1)) throw Error(ErrorCode::invalid_argument, "corrupt must lie in [0,1)");
    if (latency < Duration::zero() || jitter < Duration::zero())
      throw Error(ErrorCode::invalid_argument, "latency and jitter must be non-negative");
  }
  bool shaped() const { return std::isfinite(rate_bps); }
  Duration rtt() const { return 2 * latency; }
  // Resend timer after an emulated drop: 2 x RTT, at least 5 ms.
  Duration rto() const {
    return std::max<Duration>(2 * rtt(), std::chrono::duration_cast<Duration>(std::chrono::milliseconds(5)));
  }
};

// Token bucket in virtual-time form: the link is busy until free_at_, and
// tokens accrue while idle up to burst_bytes. It starts empty, so n bytes
// never finish before n / rate.
class TokenBucket {
 public:
  TokenBucket(double rate_bps, std::uint64_t burst_bytes = 0, TimePoint origin = Clock::now())
      : bytes_per_s_(rate_bps / 8.0), burst_(burst_bytes), free_at_(origin) {
    if (!(rate_bps > 0)) throw Error(ErrorCode::invalid_argument, "rate must be positive");
  }

  // Completion time of an n-byte transmission that may not start before `not_before`.
  TimePoint reserve(std::uint64_t n, TimePoint not_before = Clock::now()) {
    std::lock_guard lock(mu_);
    if (!std::isfinite(bytes_per_s_)) return not_before;
    const auto credit = from_seconds(static_cast<double>(burst_) / bytes_per_s_);
    auto start = std::max(free_at_, not_before - credit);
    free_at_ = start + from_seconds(static_cast<double>(n) / bytes_per_s_);
    return std::max(free_at_, not_before);
  }

  double rate_bps() const { return bytes_per_s_ * 8.0; }

 private:
  std::mutex mu_;
  double bytes_per_s_;
  std::uint64_t burst_;
  TimePoint free_at_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Uniform [0,1) draw keyed by the event, so a seed fixes the whole drop pattern.
inline double seeded_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  std::uint64_t h = splitmix64(seed);
  for (auto v : {a, b, c, d}) h = splitmix64(h ^ v);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// One emulated path (e.g. hub -> region). Sessions sharing a path share its
// bucket, so their traffic competes for the same rate.
class LinkEmulator {
 public:
  explicit LinkEmulator(LinkShape shape, std::string name = {})
      : shape_(shape), name_(std::move(name)), bucket_(shape.shaped() ? shape.rate_bps : 1.0, shape.burst_bytes) {
    shape_.validate();
  }

  const LinkShape& shape() const { return shape_; }
  const std::string& name() const { return name_; }

  TimePoint transmit(std::uint64_t bytes, TimePoint not_before) {
    if (!shape_.shaped()) return not_before;
    return bucket_.reserve(bytes, not_before);
  }

  bool drop(std::uint64_t version, std::uint32_t segment, std::uint32_t attempt, std::uint64_t receiver) const {
    return shape_.loss > 0 && seeded_uniform(shape_.seed, version, segment, attempt, receiver) < shape_.loss;
  }

  bool corrupt(std::uint64_t version, std::uint32_t segment, std::uint32_t attempt, std::uint64_t receiver) const {
    return shape_.corrupt > 0 &&
           seeded_uniform(shape_.seed ^ 0xC0FFEEull, version, segment, attempt, receiver) < shape_.corrupt;
  }

  // Propagation delay for one frame, jitter drawn from a per-link generator.
  Duration propagation() {
    if (shape_.jitter == Duration::zero()) return shape_.latency;
    std::lock_guard lock(rng_mu_);
    const auto j = std::uniform_int_distribution<std::int64_t>(-shape_.jitter.count(), shape_.jitter.count())(rng_);
    return std::max(Duration::zero(), shape_.latency + Duration(j));
  }

  void set_partitioned(bool p) { partitioned_.store(p); }
  bool partitioned() const { return partitioned_.load(); }

  void count_sent(std::uint64_t bytes) { bytes_sent_.fetch_add(bytes); }
  std::uint64_t bytes_sent() const { return bytes_sent_.load(); }

 private:
  LinkShape shape_;
  std::string name_;
  TokenBucket bucket_;
  std::mutex rng_mu_;
  std::mt19937_64 rng_{shape_.seed};
  std::atomic<bool> partitioned_{false};
  std::atomic<std::uint64_t> bytes_sent_{0};
};

using LinkPtr = std::shared_ptr<LinkEmulator>;

inline LinkPtr unshaped_link(std::string name = "local") { return std::make_shared<LinkEmulator>(LinkShape{}, name); }

}  // namespace deltasync::transport
