#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deltasync {

using Bytes = std::vector<std::uint8_t>;
using ByteSpan = std::span<const std::uint8_t>;
using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;
using Duration = Clock::duration;

enum class ErrorCode {
  truncated,
  overlong,
  overflow,
  not_increasing,
  shape_mismatch,
  name_mismatch,
  element_type_mismatch,
  fusion_source_missing,
  index_out_of_range,
  unknown_tensor,
  hash_mismatch,
  bad_magic,
  unsupported_format_version,
  malformed,
  version_conflict,
  not_found,
  storage_failure,
  peer_unreachable,
  transfer_aborted,
  superseded,
  duplicate_actor,
  unknown_job,
  empty_allocation,
  schedule_stall,
  invalid_argument,
  invalid_scenario,
  unknown_target,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::overlong: return "overlong";
    case ErrorCode::overflow: return "overflow";
    case ErrorCode::not_increasing: return "not_increasing";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::name_mismatch: return "name_mismatch";
    case ErrorCode::element_type_mismatch: return "element_type_mismatch";
    case ErrorCode::fusion_source_missing: return "fusion_source_missing";
    case ErrorCode::index_out_of_range: return "index_out_of_range";
    case ErrorCode::unknown_tensor: return "unknown_tensor";
    case ErrorCode::hash_mismatch: return "hash_mismatch";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::unsupported_format_version: return "unsupported_format_version";
    case ErrorCode::malformed: return "malformed";
    case ErrorCode::version_conflict: return "version_conflict";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::storage_failure: return "storage_failure";
    case ErrorCode::peer_unreachable: return "peer_unreachable";
    case ErrorCode::transfer_aborted: return "transfer_aborted";
    case ErrorCode::superseded: return "superseded";
    case ErrorCode::duplicate_actor: return "duplicate_actor";
    case ErrorCode::unknown_job: return "unknown_job";
    case ErrorCode::empty_allocation: return "empty_allocation";
    case ErrorCode::schedule_stall: return "schedule_stall";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_scenario: return "invalid_scenario";
    case ErrorCode::unknown_target: return "unknown_target";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// 256-bit digest (SHA-256 in this project).
using Digest = std::array<std::uint8_t, 32>;

inline std::string to_hex(ByteSpan bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xF]);
  }
  return out;
}

inline std::string to_hex(const Digest& d) { return to_hex(ByteSpan(d.data(), d.size())); }

inline double seconds_between(TimePoint a, TimePoint b) {
  return std::chrono::duration<double>(b - a).count();
}

inline Duration from_seconds(double s) {
  return std::chrono::duration_cast<Duration>(std::chrono::duration<double>(s));
}

inline std::uint64_t wall_clock_us() {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::microseconds>(
                                        std::chrono::system_clock::now().time_since_epoch())
                                        .count());
}

// Little-endian append-only writer.
class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(Bytes& out) : out_(&out) {}

  void u8(std::uint8_t v) { buf().push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void raw(ByteSpan bytes) { buf().insert(buf().end(), bytes.begin(), bytes.end()); }
  void raw(std::string_view s) {
    raw(ByteSpan(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }
  void digest(const Digest& d) { raw(ByteSpan(d.data(), d.size())); }
  // u16 length prefix followed by bytes.
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw Error(ErrorCode::invalid_argument, "string too long");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }

  Bytes& bytes() { return buf(); }
  Bytes take() { return std::move(own_); }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf().push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes& buf() { return out_ ? *out_ : own_; }

  Bytes own_;
  Bytes* out_ = nullptr;
};

// Bounds-checked little-endian reader; throws Error{truncated} on overrun.
class ByteReader {
 public:
  explicit ByteReader(ByteSpan data) : data_(data) {}

  std::uint8_t u8() { return get_le<std::uint8_t>(); }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }

  ByteSpan raw(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str16() {
    auto n = u16();
    auto s = raw(n);
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }
  Digest digest() {
    Digest d;
    auto s = raw(d.size());
    std::memcpy(d.data(), s.data(), d.size());
    return d;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorCode::truncated, "unexpected end of buffer");
  }
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  ByteSpan data_;
  std::size_t pos_ = 0;
};

inline void store_le32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline void store_le64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline std::uint32_t load_le32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t load_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

// Minimal leveled logger. Verbosity from DELTASYNC_LOG (error|warn|info|debug).
namespace log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("DELTASYNC_LOG");
    if (!env) return Level::warn;
    std::string_view v(env);
    if (v == "error") return Level::error;
    if (v == "info") return Level::info;
    if (v == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

inline void write(Level level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static std::mutex mu;
  static constexpr const char* kNames[] = {"E", "W", "I", "D"};
  std::lock_guard lock(mu);
  std::fprintf(stderr, "[%s] %s\n", kNames[static_cast<int>(level)], msg.c_str());
}

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}

template <typename... Args>
void error(Args&&... args) { write(Level::error, concat(std::forward<Args>(args)...)); }
template <typename... Args>
void warn(Args&&... args) { write(Level::warn, concat(std::forward<Args>(args)...)); }
template <typename... Args>
void info(Args&&... args) { write(Level::info, concat(std::forward<Args>(args)...)); }
template <typename... Args>
void debug(Args&&... args) {
  if (threshold() >= Level::debug) write(Level::debug, concat(std::forward<Args>(args)...));
}

}  // namespace log
}  // namespace deltasync
