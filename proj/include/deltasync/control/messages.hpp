#pragma once

#include <bit>
#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/transport/socket.hpp"
#include "deltasync/transport/wire.hpp"

namespace deltasync::control {

// Control frames: u32 length (type byte + body) | u8 type | body.
enum class MsgType : std::uint8_t {
  register_actor = 1,
  issue_jobs = 2,
  submit_result = 3,
  commit = 4,
  commit_ack = 5,
  heartbeat = 6,
  excluded_notice = 7,
};

constexpr std::uint32_t kMaxControlFrame = 64u << 20;

struct RegisterMsg {
  std::uint64_t actor_id = 0;
  std::string region;
  bool is_relay = false;
  std::string relay_endpoint;  // data endpoint a relay serves its region on; empty otherwise
  friend bool operator==(const RegisterMsg&, const RegisterMsg&) = default;
};

struct JobSpec {
  std::uint64_t job_id = 0;
  std::uint64_t target_version = 0;
  Digest expected_hash{};
  std::uint64_t lease_ms = 0;  // lease length at issue (informational; the hub clock decides)
  std::uint64_t tokens = 0;    // prompts x tokens per rollout
  std::vector<std::uint64_t> prompt_ids;
  friend bool operator==(const JobSpec&, const JobSpec&) = default;
};

struct IssueJobsMsg {
  std::vector<JobSpec> jobs;
  friend bool operator==(const IssueJobsMsg&, const IssueJobsMsg&) = default;
};

struct SubmitResultMsg {
  std::uint64_t job_id = 0;
  std::uint64_t actor_id = 0;
  std::uint64_t behavior_version = 0;
  Digest reported_hash{};
  std::uint64_t token_count = 0;
  std::uint64_t generation_us = 0;
  Bytes payload;
  friend bool operator==(const SubmitResultMsg&, const SubmitResultMsg&) = default;
};

struct CommitMsg {
  std::uint64_t version = 0;
  Digest expected_hash{};
  friend bool operator==(const CommitMsg&, const CommitMsg&) = default;
};

struct CommitAckMsg {
  std::uint64_t actor_id = 0;
  std::uint64_t version = 0;
  Digest state_digest{};  // all zero when the actor does not verify its state
  friend bool operator==(const CommitAckMsg&, const CommitAckMsg&) = default;
};

struct HeartbeatMsg {
  std::uint64_t actor_id = 0;
  std::uint64_t active_version = 0;
  bool generating = false;
  std::vector<std::uint64_t> staged;
  friend bool operator==(const HeartbeatMsg&, const HeartbeatMsg&) = default;
};

struct ExcludedNoticeMsg {
  std::uint64_t version = 0;
  double tau = 0;
  friend bool operator==(const ExcludedNoticeMsg&, const ExcludedNoticeMsg&) = default;
};

using Message = std::variant<RegisterMsg, IssueJobsMsg, SubmitResultMsg, CommitMsg, CommitAckMsg, HeartbeatMsg,
                             ExcludedNoticeMsg>;

inline MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index() + 1); }

inline const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::register_actor: return "REGISTER";
    case MsgType::issue_jobs: return "ISSUE_JOBS";
    case MsgType::submit_result: return "SUBMIT_RESULT";
    case MsgType::commit: return "COMMIT";
    case MsgType::commit_ack: return "COMMIT_ACK";
    case MsgType::heartbeat: return "HEARTBEAT";
    case MsgType::excluded_notice: return "EXCLUDED_NOTICE";
  }
  return "?";
}

namespace detail {

struct BodyWriter {
  ByteWriter& w;
  void operator()(const RegisterMsg& m) {
    w.u64(m.actor_id);
    w.str16(m.region);
    w.u8(m.is_relay ? 1 : 0);
    w.str16(m.relay_endpoint);
  }
  void operator()(const IssueJobsMsg& m) {
    w.u32(static_cast<std::uint32_t>(m.jobs.size()));
    for (const auto& j : m.jobs) {
      w.u64(j.job_id);
      w.u64(j.target_version);
      w.digest(j.expected_hash);
      w.u64(j.lease_ms);
      w.u64(j.tokens);
      w.u32(static_cast<std::uint32_t>(j.prompt_ids.size()));
      for (auto p : j.prompt_ids) w.u64(p);
    }
  }
  void operator()(const SubmitResultMsg& m) {
    w.u64(m.job_id);
    w.u64(m.actor_id);
    w.u64(m.behavior_version);
    w.digest(m.reported_hash);
    w.u64(m.token_count);
    w.u64(m.generation_us);
    w.u32(static_cast<std::uint32_t>(m.payload.size()));
    w.raw(m.payload);
  }
  void operator()(const CommitMsg& m) {
    w.u64(m.version);
    w.digest(m.expected_hash);
  }
  void operator()(const CommitAckMsg& m) {
    w.u64(m.actor_id);
    w.u64(m.version);
    w.digest(m.state_digest);
  }
  void operator()(const HeartbeatMsg& m) {
    w.u64(m.actor_id);
    w.u64(m.active_version);
    w.u8(m.generating ? 1 : 0);
    w.u16(static_cast<std::uint16_t>(m.staged.size()));
    for (auto v : m.staged) w.u64(v);
  }
  void operator()(const ExcludedNoticeMsg& m) {
    w.u64(m.version);
    w.u64(std::bit_cast<std::uint64_t>(m.tau));
  }
};

inline bool read_flag(ByteReader& r) {
  const auto b = r.u8();
  if (b > 1) throw Error(ErrorCode::malformed, "flag byte out of range");
  return b == 1;
}

}  // namespace detail

// Whole frame including the length prefix.
inline Bytes encode_message(const Message& m) {
  Bytes out(4);
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(type_of(m)));
  std::visit(detail::BodyWriter{w}, m);
  if (out.size() - 4 > kMaxControlFrame) throw Error(ErrorCode::invalid_argument, "control message too large");
  store_le32(out.data(), static_cast<std::uint32_t>(out.size() - 4));
  return out;
}

// `frame` is the type byte plus body (the bytes after the length prefix).
inline Message decode_message(ByteSpan frame) {
  ByteReader r(frame);
  const auto type = r.u8();
  Message out;
  switch (static_cast<MsgType>(type)) {
    case MsgType::register_actor: {
      RegisterMsg m;
      m.actor_id = r.u64();
      m.region = r.str16();
      m.is_relay = detail::read_flag(r);
      m.relay_endpoint = r.str16();
      out = std::move(m);
      break;
    }
    case MsgType::issue_jobs: {
      IssueJobsMsg m;
      const auto n = r.u32();
      if (n > r.remaining() / 60) throw Error(ErrorCode::malformed, "job count exceeds frame");
      m.jobs.resize(n);
      for (auto& j : m.jobs) {
        j.job_id = r.u64();
        j.target_version = r.u64();
        j.expected_hash = r.digest();
        j.lease_ms = r.u64();
        j.tokens = r.u64();
        const auto p = r.u32();
        if (p > r.remaining() / 8) throw Error(ErrorCode::malformed, "prompt count exceeds frame");
        j.prompt_ids.resize(p);
        for (auto& id : j.prompt_ids) id = r.u64();
      }
      out = std::move(m);
      break;
    }
    case MsgType::submit_result: {
      SubmitResultMsg m;
      m.job_id = r.u64();
      m.actor_id = r.u64();
      m.behavior_version = r.u64();
      m.reported_hash = r.digest();
      m.token_count = r.u64();
      m.generation_us = r.u64();
      const auto len = r.u32();
      auto p = r.raw(len);
      m.payload.assign(p.begin(), p.end());
      out = std::move(m);
      break;
    }
    case MsgType::commit: {
      CommitMsg m;
      m.version = r.u64();
      m.expected_hash = r.digest();
      out = m;
      break;
    }
    case MsgType::commit_ack: {
      CommitAckMsg m;
      m.actor_id = r.u64();
      m.version = r.u64();
      m.state_digest = r.digest();
      out = m;
      break;
    }
    case MsgType::heartbeat: {
      HeartbeatMsg m;
      m.actor_id = r.u64();
      m.active_version = r.u64();
      m.generating = detail::read_flag(r);
      const auto n = r.u16();
      m.staged.resize(n);
      for (auto& v : m.staged) v = r.u64();
      out = std::move(m);
      break;
    }
    case MsgType::excluded_notice: {
      ExcludedNoticeMsg m;
      m.version = r.u64();
      m.tau = std::bit_cast<double>(r.u64());
      out = m;
      break;
    }
    default:
      throw Error(ErrorCode::malformed, "unknown control message type " + std::to_string(type));
  }
  if (!r.done()) throw Error(ErrorCode::malformed, "trailing bytes in control message");
  return out;
}

// One reliable control connection. Sends are serialized; one reader at a time.
class ControlChannel {
 public:
  explicit ControlChannel(transport::Socket sock) : sock_(std::move(sock)) {}

  // Connects and sends the session hello.
  static std::shared_ptr<ControlChannel> dial(const transport::Endpoint& ep, transport::Role role,
                                              std::uint64_t node_id,
                                              Duration timeout = std::chrono::seconds(5)) {
    auto s = transport::Socket::connect(ep, timeout);
    s.write_all(transport::encode_hello(transport::Hello{role, node_id, transport::kProtocolVersion}));
    return std::make_shared<ControlChannel>(std::move(s));
  }

  void send(const Message& m) {
    auto frame = encode_message(m);
    std::lock_guard lock(write_mu_);
    sock_.write_all(frame);
  }

  // Next message, or nullopt on clean close.
  std::optional<Message> receive() {
    std::uint8_t len_buf[4];
    if (!sock_.read_exact(len_buf, 4)) return std::nullopt;
    const auto len = load_le32(len_buf);
    if (len == 0 || len > kMaxControlFrame) throw Error(ErrorCode::malformed, "control frame length out of range");
    Bytes frame(len);
    if (!sock_.read_exact(frame.data(), len)) throw Error(ErrorCode::truncated, "control frame cut short");
    return decode_message(frame);
  }

  transport::Socket& socket() { return sock_; }
  void shutdown() { sock_.shutdown(); }

 private:
  transport::Socket sock_;
  std::mutex write_mu_;
};

using ChannelPtr = std::shared_ptr<ControlChannel>;

}  // namespace deltasync::control
