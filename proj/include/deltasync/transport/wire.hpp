#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "deltasync/common.hpp"
#include "deltasync/transport/socket.hpp"

namespace deltasync::transport {

constexpr std::uint16_t kProtocolVersion = 1;

enum class Role : std::uint8_t { hub = 0, relay = 1, actor = 2, tool = 3 };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::hub: return "hub";
    case Role::relay: return "relay";
    case Role::actor: return "actor";
    case Role::tool: return "tool";
  }
  return "?";
}

// Session hello, first bytes on every connection (data and control):
// "SPHL" | role u8 | node id u64 | protocol version u16
struct Hello {
  Role role = Role::actor;
  std::uint64_t node_id = 0;
  std::uint16_t protocol = kProtocolVersion;
};
constexpr std::size_t kHelloSize = 4 + 1 + 8 + 2;

inline Bytes encode_hello(const Hello& h) {
  ByteWriter w;
  w.raw(std::string_view("SPHL"));
  w.u8(static_cast<std::uint8_t>(h.role));
  w.u64(h.node_id);
  w.u16(h.protocol);
  return w.take();
}

inline Hello decode_hello(ByteSpan b) {
  ByteReader r(b);
  if (std::memcmp(r.raw(4).data(), "SPHL", 4) != 0) throw Error(ErrorCode::bad_magic, "expected session hello");
  Hello h;
  const auto role = r.u8();
  if (role > 3) throw Error(ErrorCode::malformed, "unknown role in hello");
  h.role = static_cast<Role>(role);
  h.node_id = r.u64();
  h.protocol = r.u16();
  if (h.protocol != kProtocolVersion)
    throw Error(ErrorCode::unsupported_format_version, "protocol version " + std::to_string(h.protocol));
  return h;
}

inline Hello read_hello(Socket& s) {
  std::uint8_t buf[kHelloSize];
  if (!s.read_exact(buf, sizeof(buf))) throw Error(ErrorCode::transfer_aborted, "closed before hello");
  return decode_hello(ByteSpan(buf, sizeof(buf)));
}

// Data-connection subscription, sent by the receiver after its hello:
// "SPRQ" | from_version u64 | stream_index u16 | stream_count u16 | session_id u64
struct SubscribeRequest {
  std::uint64_t from_version = 0;
  std::uint16_t stream_index = 0;
  std::uint16_t stream_count = 1;
  std::uint64_t session_id = 0;
};
constexpr std::size_t kSubscribeSize = 4 + 8 + 2 + 2 + 8;

inline Bytes encode_subscribe(const SubscribeRequest& r) {
  ByteWriter w;
  w.raw(std::string_view("SPRQ"));
  w.u64(r.from_version);
  w.u16(r.stream_index);
  w.u16(r.stream_count);
  w.u64(r.session_id);
  return w.take();
}

inline SubscribeRequest read_subscribe(Socket& s) {
  std::uint8_t buf[kSubscribeSize];
  if (!s.read_exact(buf, sizeof(buf))) throw Error(ErrorCode::transfer_aborted, "closed before subscribe");
  ByteReader r(ByteSpan(buf, sizeof(buf)));
  if (std::memcmp(r.raw(4).data(), "SPRQ", 4) != 0) throw Error(ErrorCode::bad_magic, "expected subscribe request");
  SubscribeRequest q;
  q.from_version = r.u64();
  q.stream_index = r.u16();
  q.stream_count = r.u16();
  q.session_id = r.u64();
  if (q.stream_count == 0 || q.stream_index >= q.stream_count)
    throw Error(ErrorCode::malformed, "bad stream index in subscribe request");
  return q;
}

// Small frames sharing the data connections with segments.
//   sender -> receiver: "SPCM" | version u64   (commit, relayed to regional peers)
//                       "SPAB" | version u64   (abort: discard staging for version)
//   receiver -> sender, stream 0 only:
//                       "SPNK" | version u64 | segment_id u32   (checksum failure, resend)
//                       "SPAK" | version u64 | status u8        (0 verified, 1 hash mismatch)
constexpr std::size_t kVersionFrameSize = 12;
constexpr std::size_t kNackSize = 16;
constexpr std::size_t kAckSize = 13;

inline Bytes encode_version_frame(const char* magic, std::uint64_t version) {
  ByteWriter w;
  w.raw(std::string_view(magic, 4));
  w.u64(version);
  return w.take();
}

inline Bytes encode_nack(std::uint64_t version, std::uint32_t segment_id) {
  ByteWriter w;
  w.raw(std::string_view("SPNK"));
  w.u64(version);
  w.u32(segment_id);
  return w.take();
}

inline Bytes encode_ack(std::uint64_t version, std::uint8_t status) {
  ByteWriter w;
  w.raw(std::string_view("SPAK"));
  w.u64(version);
  w.u8(status);
  return w.take();
}

inline bool magic_is(const std::uint8_t* m, const char* want) { return std::memcmp(m, want, 4) == 0; }

}  // namespace deltasync::transport
