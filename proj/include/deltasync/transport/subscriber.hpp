#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/crc32c.hpp"
#include "deltasync/transport/segment.hpp"
#include "deltasync/transport/socket.hpp"
#include "deltasync/transport/staging.hpp"
#include "deltasync/transport/wire.hpp"

namespace deltasync::transport {

struct SubscriberCallbacks {
  // Every checksum-valid segment, before staging (relays forward from here).
  std::function<void(const Segment&)> on_segment;
  // Staging gate, asked once per version on its first segment.
  std::function<bool(std::uint64_t)> admit;
  std::function<void(std::uint64_t, std::shared_ptr<const Bytes>, bool verified)> on_complete;
  std::function<void(std::uint64_t)> on_commit;
  std::function<void()> on_disconnect;
};

struct SubscriberStats {
  std::uint64_t frame_bytes = 0;
  std::uint64_t segments = 0;
  std::uint64_t crc_failures = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t refused = 0;
};

// Receiving end of a subscription: S connections to one data server feeding
// per-version staging buffers.
class Subscriber {
 public:
  Subscriber(std::uint64_t node_id, Role role, std::size_t streams, SubscriberCallbacks cb)
      : node_id_(node_id), role_(role), streams_(streams), cb_(std::move(cb)) {
    if (streams_ < 1 || streams_ > 0xFFFF) throw Error(ErrorCode::invalid_argument, "stream count out of range");
  }
  ~Subscriber() { close(); }

  Subscriber(const Subscriber&) = delete;
  Subscriber& operator=(const Subscriber&) = delete;

  void connect(const Endpoint& ep, std::uint64_t from_version, Duration timeout = std::chrono::seconds(5)) {
    close();
    std::random_device rd;
    const std::uint64_t session = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^ node_id_;
    std::vector<Socket> socks;
    for (std::size_t i = 0; i < streams_; ++i) {
      auto s = Socket::connect(ep, timeout);
      s.write_all(encode_hello(Hello{role_, node_id_, kProtocolVersion}));
      s.write_all(encode_subscribe(SubscribeRequest{from_version, static_cast<std::uint16_t>(i),
                                                    static_cast<std::uint16_t>(streams_), session}));
      socks.push_back(std::move(s));
    }
    {
      std::lock_guard lock(mu_);
      socks_ = std::move(socks);
      staging_.clear();
      refused_.clear();
    }
    connected_ = true;
    disconnect_reported_ = false;
    for (std::size_t i = 0; i < streams_; ++i) threads_.emplace_back([this, i] { read_loop(i); });
  }

  // Not callable from a callback.
  void close() {
    {
      std::lock_guard lock(mu_);
      for (auto& s : socks_) s.shutdown();
    }
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
    threads_.clear();
    std::lock_guard lock(mu_);
    socks_.clear();
    connected_ = false;
  }

  bool connected() const { return connected_.load(); }

  // Versions already completed are ignored if sent again (e.g. after reconnect).
  void mark_completed(std::uint64_t version) {
    std::lock_guard lock(mu_);
    completed_.insert(version);
  }

  SubscriberStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  // Versions with at least one staged segment and not yet complete.
  std::vector<std::uint64_t> in_progress() const {
    std::lock_guard lock(mu_);
    std::vector<std::uint64_t> out;
    for (const auto& [v, buf] : staging_) out.push_back(v);
    return out;
  }

 private:
  void send_back(Bytes frame) {
    std::lock_guard lock(write_mu_);
    std::lock_guard lk(mu_);
    if (!socks_.empty()) socks_[0].write_all(frame);
  }

  void read_loop(std::size_t idx) {
    Socket* sock;
    {
      std::lock_guard lock(mu_);
      sock = &socks_[idx];
    }
    std::uint8_t magic[4];
    try {
      while (sock->read_exact(magic, 4)) {
        if (magic_is(magic, "SPSG")) {
          std::uint8_t hdr[kSegmentHeaderSize];
          std::memcpy(hdr, magic, 4);
          if (!sock->read_exact(hdr + 4, kSegmentHeaderSize - 4)) break;
          const auto h = decode_segment_header(hdr);
          if (h.length > kMaxCheckpointBytes) throw Error(ErrorCode::malformed, "segment length out of range");
          auto payload = std::make_shared<Bytes>(h.length);
          if (h.length > 0 && !sock->read_exact(payload->data(), h.length)) break;
          on_frame(h, std::move(payload));
        } else if (magic_is(magic, "SPCM") || magic_is(magic, "SPAB")) {
          std::uint8_t v[8];
          if (!sock->read_exact(v, 8)) break;
          const auto version = load_le64(v);
          if (magic_is(magic, "SPCM")) {
            if (cb_.on_commit) cb_.on_commit(version);
          } else {
            std::lock_guard lock(mu_);
            staging_.erase(version);
            refused_.insert(version);
          }
        } else {
          throw Error(ErrorCode::bad_magic, "unexpected frame on data connection");
        }
      }
    } catch (const Error& e) {
      log::debug("subscriber ", node_id_, " stream ", idx, " ended: ", e.what());
    }
    {
      std::lock_guard lock(mu_);
      for (auto& s : socks_) s.shutdown();
    }
    connected_ = false;
    if (!disconnect_reported_.exchange(true) && cb_.on_disconnect) cb_.on_disconnect();
  }

  void on_frame(const SegmentHeader& h, std::shared_ptr<Bytes> payload) {
    {
      std::lock_guard lock(mu_);
      stats_.frame_bytes += kSegmentHeaderSize + h.length;
      ++stats_.segments;
    }
    if (crc32c(*payload) != h.crc) {
      {
        std::lock_guard lock(mu_);
        ++stats_.crc_failures;
      }
      send_back(encode_nack(h.version, h.segment_id));
      return;
    }
    Segment seg;
    seg.header = h;
    seg.storage = payload;
    if (cb_.on_segment) cb_.on_segment(seg);

    std::shared_ptr<StagingBuffer> buf;
    {
      std::lock_guard lock(mu_);
      if (completed_.count(h.version)) {
        ++stats_.duplicates;
        return;
      }
      if (refused_.count(h.version)) {
        ++stats_.refused;
        return;
      }
      auto it = staging_.find(h.version);
      if (it == staging_.end()) {
        if (cb_.admit && !cb_.admit(h.version)) {
          refused_.insert(h.version);
          ++stats_.refused;
          log::debug("subscriber ", node_id_, " refused version ", h.version);
          return;
        }
        it = staging_.emplace(h.version, std::make_shared<StagingBuffer>(h.version)).first;
      }
      buf = it->second;
    }
    InsertResult r;
    try {
      r = buf->insert(h, *payload);
    } catch (const Error& e) {
      log::warn("subscriber ", node_id_, ": dropping version ", h.version, ": ", e.what());
      std::lock_guard lock(mu_);
      staging_.erase(h.version);
      refused_.insert(h.version);
      return;
    }
    if (r == InsertResult::duplicate) {
      std::lock_guard lock(mu_);
      ++stats_.duplicates;
      return;
    }
    if (r != InsertResult::complete) return;
    const bool ok = buf->verified();
    {
      std::lock_guard lock(mu_);
      staging_.erase(h.version);
      if (ok) completed_.insert(h.version);
    }
    send_back(encode_ack(h.version, ok ? 0 : 1));
    if (cb_.on_complete) cb_.on_complete(h.version, buf->bytes(), ok);
  }

  std::uint64_t node_id_;
  Role role_;
  std::size_t streams_;
  SubscriberCallbacks cb_;
  mutable std::mutex mu_;
  std::mutex write_mu_;
  std::vector<Socket> socks_;
  std::vector<std::thread> threads_;
  std::map<std::uint64_t, std::shared_ptr<StagingBuffer>> staging_;
  std::set<std::uint64_t> completed_;
  std::set<std::uint64_t> refused_;
  SubscriberStats stats_;
  std::atomic<bool> connected_{false};
  std::atomic<bool> disconnect_reported_{false};
};

}  // namespace deltasync::transport
