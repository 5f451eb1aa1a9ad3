#pragma once

#include <sys/socket.h>
#include <sys/time.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/transport/feed.hpp"
#include "deltasync/transport/link.hpp"
#include "deltasync/transport/segment.hpp"
#include "deltasync/transport/socket.hpp"
#include "deltasync/transport/wire.hpp"

namespace deltasync::transport {

struct StreamStats {
  std::uint64_t segments = 0;
  std::uint64_t bytes = 0;  // frame bytes including retransmissions
  TimePoint last_delivery{};
};

// Sender-side account of one version to one receiver.
struct TransferReport {
  std::uint64_t node_id = 0;
  std::uint64_t session_id = 0;
  std::uint64_t version = 0;
  std::string link;
  std::uint64_t frame_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t segments = 0;
  std::uint64_t retransmits = 0;  // emulated drops resent after the timeout
  std::uint64_t nacks = 0;        // checksum failures reported by the receiver
  TimePoint first_send{};
  TimePoint last_delivery{};
  TimePoint acked_at{};
  bool verified = false;
  bool aborted = false;
  std::vector<StreamStats> streams;

  double wall_seconds() const { return seconds_between(first_send, last_delivery); }
};

struct DataServerOptions {
  Endpoint listen{"127.0.0.1", 0};
  std::uint64_t node_id = 0;
  Role role = Role::hub;
  // Emulated path to a receiver, by node id. Null: unshaped.
  std::function<LinkPtr(std::uint64_t)> link_for;
};

// Serves a VersionFeed to subscribers. Each subscription opens S connections;
// segment i of every version goes out on stream i mod S, shaped by the
// receiver's link. A stream paces itself with a window of unacknowledged
// bytes, so an emulated drop stalls that stream alone until the resend.
class DataServer {
 public:
  using ReportSink = std::function<void(const TransferReport&)>;

  DataServer(VersionFeed& feed, DataServerOptions opts) : feed_(feed), opts_(std::move(opts)) {}
  ~DataServer() { stop(); }

  void set_report_sink(ReportSink sink) {
    std::lock_guard lock(mu_);
    report_sink_ = std::move(sink);
  }

  void start() {
    listener_ = Listener(opts_.listen);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    if (accept_thread_.joinable()) accept_thread_.join();
    listener_.close();
    std::list<std::shared_ptr<Session>> sessions;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, s] : pending_) sessions.push_back(s);
      pending_.clear();
      sessions.splice(sessions.end(), sessions_);
    }
    for (auto& s : sessions) s->shutdown();
    feed_.poke();
    for (auto& s : sessions) s->join();
  }

  Endpoint endpoint() const { return listener_.endpoint(); }

  // Sends a commit frame to every live session (relay propagation).
  void broadcast_commit(std::uint64_t version) {
    std::lock_guard lock(mu_);
    for (auto& s : sessions_) s->queue_control(encode_version_frame("SPCM", version));
    feed_.poke();
  }

  std::uint64_t bytes_sent() const { return bytes_sent_.load(); }
  std::size_t session_count() {
    std::lock_guard lock(mu_);
    reap_locked();
    return sessions_.size();
  }

 private:
  struct Session;

  struct InFlight {
    Segment seg;
    FeedEntryPtr entry;
    TimePoint due;
    std::uint32_t attempt = 0;
    bool corrupt = false;
  };

  struct Stream {
    Socket sock;
    std::size_t index = 0;
    std::deque<InFlight> queue;                        // reserved, awaiting delivery time
    std::deque<std::pair<TimePoint, std::size_t>> inflight;  // delivered, awaiting emulated ack
    std::size_t window_used = 0;
    TimePoint last_due{};
    StreamStats stats;
  };

  struct Session {
    DataServer* server = nullptr;
    std::uint64_t node_id = 0;
    std::uint64_t session_id = 0;
    std::uint64_t from_version = 0;
    std::size_t stream_count = 1;
    LinkPtr link;
    std::vector<std::unique_ptr<Stream>> streams;
    std::size_t connected = 0;
    std::vector<std::thread> threads;
    std::atomic<bool> stop{false};
    std::atomic<std::size_t> exited{0};
    std::mutex mu;  // guards control queue, resends, reports
    std::vector<std::deque<Bytes>> control;    // per stream
    std::vector<std::deque<Segment>> resends;  // per stream
    std::map<std::uint64_t, TransferReport> reports;

    void queue_control(Bytes frame) {
      std::lock_guard lock(mu);
      if (!control.empty()) control[0].push_back(std::move(frame));
    }

    void shutdown() {
      stop = true;
      for (auto& s : streams) {
        if (s) s->sock.shutdown();
      }
    }

    void join() {
      for (auto& t : threads) {
        if (t.joinable()) t.join();
      }
    }
  };

  void accept_loop() {
    while (running_) {
      auto sock = listener_.accept(std::chrono::milliseconds(100));
      if (!sock.valid()) {
        std::lock_guard lock(mu_);
        reap_locked();
        continue;
      }
      try {
        handshake(std::move(sock));
      } catch (const Error& e) {
        log::warn("data server: rejected connection: ", e.what());
      }
    }
  }

  void handshake(Socket sock) {
    timeval tv{5, 0};
    ::setsockopt(sock.fd(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    const auto hello = read_hello(sock);
    const auto req = read_subscribe(sock);
    timeval none{0, 0};
    ::setsockopt(sock.fd(), SOL_SOCKET, SO_RCVTIMEO, &none, sizeof(none));

    std::lock_guard lock(mu_);
    auto& s = pending_[req.session_id];
    if (!s) {
      s = std::make_shared<Session>();
      s->server = this;
      s->node_id = hello.node_id;
      s->session_id = req.session_id;
      s->from_version = req.from_version;
      s->stream_count = req.stream_count;
      s->link = opts_.link_for ? opts_.link_for(hello.node_id) : nullptr;
      if (!s->link) s->link = unshaped_link();
      s->streams.resize(req.stream_count);
      s->control.resize(req.stream_count);
      s->resends.resize(req.stream_count);
    }
    if (req.stream_count != s->stream_count || s->streams[req.stream_index])
      throw Error(ErrorCode::malformed, "inconsistent subscription streams");
    auto st = std::make_unique<Stream>();
    st->sock = std::move(sock);
    st->index = req.stream_index;
    s->streams[req.stream_index] = std::move(st);
    if (++s->connected < s->stream_count) return;

    auto session = s;
    pending_.erase(req.session_id);
    log::debug("data server ", opts_.node_id, ": session ", session->session_id, " from node ", session->node_id,
               " streams=", session->stream_count, " from v", session->from_version);
    for (std::size_t i = 0; i < session->stream_count; ++i) {
      session->threads.emplace_back([this, session, i] {
        stream_loop(session, i);
        ++session->exited;
      });
    }
    session->threads.emplace_back([this, session] {
      back_channel_loop(session);
      ++session->exited;
    });
    sessions_.push_back(session);
  }

  void reap_locked() {
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if ((*it)->exited == (*it)->threads.size()) {
        (*it)->join();
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }

  std::size_t window_bytes(const Session& s) const {
    const auto frame = feed_.segment_size() + kSegmentHeaderSize;
    const auto& shape = s.link->shape();
    if (!shape.shaped()) return 4 * frame;
    const double bdp = shape.rate_bps / 8.0 * std::chrono::duration<double>(shape.rtt()).count();
    return std::max<std::size_t>(4 * frame, static_cast<std::size_t>(bdp) + 2 * frame);
  }

  TransferReport& report_for(Session& s, std::uint64_t version) {
    auto& r = s.reports[version];
    if (r.streams.empty()) {
      r.node_id = s.node_id;
      r.session_id = s.session_id;
      r.version = version;
      r.link = s.link->name();
      r.streams.resize(s.stream_count);
    }
    return r;
  }

  void stream_loop(std::shared_ptr<Session> s, std::size_t idx) {
    auto& st = *s->streams[idx];
    auto& link = *s->link;
    const auto window = window_bytes(*s);
    const auto S = s->stream_count;
    std::uint64_t version = s->from_version;
    FeedEntryPtr entry;
    std::size_t cursor = 0;
    std::uint8_t header[kSegmentHeaderSize];

    try {
      while (!s->stop) {
        const auto seen = feed_.generation();
        const auto now = Clock::now();
        if (feed_.closed()) break;

        // Emulated acks release window space.
        while (!st.inflight.empty() && st.inflight.front().first <= now) {
          st.window_used -= st.inflight.front().second;
          st.inflight.pop_front();
        }

        // Control frames go out immediately, ahead of queued segments.
        std::optional<Bytes> ctl;
        {
          std::lock_guard lock(s->mu);
          if (!s->control[idx].empty() && !link.partitioned()) {
            ctl = std::move(s->control[idx].front());
            s->control[idx].pop_front();
          }
        }
        if (ctl) {
          st.sock.write_all(*ctl);
          continue;
        }

        // Deliver the head of the queue once due.
        if (!st.queue.empty() && st.queue.front().due <= now) {
          auto& head = st.queue.front();
          if (head.entry && feed_.aborted(head.entry)) {
            st.window_used -= head.seg.frame_size();
            st.queue.pop_front();
            continue;
          }
          if (link.partitioned()) {
            head.due = now + std::chrono::milliseconds(10);
            continue;
          }
          const auto& h = head.seg.header;
          if (link.drop(h.version, h.segment_id, head.attempt, s->node_id)) {
            // Lost in flight: the stream stalls for the resend timeout, then resends.
            ++head.attempt;
            const auto done = link.transmit(head.seg.frame_size(), now + link.shape().rto());
            head.due = done + link.propagation();
            st.last_due = std::max(st.last_due, head.due);
            std::lock_guard lock(s->mu);
            ++report_for(*s, h.version).retransmits;
            continue;
          }
          // Accounted before the write so a fast ack never races the tally.
          const auto frame = head.seg.frame_size();
          const auto delivered = Clock::now();
          link.count_sent(frame);
          bytes_sent_ += frame;
          st.stats.segments++;
          st.stats.bytes += frame;
          st.stats.last_delivery = delivered;
          {
            std::lock_guard lock(s->mu);
            auto& r = report_for(*s, h.version);
            r.frame_bytes += frame;
            r.payload_bytes += h.length;
            r.segments++;
            r.last_delivery = std::max(r.last_delivery, delivered);
            r.streams[idx].segments++;
            r.streams[idx].bytes += frame;
            r.streams[idx].last_delivery = delivered;
          }
          encode_segment_header(h, header);
          st.sock.write_all(ByteSpan(header, sizeof(header)));
          if (head.corrupt) {
            Bytes copy(head.seg.payload().begin(), head.seg.payload().end());
            if (!copy.empty()) copy[copy.size() / 2] ^= 0x01;
            st.sock.write_all(copy);
          } else {
            st.sock.write_all(head.seg.payload());
          }
          st.inflight.emplace_back(head.due + link.shape().latency, frame);
          st.queue.pop_front();
          continue;
        }

        // Admit more while the window allows: resends first, then the feed.
        if (st.window_used < window || (st.queue.empty() && st.inflight.empty())) {
          std::optional<Segment> next;
          FeedEntryPtr from;
          bool is_resend = false;
          {
            std::lock_guard lock(s->mu);
            if (!s->resends[idx].empty()) {
              next = std::move(s->resends[idx].front());
              s->resends[idx].pop_front();
              is_resend = true;
            }
          }
          if (!next) {
            next = next_from_feed(*s, idx, S, version, entry, cursor);
            from = entry;
          }
          if (next) {
            const auto& h = next->header;
            // Resends after a checksum failure go out clean.
            InFlight f{*next, from, {}, 0, !is_resend && link.corrupt(h.version, h.segment_id, 0, s->node_id)};
            const auto t = Clock::now();
            const auto done = link.transmit(next->frame_size(), t);
            f.due = std::max(done + link.propagation(), st.last_due);
            st.last_due = f.due;
            st.window_used += next->frame_size();
            {
              std::lock_guard lock(s->mu);
              auto& r = report_for(*s, h.version);
              if (r.first_send == TimePoint{}) r.first_send = t;
            }
            st.queue.push_back(std::move(f));
            continue;
          }
        }

        // Sleep until the next due time, window release, or feed change.
        auto wake = now + std::chrono::milliseconds(50);
        if (!st.queue.empty()) wake = std::min(wake, st.queue.front().due);
        if (!st.inflight.empty()) wake = std::min(wake, st.inflight.front().first);
        if (wake > Clock::now()) feed_.wait_change(seen, wake);
      }
    } catch (const Error& e) {
      if (!s->stop) log::debug("data server stream ", idx, " to node ", s->node_id, " ended: ", e.what());
    }
    finish_session(s);
  }

  // Next segment for stream idx, advancing through versions in order.
  std::optional<Segment> next_from_feed(Session& s, std::size_t idx, std::size_t S, std::uint64_t& version,
                                        FeedEntryPtr& entry, std::size_t& cursor) {
    while (true) {
      if (!entry) {
        entry = feed_.get(version);
        cursor = 0;
        if (!entry) return std::nullopt;
      }
      if (feed_.aborted(entry)) {
        std::lock_guard lock(s.mu);
        s.control[idx].push_back(encode_version_frame("SPAB", version));
        entry.reset();
        ++version;
        continue;
      }
      auto seg = feed_.segment_at(entry, cursor);
      if (!seg) {
        if (feed_.finished_at(entry, cursor)) {
          entry.reset();
          ++version;
          continue;
        }
        return std::nullopt;
      }
      ++cursor;
      if (stream_of(seg->header.segment_id, S) == idx) return seg;
    }
  }

  // Stream 0 carries receiver acks and checksum nacks back to the sender.
  void back_channel_loop(std::shared_ptr<Session> s) {
    auto& sock = s->streams[0]->sock;
    std::uint8_t magic[4];
    try {
      while (!s->stop && sock.read_exact(magic, 4)) {
        if (magic_is(magic, "SPNK")) {
          std::uint8_t rest[kNackSize - 4];
          if (!sock.read_exact(rest, sizeof(rest))) break;
          const auto v = load_le64(rest);
          const auto id = load_le32(rest + 8);
          auto entry = feed_.get(v);
          auto seg = entry ? feed_.segment_by_id(entry, id) : std::nullopt;
          std::lock_guard lock(s->mu);
          ++report_for(*s, v).nacks;
          if (seg) s->resends[stream_of(id, s->stream_count)].push_back(*seg);
          feed_.poke();
        } else if (magic_is(magic, "SPAK")) {
          std::uint8_t rest[kAckSize - 4];
          if (!sock.read_exact(rest, sizeof(rest))) break;
          const auto v = load_le64(rest);
          TransferReport r;
          ReportSink sink;
          {
            std::lock_guard lock(s->mu);
            auto& rep = report_for(*s, v);
            rep.acked_at = Clock::now();
            rep.verified = rest[8] == 0;
            r = rep;
            s->reports.erase(v);
          }
          {
            std::lock_guard lock(mu_);
            sink = report_sink_;
          }
          if (sink) sink(r);
        } else {
          throw Error(ErrorCode::bad_magic, "unexpected frame on back channel");
        }
      }
    } catch (const Error& e) {
      if (!s->stop) log::debug("data server back channel from node ", s->node_id, " ended: ", e.what());
    }
    finish_session(s);
  }

  // First exit tears the whole session down; unacknowledged versions are reported aborted.
  void finish_session(const std::shared_ptr<Session>& s) {
    if (s->stop.exchange(true)) return;
    s->shutdown();
    feed_.poke();
    std::vector<TransferReport> aborted;
    {
      std::lock_guard lock(s->mu);
      for (auto& [v, r] : s->reports) {
        r.aborted = true;
        aborted.push_back(r);
      }
      s->reports.clear();
    }
    ReportSink sink;
    {
      std::lock_guard lock(mu_);
      sink = report_sink_;
    }
    if (sink) {
      for (auto& r : aborted) sink(r);
    }
  }

  VersionFeed& feed_;
  DataServerOptions opts_;
  Listener listener_;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<Session>> pending_;
  std::list<std::shared_ptr<Session>> sessions_;
  ReportSink report_sink_;
  std::atomic<std::uint64_t> bytes_sent_{0};
};

}  // namespace deltasync::transport
