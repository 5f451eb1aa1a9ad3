#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/common.hpp"
#include "deltasync/transport/segment.hpp"

namespace deltasync::transport {

// The segments of one version in emission (or arrival) order. Grows while
// being produced or forwarded; sessions read it concurrently through the feed.
struct FeedEntry {
  std::uint64_t version = 0;
  std::vector<Segment> segments;
  std::map<std::uint32_t, std::size_t> index_of;  // segment id -> position
  std::optional<std::uint32_t> total;             // data segment count, once known
  bool has_terminal = false;
  bool finished = false;
  bool aborted = false;
  std::uint64_t payload_bytes = 0;
  TimePoint published_at = Clock::now();

  std::size_t expected_count() const { return total ? *total + (has_terminal ? 1 : 0) : SIZE_MAX; }
};

using FeedEntryPtr = std::shared_ptr<FeedEntry>;

// Versions available for streaming, shared by every session of one server.
// Older fully-produced entries may be evicted from memory and rebuilt on
// demand through the loader (the hub reads them back from its store).
class VersionFeed {
 public:
  using Loader = std::function<std::shared_ptr<const Bytes>(std::uint64_t)>;

  explicit VersionFeed(std::size_t segment_size = kDefaultSegmentSize, std::size_t retain = SIZE_MAX)
      : segment_size_(segment_size), retain_(retain) {
    if (segment_size < kMinSegmentSize) throw Error(ErrorCode::invalid_argument, "segment size below 1 KiB");
  }

  void set_loader(Loader loader) {
    std::lock_guard lock(mu_);
    loader_ = std::move(loader);
  }

  std::size_t segment_size() const { return segment_size_; }

  // Whole serialization available up front: ids dense from 0, totals known.
  void publish(std::uint64_t version, std::shared_ptr<const Bytes> bytes) {
    auto e = std::make_shared<FeedEntry>();
    e->version = version;
    e->segments = segmentize(version, bytes, segment_size_);
    for (std::size_t i = 0; i < e->segments.size(); ++i) e->index_of[e->segments[i].header.segment_id] = i;
    e->total = static_cast<std::uint32_t>(e->segments.size());
    e->payload_bytes = bytes ? bytes->size() : 0;
    e->finished = true;
    install(std::move(e));
  }

  // Cut-through producer. Body bytes are segmented as they arrive with the
  // total marked unknown; the header segment (offset 0) follows once the body
  // hash is known, then a terminal zero-length segment carries the count.
  class Producer {
   public:
    Producer(VersionFeed& feed, std::uint64_t version) : feed_(feed), version_(version) {
      auto e = std::make_shared<FeedEntry>();
      e->version = version;
      feed_.install(e);
      entry_ = std::move(e);
    }

    void append(ByteSpan body) {
      while (!body.empty()) {
        const auto take = std::min(body.size(), feed_.segment_size_ - pending_.size());
        pending_.insert(pending_.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(take));
        body = body.subspan(take);
        if (pending_.size() == feed_.segment_size_) flush();
      }
    }

    void finish(const codec::CheckpointHeader& header) {
      if (!pending_.empty()) flush();
      auto h = std::make_shared<Bytes>(codec::kCheckpointHeaderSize);
      codec::write_header(header, h->data());
      emit(make_segment(version_, next_id_, kUnknownTotal, 0, h, 0, codec::kCheckpointHeaderSize));
      ++next_id_;
      const std::uint64_t total_len = codec::kCheckpointHeaderSize + body_offset_;
      auto terminal = make_segment(version_, next_id_, next_id_, total_len, nullptr, 0, 0);
      std::lock_guard lock(feed_.mu_);
      entry_->total = next_id_;
      entry_->has_terminal = true;
      entry_->index_of[terminal.header.segment_id] = entry_->segments.size();
      entry_->segments.push_back(std::move(terminal));
      entry_->finished = true;
      feed_.changed_locked();
    }

    std::uint64_t body_bytes() const { return body_offset_; }

   private:
    void flush() {
      auto buf = std::make_shared<const Bytes>(std::move(pending_));
      pending_ = Bytes();
      pending_.reserve(feed_.segment_size_);
      const auto len = static_cast<std::uint32_t>(buf->size());
      emit(make_segment(version_, next_id_++, kUnknownTotal, codec::kCheckpointHeaderSize + body_offset_, buf, 0,
                        len));
      body_offset_ += len;
    }

    void emit(Segment s) {
      std::lock_guard lock(feed_.mu_);
      entry_->payload_bytes += s.header.length;
      entry_->index_of[s.header.segment_id] = entry_->segments.size();
      entry_->segments.push_back(std::move(s));
      feed_.changed_locked();
    }

    VersionFeed& feed_;
    std::uint64_t version_;
    FeedEntryPtr entry_;
    Bytes pending_;
    std::uint32_t next_id_ = 0;
    std::uint64_t body_offset_ = 0;
  };

  Producer produce(std::uint64_t version) { return Producer(*this, version); }

  // Relay path: a segment received from upstream. Returns false for duplicates.
  bool add_segment(const Segment& s) {
    std::lock_guard lock(mu_);
    auto& slot = entries_[s.header.version];
    if (!slot) {
      slot = std::make_shared<FeedEntry>();
      slot->version = s.header.version;
      trim_locked();
    }
    auto& e = *slot;
    if (e.finished || e.index_of.count(s.header.segment_id)) return false;
    if (s.header.terminal()) {
      e.total = s.header.total_segments;
      e.has_terminal = true;
    } else if (s.header.total_segments != kUnknownTotal) {
      e.total = s.header.total_segments;
    }
    e.index_of[s.header.segment_id] = e.segments.size();
    e.segments.push_back(s);
    e.payload_bytes += s.header.length;
    if (e.segments.size() == e.expected_count()) e.finished = true;
    changed_locked();
    return true;
  }

  // Caller-initiated cancel (version superseded): sessions stop sending it,
  // tell receivers to discard it, and move on to the next version.
  void abort(std::uint64_t version) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(version);
    if (it == entries_.end() || !it->second) return;
    it->second->aborted = true;
    it->second->finished = true;
    changed_locked();
  }

  // Resident or rebuildable entry for a version; null if unknown.
  FeedEntryPtr get(std::uint64_t version) {
    std::unique_lock lock(mu_);
    auto it = entries_.find(version);
    if (it != entries_.end() && it->second) return it->second;
    if (it == entries_.end()) return nullptr;
    if (auto cached = reloaded_[version].lock()) return cached;
    auto loader = loader_;
    lock.unlock();
    if (!loader) return nullptr;
    auto bytes = loader(version);
    if (!bytes) return nullptr;
    auto e = std::make_shared<FeedEntry>();
    e->version = version;
    e->segments = segmentize(version, bytes, segment_size_);
    for (std::size_t i = 0; i < e->segments.size(); ++i) e->index_of[e->segments[i].header.segment_id] = i;
    e->total = static_cast<std::uint32_t>(e->segments.size());
    e->payload_bytes = bytes->size();
    e->finished = true;
    lock.lock();
    if (auto cached = reloaded_[version].lock()) return cached;
    reloaded_[version] = e;
    return e;
  }

  std::optional<Segment> segment_at(const FeedEntryPtr& e, std::size_t index) const {
    std::lock_guard lock(mu_);
    if (index < e->segments.size()) return e->segments[index];
    return std::nullopt;
  }

  std::optional<Segment> segment_by_id(const FeedEntryPtr& e, std::uint32_t id) const {
    std::lock_guard lock(mu_);
    auto it = e->index_of.find(id);
    if (it == e->index_of.end()) return std::nullopt;
    return e->segments[it->second];
  }

  bool finished_at(const FeedEntryPtr& e, std::size_t index) const {
    std::lock_guard lock(mu_);
    return e->finished && index >= e->segments.size();
  }

  bool aborted(const FeedEntryPtr& e) const {
    std::lock_guard lock(mu_);
    return e->aborted;
  }

  std::optional<std::uint64_t> latest() const {
    std::lock_guard lock(mu_);
    if (entries_.empty()) return std::nullopt;
    return entries_.rbegin()->first;
  }

  bool has(std::uint64_t version) const {
    std::lock_guard lock(mu_);
    return entries_.count(version) > 0;
  }

  std::uint64_t generation() const {
    std::lock_guard lock(mu_);
    return generation_;
  }

  // Blocks until something changes after `seen`, the deadline passes, or the feed closes.
  void wait_change(std::uint64_t seen, TimePoint deadline) const {
    std::unique_lock lock(mu_);
    cv_.wait_until(lock, deadline, [&] { return generation_ != seen || closed_; });
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    changed_locked();
  }
  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  // Wakes waiters without a content change (used when sessions queue control frames).
  void poke() {
    std::lock_guard lock(mu_);
    changed_locked();
  }

 private:
  void install(FeedEntryPtr e) {
    std::lock_guard lock(mu_);
    entries_[e->version] = std::move(e);
    trim_locked();
    changed_locked();
  }

  // Evicts the oldest finished entries beyond the retention count, keeping a placeholder.
  void trim_locked() {
    std::size_t resident = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->second) continue;
      if (++resident > retain_ && it->second->finished) it->second = nullptr;
    }
  }

  void changed_locked() {
    ++generation_;
    cv_.notify_all();
  }

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::size_t segment_size_;
  std::size_t retain_;
  std::map<std::uint64_t, FeedEntryPtr> entries_;  // null = evicted, rebuild through loader
  std::map<std::uint64_t, std::weak_ptr<FeedEntry>> reloaded_;
  Loader loader_;
  std::uint64_t generation_ = 0;
  bool closed_ = false;
};

}  // namespace deltasync::transport
