#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/common.hpp"
#include "deltasync/sha256.hpp"
#include "deltasync/transport/segment.hpp"

namespace deltasync::transport {

// Largest checkpoint a receiver will allocate for.
constexpr std::uint64_t kMaxCheckpointBytes = 64ull << 30;

enum class InsertResult { fresh, duplicate, complete };

// Reassembles one version from segments arriving in any order on any stream.
// The body is hashed incrementally as its contiguous prefix grows, so the
// final verification costs nothing extra.
class StagingBuffer {
 public:
  explicit StagingBuffer(std::uint64_t version) : version_(version) {}

  StagingBuffer(const StagingBuffer&) = delete;
  StagingBuffer& operator=(const StagingBuffer&) = delete;

  InsertResult insert(const SegmentHeader& h, ByteSpan payload) {
    std::lock_guard lock(mu_);
    if (h.version != version_) throw Error(ErrorCode::malformed, "segment for another version");
    if (payload.size() != h.length) throw Error(ErrorCode::malformed, "payload length mismatch");
    if (complete_) return InsertResult::duplicate;

    if (h.terminal()) {
      learn_total(h.total_segments);
      learn_length(h.byte_offset);
      if (terminal_seen_) return InsertResult::duplicate;
      terminal_seen_ = true;
      return finish_if_complete();
    }
    if (h.total_segments != kUnknownTotal) learn_total(h.total_segments);
    if (expected_total_ && h.segment_id >= *expected_total_) throw Error(ErrorCode::malformed, "segment id past total");
    if (h.segment_id >= received_.size()) received_.resize(h.segment_id + 1, false);
    if (received_[h.segment_id]) return InsertResult::duplicate;

    const std::uint64_t start = h.byte_offset;
    const std::uint64_t end = start + h.length;
    if (total_length_ && end > *total_length_) throw Error(ErrorCode::malformed, "segment past end of checkpoint");
    check_overlap(start, end);

    received_[h.segment_id] = true;
    ++received_count_;
    bytes_received_ += h.length;
    if (h.length > 0) {
      ranges_.emplace(start, end);
      if (data_) {
        std::memcpy(data_->data() + start, payload.data(), payload.size());
      } else {
        pending_.emplace(start, Bytes(payload.begin(), payload.end()));
      }
    }
    if (start == 0 && h.length >= codec::kCheckpointHeaderSize && !header_) adopt_header(payload);
    advance_hash();
    return finish_if_complete();
  }

  std::uint64_t version() const { return version_; }
  bool complete() const {
    std::lock_guard lock(mu_);
    return complete_;
  }
  bool verified() const {
    std::lock_guard lock(mu_);
    return verified_;
  }
  std::optional<std::uint32_t> expected_total() const {
    std::lock_guard lock(mu_);
    return expected_total_;
  }
  std::size_t received_count() const {
    std::lock_guard lock(mu_);
    return received_count_;
  }
  std::uint64_t bytes_received() const {
    std::lock_guard lock(mu_);
    return bytes_received_;
  }
  std::optional<codec::CheckpointHeader> header() const {
    std::lock_guard lock(mu_);
    return header_;
  }

  // The reassembled bytes; valid once complete.
  std::shared_ptr<const Bytes> bytes() const {
    std::lock_guard lock(mu_);
    if (!complete_) throw Error(ErrorCode::invalid_argument, "staging buffer incomplete");
    return data_;
  }

 private:
  void learn_total(std::uint32_t total) {
    if (expected_total_ && *expected_total_ != total) throw Error(ErrorCode::malformed, "conflicting segment totals");
    if (!expected_total_ && total < received_.size() && total < received_count_)
      throw Error(ErrorCode::malformed, "total below received ids");
    expected_total_ = total;
  }

  void learn_length(std::uint64_t len) {
    if (total_length_ && *total_length_ != len) throw Error(ErrorCode::malformed, "conflicting checkpoint lengths");
    if (len > kMaxCheckpointBytes) throw Error(ErrorCode::malformed, "checkpoint too large");
    if (!ranges_.empty() && ranges_.rbegin()->second > len) throw Error(ErrorCode::malformed, "segment past end");
    total_length_ = len;
  }

  void check_overlap(std::uint64_t start, std::uint64_t end) const {
    if (start == end) return;
    auto it = ranges_.upper_bound(start);
    if (it != ranges_.end() && it->first < end) throw Error(ErrorCode::malformed, "overlapping segments");
    if (it != ranges_.begin() && std::prev(it)->second > start) throw Error(ErrorCode::malformed, "overlapping segments");
  }

  void adopt_header(ByteSpan first) {
    try {
      header_ = codec::parse_header(first.first(codec::kCheckpointHeaderSize));
    } catch (const Error&) {
      return;  // not a checkpoint; completes unverified
    }
    if (header_->version != version_) throw Error(ErrorCode::malformed, "header version differs from segment version");
    learn_length(codec::kCheckpointHeaderSize + header_->body_length);
    allocate();
  }

  void allocate() {
    auto buf = std::make_shared<Bytes>(*total_length_);
    for (auto& [off, bytes] : pending_) std::memcpy(buf->data() + off, bytes.data(), bytes.size());
    pending_.clear();
    data_ = std::move(buf);
  }

  const std::uint8_t* at(std::uint64_t range_start, std::uint64_t pos) const {
    if (data_) return data_->data() + pos;
    return pending_.at(range_start).data() + (pos - range_start);
  }

  void advance_hash() {
    while (true) {
      auto it = ranges_.upper_bound(hashed_upto_);
      if (it == ranges_.begin()) return;
      --it;
      if (it->second <= hashed_upto_) return;
      hasher_.update(ByteSpan(at(it->first, hashed_upto_), it->second - hashed_upto_));
      hashed_upto_ = it->second;
    }
  }

  InsertResult finish_if_complete() {
    if (!expected_total_ || received_count_ != *expected_total_) return InsertResult::fresh;
    if (!total_length_) learn_length(ranges_.empty() ? 0 : ranges_.rbegin()->second);
    if (!data_) allocate();
    complete_ = true;
    verified_ = header_ && hashed_upto_ == *total_length_ &&
                header_->body_length + codec::kCheckpointHeaderSize == *total_length_ &&
                hasher_.finish() == header_->body_hash;
    return InsertResult::complete;
  }

  mutable std::mutex mu_;
  std::uint64_t version_;
  std::optional<std::uint32_t> expected_total_;
  std::optional<std::uint64_t> total_length_;
  std::optional<codec::CheckpointHeader> header_;
  std::vector<bool> received_;
  std::size_t received_count_ = 0;
  std::uint64_t bytes_received_ = 0;
  bool terminal_seen_ = false;
  std::map<std::uint64_t, std::uint64_t> ranges_;  // start -> end of each received segment
  std::map<std::uint64_t, Bytes> pending_;         // held until the header gives the length
  std::shared_ptr<Bytes> data_;
  std::uint64_t hashed_upto_ = codec::kCheckpointHeaderSize;
  Sha256 hasher_;
  bool complete_ = false;
  bool verified_ = false;
};

}  // namespace deltasync::transport
