#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/parameter_set.hpp"
#include "deltasync/common.hpp"
#include "deltasync/sha256.hpp"

namespace deltasync::store {

namespace fs = std::filesystem;

struct StoreEntry {
  std::uint64_t version = 0;
  Digest body_hash{};
  fs::path path;
  std::uint64_t size = 0;
  std::uint64_t created_at_us = 0;
};

struct RolloutBatch {
  std::uint64_t job_id = 0;
  std::uint64_t actor_id = 0;
  std::uint64_t behavior_version = 0;
  Bytes payload;
  std::uint64_t token_count = 0;
  std::uint64_t submitted_at_us = 0;

  friend bool operator==(const RolloutBatch&, const RolloutBatch&) = default;
};

struct RolloutAggregate {
  std::uint64_t batches = 0;
  std::uint64_t tokens = 0;
};

// Checkpoint file name: v{NNNNNN}_{first 8 hex digits of the body hash}.spdc
inline std::string checkpoint_file_name(std::uint64_t version, const Digest& hash) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "v%06llu_%s.spdc", static_cast<unsigned long long>(version),
                to_hex(hash).substr(0, 8).c_str());
  return buf;
}

inline std::string rollout_file_name(std::uint64_t version) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "v%06llu.log", static_cast<unsigned long long>(version));
  return buf;
}

namespace detail {

inline void write_durably(const fs::path& path, ByteSpan bytes, bool sync) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error(ErrorCode::storage_failure, "cannot create " + path.string());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      throw Error(ErrorCode::storage_failure, "write failed on " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  if (sync && ::fsync(fd) != 0) {
    ::close(fd);
    throw Error(ErrorCode::storage_failure, "fsync failed on " + path.string());
  }
  ::close(fd);
}

inline void sync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

inline Bytes encode_rollout(const RolloutBatch& b) {
  Bytes rec;
  ByteWriter w(rec);
  w.u32(0);
  w.u64(b.job_id);
  w.u64(b.actor_id);
  w.u64(b.behavior_version);
  w.u64(b.token_count);
  w.u64(b.submitted_at_us);
  w.u32(static_cast<std::uint32_t>(b.payload.size()));
  w.raw(b.payload);
  store_le32(rec.data(), static_cast<std::uint32_t>(rec.size() - 4));
  return rec;
}

inline std::vector<RolloutBatch> decode_rollouts(ByteSpan bytes) {
  std::vector<RolloutBatch> out;
  ByteReader r(bytes);
  while (!r.done()) {
    const auto len = r.u32();
    ByteReader rec(r.raw(len));
    RolloutBatch b;
    b.job_id = rec.u64();
    b.actor_id = rec.u64();
    b.behavior_version = rec.u64();
    b.token_count = rec.u64();
    b.submitted_at_us = rec.u64();
    auto payload = rec.raw(rec.u32());
    b.payload.assign(payload.begin(), payload.end());
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace detail

// Hub-side store of versioned checkpoints (one immutable file per version) and
// collected rollouts (length-prefixed records per behavior version).
//
// Single writer, concurrent readers. Checkpoint files are written to a temp name
// and renamed into place, so a crash never leaves a partial version visible.
class CheckpointStore {
 public:
  struct Options {
    bool durable = true;  // fsync files and directory on put
  };

  explicit CheckpointStore(fs::path run_dir) : CheckpointStore(std::move(run_dir), Options{}) {}

  CheckpointStore(fs::path run_dir, Options opts) : root_(std::move(run_dir)), opts_(opts) {
    std::error_code ec;
    fs::create_directories(root_ / "ckpt", ec);
    fs::create_directories(root_ / "rollouts", ec);
    if (ec) throw Error(ErrorCode::storage_failure, "cannot create run directory " + root_.string());
    scan();
  }

  const fs::path& root() const { return root_; }

  StoreEntry put(ByteSpan serialized) {
    auto view = codec::parse_checkpoint(serialized, {.verify_hash = true, .validate_indices = false});
    const auto& h = view.header;
    std::unique_lock lock(mu_);
    const bool empty = entries_.empty();
    const std::uint64_t expected = empty ? 0 : entries_.rbegin()->first + 1;
    if (h.version != expected)
      throw Error(ErrorCode::version_conflict,
                  "expected version " + std::to_string(expected) + ", got " + std::to_string(h.version));
    if (h.version != h.base_version + 1)
      throw Error(ErrorCode::version_conflict, "base version does not precede version");
    const auto final_path = root_ / "ckpt" / checkpoint_file_name(h.version, h.body_hash);
    const auto tmp = root_ / "ckpt" / (".tmp-" + checkpoint_file_name(h.version, h.body_hash));
    detail::write_durably(tmp, serialized, opts_.durable);
    std::error_code ec;
    fs::rename(tmp, final_path, ec);
    if (ec) throw Error(ErrorCode::storage_failure, "rename failed: " + ec.message());
    if (opts_.durable) detail::sync_dir(root_ / "ckpt");
    StoreEntry e{h.version, h.body_hash, final_path, serialized.size(), wall_clock_us()};
    entries_.emplace(h.version, e);
    return e;
  }

  StoreEntry put(const codec::DeltaCheckpoint& ckpt) {
    auto bytes = ckpt.serialize();
    return put(bytes);
  }

  // Exact stored bytes; the body hash is re-verified on every read.
  Bytes get(std::uint64_t version) const {
    StoreEntry e;
    {
      std::shared_lock lock(mu_);
      auto it = entries_.find(version);
      if (it == entries_.end()) throw Error(ErrorCode::not_found, "version " + std::to_string(version));
      e = it->second;
    }
    auto bytes = codec::read_file(e.path.string());
    auto h = codec::parse_header(bytes);
    if (h.body_hash != e.body_hash || bytes.size() < codec::kCheckpointHeaderSize ||
        sha256(ByteSpan(bytes).subspan(codec::kCheckpointHeaderSize)) != e.body_hash)
      throw Error(ErrorCode::hash_mismatch, "stored checkpoint failed verification: " + e.path.string());
    return bytes;
  }

  std::optional<StoreEntry> entry(std::uint64_t version) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(version);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<std::uint64_t> latest() const {
    std::shared_lock lock(mu_);
    if (entries_.empty()) return std::nullopt;
    return entries_.rbegin()->first;
  }

  std::vector<StoreEntry> entries() const {
    std::shared_lock lock(mu_);
    std::vector<StoreEntry> out;
    for (const auto& [v, e] : entries_) out.push_back(e);
    return out;
  }

  // Appends to the aggregation buffer for the batch's behavior version; returns
  // the number of batches now aggregated for that version.
  std::uint64_t append_rollouts(const RolloutBatch& batch) {
    auto rec = detail::encode_rollout(batch);
    std::unique_lock lock(mu_);
    const auto path = root_ / "rollouts" / rollout_file_name(batch.behavior_version);
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw Error(ErrorCode::storage_failure, "cannot open " + path.string());
    const bool ok = std::fwrite(rec.data(), 1, rec.size(), f) == rec.size();
    std::fclose(f);
    if (!ok) throw Error(ErrorCode::storage_failure, "short write on " + path.string());
    auto& agg = aggregates_[batch.behavior_version];
    ++agg.batches;
    agg.tokens += batch.token_count;
    return agg.batches;
  }

  RolloutAggregate aggregate(std::uint64_t behavior_version) const {
    std::shared_lock lock(mu_);
    auto it = aggregates_.find(behavior_version);
    return it == aggregates_.end() ? RolloutAggregate{} : it->second;
  }

  std::vector<RolloutBatch> read_rollouts(std::uint64_t behavior_version) const {
    const auto path = root_ / "rollouts" / rollout_file_name(behavior_version);
    if (!fs::exists(path)) return {};
    return detail::decode_rollouts(codec::read_file(path.string()));
  }

 private:
  void scan() {
    for (const auto& de : fs::directory_iterator(root_ / "ckpt")) {
      const auto name = de.path().filename().string();
      if (name.rfind(".tmp-", 0) == 0) {
        std::error_code ec;
        fs::remove(de.path(), ec);
        continue;
      }
      if (de.path().extension() != ".spdc") continue;
      Bytes head(codec::kCheckpointHeaderSize);
      std::FILE* f = std::fopen(de.path().c_str(), "rb");
      if (!f) continue;
      const auto n = std::fread(head.data(), 1, head.size(), f);
      std::fclose(f);
      if (n != head.size()) throw Error(ErrorCode::storage_failure, "truncated checkpoint " + name);
      auto h = codec::parse_header(head);
      entries_.emplace(h.version, StoreEntry{h.version, h.body_hash, de.path(), fs::file_size(de.path()), 0});
    }
    std::uint64_t expect = 0;
    for (const auto& [v, e] : entries_) {
      if (v != expect) throw Error(ErrorCode::version_conflict, "stored versions are not a contiguous prefix");
      ++expect;
    }
    for (const auto& de : fs::directory_iterator(root_ / "rollouts")) {
      if (de.path().extension() != ".log") continue;
      for (const auto& b : detail::decode_rollouts(codec::read_file(de.path().string()))) {
        auto& agg = aggregates_[b.behavior_version];
        ++agg.batches;
        agg.tokens += b.token_count;
      }
    }
  }

  fs::path root_;
  Options opts_;
  mutable std::shared_mutex mu_;
  std::map<std::uint64_t, StoreEntry> entries_;
  std::map<std::uint64_t, RolloutAggregate> aggregates_;
};

}  // namespace deltasync::store
