#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/control/actor_record.hpp"
#include "deltasync/control/scheduler.hpp"

namespace deltasync::control {

enum class JobState : std::uint8_t { issued, settled, expired, reassigned };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::issued: return "issued";
    case JobState::settled: return "settled";
    case JobState::expired: return "expired";
    case JobState::reassigned: return "reassigned";
  }
  return "?";
}

struct Job {
  std::uint64_t job_id = 0;
  std::vector<std::uint64_t> prompt_ids;
  std::uint64_t target_version = 0;
  Digest expected_hash{};
  ActorId actor_id = 0;
  TimePoint issued_at{};
  TimePoint lease_expiry{};
  JobState state = JobState::issued;
};

struct Result {
  std::uint64_t job_id = 0;
  ActorId actor_id = 0;
  std::uint64_t behavior_version = 0;
  Digest reported_hash{};
  TimePoint arrival_time{};  // stamped by the hub on receipt
  std::uint64_t token_count = 0;
  double generation_seconds = 0;  // actor-measured, feeds the tau EMA only
  Bytes payload;
};

enum class RejectReason : std::uint8_t { none, lease_expired, stale_version, hash_mismatch, not_issued };

inline const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::none: return "accepted";
    case RejectReason::lease_expired: return "lease_expired";
    case RejectReason::stale_version: return "stale_version";
    case RejectReason::hash_mismatch: return "hash_mismatch";
    case RejectReason::not_issued: return "not_issued";
  }
  return "?";
}

struct Verdict {
  bool accepted = false;
  RejectReason reason = RejectReason::none;
};

// The three-clause check on its own, for callers that hold the fields directly.
inline Verdict acceptance_predicate(TimePoint arrival, TimePoint lease_expiry, std::uint64_t behavior_version,
                                    std::uint64_t target_version, const Digest& reported, const Digest& expected) {
  if (arrival > lease_expiry) return {false, RejectReason::lease_expired};
  if (behavior_version != target_version) return {false, RejectReason::stale_version};
  if (reported != expected) return {false, RejectReason::hash_mismatch};
  return {true, RejectReason::none};
}

struct LeasePolicy {
  double multiplier = 2.5;
  Duration min_lease = std::chrono::seconds(5);
  Duration max_lease = std::chrono::seconds(120);
  Duration initial_median = std::chrono::seconds(4);
  std::size_t window = 32;
};

// Rolling median of recent job completion times, scaled and clamped.
class LeaseEstimator {
 public:
  explicit LeaseEstimator(LeasePolicy p = {}) : policy_(p) {
    if (policy_.min_lease > policy_.max_lease || policy_.min_lease <= Duration::zero() || policy_.window == 0)
      throw Error(ErrorCode::invalid_argument, "invalid lease policy");
  }

  void record(Duration completion) {
    samples_.push_back(completion);
    while (samples_.size() > policy_.window) samples_.pop_front();
  }

  Duration median() const {
    if (samples_.empty()) return policy_.initial_median;
    std::vector<Duration> v(samples_.begin(), samples_.end());
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const auto upper = *mid;
    const auto lower = *std::max_element(v.begin(), mid);
    return (lower + upper) / 2;
  }

  Duration lease() const {
    const auto scaled = std::chrono::duration_cast<Duration>(median() * policy_.multiplier);
    return std::clamp(scaled, policy_.min_lease, policy_.max_lease);
  }

  const LeasePolicy& policy() const { return policy_; }

 private:
  LeasePolicy policy_;
  std::deque<Duration> samples_;
};

struct ActorHello {
  ActorId actor_id = 0;
  std::string region;
  bool is_relay = false;
};

struct LedgerConfig {
  SchedulerParams scheduler;
  LeasePolicy lease;
  double initial_tau = 1000.0;
  std::size_t prompts_per_job = 1;  // G
};

struct PendingCommit {
  std::uint64_t version = 0;
  TimePoint sent_at{};
  TimePoint deadline{};
};

// Single-owner state machine: the hub serializes every call.
class JobLedger {
 public:
  using AcceptSink = std::function<void(const Job&, const Result&)>;

  explicit JobLedger(LedgerConfig cfg = {}) : cfg_(cfg), lease_(cfg.lease) {
    cfg_.scheduler.validate();
    if (cfg_.prompts_per_job == 0) throw Error(ErrorCode::invalid_argument, "prompts_per_job must be >= 1");
    if (!(cfg_.initial_tau > 0)) throw Error(ErrorCode::invalid_argument, "initial tau must be positive");
  }

  void set_accept_sink(AcceptSink sink) { sink_ = std::move(sink); }

  ActorRecord& register_actor(const ActorHello& hello, TimePoint now = Clock::now()) {
    if (actors_.count(hello.actor_id))
      throw Error(ErrorCode::duplicate_actor, "actor " + std::to_string(hello.actor_id) + " already registered");
    ActorRecord rec;
    rec.actor_id = hello.actor_id;
    rec.region = hello.region;
    rec.is_relay = hello.is_relay;
    rec.tau = cfg_.initial_tau;
    rec.last_seen = now;
    return actors_.emplace(hello.actor_id, std::move(rec)).first->second;
  }

  // Connection lost. Outstanding jobs stay issued until their leases lapse.
  void unregister_actor(ActorId id) {
    actors_.erase(id);
    pending_commits_.erase(id);
  }

  void heartbeat(ActorId id, std::uint64_t active, std::set<std::uint64_t> staged, bool generating,
                 TimePoint now = Clock::now()) {
    auto& a = actor(id);
    a.active_version = active;
    a.staged_versions = std::move(staged);
    a.generating = generating;
    a.last_seen = now;
    a.reachable = true;
    auto pc = pending_commits_.find(id);
    if (pc != pending_commits_.end() && pc->second.version == active) pending_commits_.erase(pc);
  }

  // Actors silent for longer than `timeout` become ineligible until they are heard from again.
  std::vector<ActorId> mark_unreachable(TimePoint now, Duration timeout) {
    std::vector<ActorId> out;
    for (auto& [id, a] : actors_) {
      if (a.reachable && now - a.last_seen > timeout) {
        a.reachable = false;
        out.push_back(id);
      }
    }
    return out;
  }

  // Runs the scheduler on the current snapshot and applies its bookkeeping.
  AllocationResult plan(std::uint64_t v, SchedulerMode mode = SchedulerMode::heterogeneity_aware) {
    std::vector<ActorRecord> snapshot;
    snapshot.reserve(actors_.size());
    for (const auto& [id, a] : actors_) snapshot.push_back(a);
    auto res = allocate(v, snapshot, cfg_.scheduler, mode);
    for (auto& [id, a] : actors_) a.excluded = false;
    for (auto id : res.excluded) actors_.at(id).excluded = true;
    for (const auto& [id, tau] : res.tau_after) actors_.at(id).tau = tau;
    return res;
  }

  std::vector<Job> issue_jobs(std::uint64_t v, const Digest& expected_hash,
                              const std::map<ActorId, std::uint64_t>& allocation, TimePoint now = Clock::now()) {
    std::uint64_t total = 0;
    for (const auto& [id, n] : allocation) total += n;
    if (total == 0) throw Error(ErrorCode::empty_allocation, "allocation assigns no jobs");
    const auto lease = lease_.lease();
    std::vector<Job> out;
    for (const auto& [id, n] : allocation) {
      for (std::uint64_t k = 0; k < n; ++k) {
        Job j;
        j.job_id = next_job_id_++;
        j.target_version = v;
        j.expected_hash = expected_hash;
        j.actor_id = id;
        j.issued_at = now;
        j.lease_expiry = now + lease;
        for (std::size_t p = 0; p < cfg_.prompts_per_job; ++p) j.prompt_ids.push_back(take_prompt());
        jobs_.emplace(j.job_id, j);
        out.push_back(std::move(j));
      }
    }
    return out;
  }

  // Order matters only for the reported reason: a job no longer issued is
  // not_issued regardless of the other clauses.
  Verdict accept_result(const Result& r) {
    auto it = jobs_.find(r.job_id);
    if (it == jobs_.end()) throw Error(ErrorCode::unknown_job, "unknown job " + std::to_string(r.job_id));
    Job& job = it->second;
    update_tau(r);
    if (job.state != JobState::issued) return {false, RejectReason::not_issued};
    auto verdict = acceptance_predicate(r.arrival_time, job.lease_expiry, r.behavior_version, job.target_version,
                                        r.reported_hash, job.expected_hash);
    if (!verdict.accepted) {
      expire(job);
      return verdict;
    }
    job.state = JobState::settled;
    for (auto p : job.prompt_ids) prompt_origin_.erase(p);
    lease_.record(r.arrival_time - job.issued_at);
    ++accepted_;
    if (sink_) sink_(job, r);
    return verdict;
  }

  std::size_t expire_leases(TimePoint now) {
    std::size_t returned = 0;
    for (auto& [id, job] : jobs_) {
      if (job.state == JobState::issued && job.lease_expiry < now) returned += expire(job);
    }
    return returned;
  }

  void commit_sent(ActorId id, std::uint64_t v, TimePoint now, Duration timeout) {
    pending_commits_[id] = PendingCommit{v, now, now + timeout};
  }

  // COMMIT_ACK: the actor has activated v.
  void commit_acked(ActorId id, std::uint64_t v) {
    auto& a = actor(id);
    a.active_version = v;
    for (auto it = a.staged_versions.begin(); it != a.staged_versions.end();) {
      it = (*it <= v) ? a.staged_versions.erase(it) : std::next(it);
    }
    auto pc = pending_commits_.find(id);
    if (pc != pending_commits_.end() && pc->second.version <= v) pending_commits_.erase(pc);
  }

  // Commits whose ack deadline passed. The actor simply stays on its old
  // version, and the next allocation gates it accordingly.
  std::vector<std::pair<ActorId, std::uint64_t>> commit_timeouts(TimePoint now) {
    std::vector<std::pair<ActorId, std::uint64_t>> out;
    for (auto it = pending_commits_.begin(); it != pending_commits_.end();) {
      if (now > it->second.deadline) {
        out.emplace_back(it->first, it->second.version);
        it = pending_commits_.erase(it);
      } else {
        ++it;
      }
    }
    return out;
  }

  bool has_actor(ActorId id) const { return actors_.count(id) > 0; }
  ActorRecord& actor(ActorId id) {
    auto it = actors_.find(id);
    if (it == actors_.end()) throw Error(ErrorCode::not_found, "unknown actor " + std::to_string(id));
    return it->second;
  }
  const std::map<ActorId, ActorRecord>& actors() const { return actors_; }
  const Job& job(std::uint64_t id) const {
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::unknown_job, "unknown job " + std::to_string(id));
    return it->second;
  }
  const std::map<std::uint64_t, Job>& jobs() const { return jobs_; }
  std::size_t pool_size() const { return pool_.size(); }
  std::size_t accepted_count() const { return accepted_; }
  Duration lease_duration() const { return lease_.lease(); }
  const LeaseEstimator& lease_estimator() const { return lease_; }
  const LedgerConfig& config() const { return cfg_; }
  const std::map<ActorId, PendingCommit>& pending_commits() const { return pending_commits_; }

  std::size_t jobs_in_state(JobState s) const {
    return static_cast<std::size_t>(
        std::count_if(jobs_.begin(), jobs_.end(), [s](const auto& kv) { return kv.second.state == s; }));
  }

 private:
  std::uint64_t take_prompt() {
    if (pool_.empty()) return next_prompt_id_++;
    const auto p = pool_.front();
    pool_.pop_front();
    auto origin = prompt_origin_.find(p);
    if (origin != prompt_origin_.end()) {
      auto& old = jobs_.at(origin->second);
      if (old.state == JobState::expired) old.state = JobState::reassigned;
      prompt_origin_.erase(origin);
    }
    return p;
  }

  std::size_t expire(Job& job) {
    job.state = JobState::expired;
    for (auto p : job.prompt_ids) {
      pool_.push_back(p);
      prompt_origin_[p] = job.job_id;
    }
    return job.prompt_ids.size();
  }

  void update_tau(const Result& r) {
    auto it = actors_.find(r.actor_id);
    if (it == actors_.end() || !(r.generation_seconds > 0)) return;
    it->second.tau =
        settle_update(it->second.tau, static_cast<double>(r.token_count), r.generation_seconds, cfg_.scheduler);
  }

  LedgerConfig cfg_;
  LeaseEstimator lease_;
  AcceptSink sink_;
  std::map<ActorId, ActorRecord> actors_;
  std::map<std::uint64_t, Job> jobs_;
  std::map<ActorId, PendingCommit> pending_commits_;
  std::deque<std::uint64_t> pool_;
  std::map<std::uint64_t, std::uint64_t> prompt_origin_;  // recycled prompt -> expired job
  std::uint64_t next_job_id_ = 1;
  std::uint64_t next_prompt_id_ = 0;
  std::size_t accepted_ = 0;
};

}  // namespace deltasync::control
