#include <gtest/gtest.h>

#include <random>
#include <set>

#include "deltasync/control/job_ledger.hpp"

using namespace deltasync;
using namespace deltasync::control;
using namespace std::chrono_literals;

namespace {

Digest digest_of(std::uint8_t b) {
  Digest d{};
  d.fill(b);
  return d;
}

LedgerConfig config(std::size_t prompts_per_job = 2) {
  LedgerConfig c;
  c.scheduler.batch_size = 3;
  c.prompts_per_job = prompts_per_job;
  c.lease.initial_median = 4s;  // 2.5 x 4 s = 10 s lease
  return c;
}

Result result_for(const Job& j, TimePoint arrival) {
  Result r;
  r.job_id = j.job_id;
  r.actor_id = j.actor_id;
  r.behavior_version = j.target_version;
  r.reported_hash = j.expected_hash;
  r.arrival_time = arrival;
  r.token_count = 100;
  r.generation_seconds = 1.0;
  return r;
}

}  // namespace

TEST(Ledger, RegisterActors) {
  JobLedger ledger(config());
  ledger.register_actor({1, "us", false});
  ledger.register_actor({2, "us", true});
  ledger.register_actor({3, "eu", false});
  EXPECT_EQ(ledger.actors().size(), 3u);
  EXPECT_TRUE(ledger.actor(2).is_relay);
  EXPECT_DOUBLE_EQ(ledger.actor(1).tau, 1000.0);
  try {
    ledger.register_actor({2, "us", false});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::duplicate_actor);
  }
}

TEST(Ledger, IssueCreatesDisjointLeasedJobs) {
  JobLedger ledger(config());
  const auto now = Clock::now();
  auto jobs = ledger.issue_jobs(4, digest_of(7), {{1, 2}, {2, 1}}, now);
  ASSERT_EQ(jobs.size(), 3u);
  std::set<std::uint64_t> prompts;
  for (const auto& j : jobs) {
    EXPECT_EQ(j.lease_expiry - j.issued_at, std::chrono::duration_cast<Duration>(10s));
    EXPECT_EQ(j.target_version, 4u);
    EXPECT_EQ(j.expected_hash, digest_of(7));
    for (auto p : j.prompt_ids) EXPECT_TRUE(prompts.insert(p).second);
  }
  EXPECT_EQ(prompts.size(), 6u);
  EXPECT_THROW(ledger.issue_jobs(4, digest_of(7), {{1, 0}}, now), Error);
}

TEST(Ledger, PromptsNeverOverlapAcrossIssues) {
  JobLedger ledger(config(3));
  std::mt19937_64 rng(3);
  std::set<std::uint64_t> in_flight;
  auto now = Clock::now();
  for (int round = 0; round < 200; ++round) {
    auto jobs = ledger.issue_jobs(1, digest_of(1), {{1 + rng() % 3, 1 + rng() % 4}}, now);
    for (const auto& j : jobs) {
      for (auto p : j.prompt_ids) ASSERT_TRUE(in_flight.insert(p).second) << "prompt " << p << " reissued";
    }
    // Settle some, let others expire so their prompts are recycled.
    for (const auto& j : jobs) {
      if (rng() % 2) {
        ASSERT_TRUE(ledger.accept_result(result_for(j, now)).accepted);
        for (auto p : j.prompt_ids) in_flight.erase(p);
      }
    }
    now += 11s;
    for (const auto& [id, j] : ledger.jobs()) {
      if (j.state == JobState::issued && j.lease_expiry < now) {
        for (auto p : j.prompt_ids) in_flight.erase(p);
      }
    }
    ledger.expire_leases(now);
  }
}

TEST(Ledger, PredicateTruthTable) {
  for (int mask = 0; mask < 8; ++mask) {
    const bool lease_ok = mask & 1, version_ok = mask & 2, hash_ok = mask & 4;
    JobLedger ledger(config());
    const auto now = Clock::now();
    auto job = ledger.issue_jobs(6, digest_of(9), {{1, 1}}, now).front();
    auto r = result_for(job, lease_ok ? job.lease_expiry : job.lease_expiry + 1ms);
    if (!version_ok) r.behavior_version = 5;
    if (!hash_ok) r.reported_hash = digest_of(8);
    const auto v = ledger.accept_result(r);
    EXPECT_EQ(v.accepted, lease_ok && version_ok && hash_ok) << "mask " << mask;
    EXPECT_EQ(ledger.job(job.job_id).state, v.accepted ? JobState::settled : JobState::expired);
    RejectReason want = RejectReason::none;
    if (!lease_ok) {
      want = RejectReason::lease_expired;
    } else if (!version_ok) {
      want = RejectReason::stale_version;
    } else if (!hash_ok) {
      want = RejectReason::hash_mismatch;
    }
    EXPECT_EQ(v.reason, want);
  }
}

TEST(Ledger, LateResultRecyclesPrompts) {
  JobLedger ledger(config());
  const auto now = Clock::now();
  auto job = ledger.issue_jobs(2, digest_of(1), {{1, 1}}, now).front();
  auto v = ledger.accept_result(result_for(job, job.lease_expiry + 1ms));
  EXPECT_EQ(v.reason, RejectReason::lease_expired);
  EXPECT_EQ(ledger.pool_size(), job.prompt_ids.size());
  auto next = ledger.issue_jobs(2, digest_of(1), {{2, 1}}, now + 11s).front();
  EXPECT_EQ(next.prompt_ids, job.prompt_ids);
  EXPECT_EQ(ledger.job(job.job_id).state, JobState::reassigned);
}

TEST(Ledger, ExpireLeases) {
  JobLedger ledger(config());
  const auto t0 = Clock::now();
  auto a = ledger.issue_jobs(1, digest_of(1), {{1, 2}}, t0);
  auto b = ledger.issue_jobs(1, digest_of(1), {{2, 1}}, t0 + 5s);
  EXPECT_EQ(ledger.expire_leases(t0 + 9s), 0u);
  ledger.accept_result(result_for(a[0], t0 + 1s));
  EXPECT_EQ(ledger.expire_leases(t0 + 11s), 2u);  // a[1] only
  EXPECT_EQ(ledger.job(a[1].job_id).state, JobState::expired);
  EXPECT_EQ(ledger.job(b[0].job_id).state, JobState::issued);
  EXPECT_EQ(ledger.pool_size(), 2u);
}

TEST(Ledger, DuplicateSettlementRejectedButUpdatesTau) {
  JobLedger ledger(config(1));
  ledger.register_actor({1, "r", false});
  ledger.register_actor({2, "r", false});
  const auto t0 = Clock::now();
  auto orig = ledger.issue_jobs(3, digest_of(2), {{1, 1}}, t0).front();
  ledger.expire_leases(t0 + 11s);
  auto again = ledger.issue_jobs(3, digest_of(2), {{2, 1}}, t0 + 11s).front();
  EXPECT_TRUE(ledger.accept_result(result_for(again, t0 + 12s)).accepted);

  // The original holder finally reports the same prompts.
  auto late = result_for(orig, t0 + 13s);
  late.token_count = 500;
  late.generation_seconds = 1.0;
  const auto verdict = ledger.accept_result(late);
  EXPECT_FALSE(verdict.accepted);
  EXPECT_EQ(verdict.reason, RejectReason::not_issued);
  EXPECT_DOUBLE_EQ(ledger.actor(1).tau, 0.8 * 1000 + 0.2 * 500);

  // Exactly-once settlement of each prompt.
  std::size_t settled = 0;
  for (const auto& [id, j] : ledger.jobs()) settled += j.state == JobState::settled;
  EXPECT_EQ(settled, 1u);
  EXPECT_EQ(ledger.accepted_count(), 1u);
}

TEST(Ledger, UnknownJobIsAnError) {
  JobLedger ledger(config());
  Result r;
  r.job_id = 77;
  try {
    ledger.accept_result(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unknown_job);
  }
}

TEST(Ledger, AcceptForwardsToSink) {
  JobLedger ledger(config());
  std::vector<std::uint64_t> forwarded;
  ledger.set_accept_sink([&](const Job& j, const Result&) { forwarded.push_back(j.job_id); });
  const auto now = Clock::now();
  auto jobs = ledger.issue_jobs(0, digest_of(1), {{1, 2}}, now);
  ledger.accept_result(result_for(jobs[0], now));
  auto bad = result_for(jobs[1], now);
  bad.behavior_version = 1;
  ledger.accept_result(bad);
  EXPECT_EQ(forwarded, std::vector<std::uint64_t>{jobs[0].job_id});
}

TEST(Lease, RollingMedianScaledAndClamped) {
  LeasePolicy p;
  p.initial_median = 3s;
  LeaseEstimator est(p);
  EXPECT_EQ(est.lease(), std::chrono::duration_cast<Duration>(7500ms));
  for (int i = 0; i < 32; ++i) est.record(std::chrono::duration_cast<Duration>(1s));
  EXPECT_EQ(est.lease(), std::chrono::duration_cast<Duration>(5s));  // 2.5 s clamped up
  for (int i = 0; i < 32; ++i) est.record(std::chrono::duration_cast<Duration>(100s));
  EXPECT_EQ(est.lease(), std::chrono::duration_cast<Duration>(120s));  // clamped down
  for (int i = 0; i < 17; ++i) est.record(std::chrono::duration_cast<Duration>(10s));
  EXPECT_EQ(est.median(), std::chrono::duration_cast<Duration>(10s));  // window keeps the last 32
}

TEST(Ledger, PlanAppliesDecayAndExclusion) {
  JobLedger ledger(config());
  ledger.register_actor({1, "a", false});
  ledger.register_actor({2, "b", false});
  ledger.heartbeat(1, 3, {}, false);
  ledger.heartbeat(2, 1, {}, false);
  auto r = ledger.plan(3);
  EXPECT_EQ(r.allocation.shares.at(1), 3u);
  EXPECT_TRUE(ledger.actor(2).excluded);
  EXPECT_DOUBLE_EQ(ledger.actor(2).tau, 500.0);
  ledger.heartbeat(2, 3, {}, false);
  ledger.plan(3);
  EXPECT_FALSE(ledger.actor(2).excluded);
  EXPECT_DOUBLE_EQ(ledger.actor(2).tau, 500.0);
}

TEST(Ledger, CommitBookkeeping) {
  JobLedger ledger(config());
  ledger.register_actor({1, "a", false});
  ledger.heartbeat(1, 4, {5}, true);
  const auto t0 = Clock::now();
  ledger.commit_sent(1, 5, t0, 1s);
  EXPECT_TRUE(ledger.commit_timeouts(t0 + 500ms).empty());
  ledger.commit_acked(1, 5);
  EXPECT_EQ(ledger.actor(1).active_version, 5u);
  EXPECT_TRUE(ledger.actor(1).staged_versions.empty());
  EXPECT_TRUE(ledger.pending_commits().empty());

  ledger.heartbeat(1, 5, {6}, true);
  ledger.commit_sent(1, 6, t0, 1s);
  auto late = ledger.commit_timeouts(t0 + 2s);
  ASSERT_EQ(late.size(), 1u);
  EXPECT_EQ(late[0].second, 6u);
  EXPECT_EQ(ledger.actor(1).active_version, 5u);
}

TEST(Ledger, SilentActorsBecomeUnreachable) {
  JobLedger ledger(config());
  const auto t0 = Clock::now();
  ledger.register_actor({1, "a", false}, t0);
  ledger.register_actor({2, "a", false}, t0);
  ledger.heartbeat(1, 0, {}, false, t0 + 4s);
  EXPECT_EQ(ledger.mark_unreachable(t0 + 5s, 3s), std::vector<ActorId>{2});
  EXPECT_FALSE(ledger.actor(2).reachable);
  ledger.heartbeat(2, 0, {}, false, t0 + 6s);
  EXPECT_TRUE(ledger.actor(2).reachable);
}
