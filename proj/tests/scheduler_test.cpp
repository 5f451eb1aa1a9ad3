#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deltasync/control/scheduler.hpp"

using namespace deltasync;
using namespace deltasync::control;

namespace {

ActorRecord at(ActorId id, std::uint64_t ver, double tau, std::set<std::uint64_t> staged = {}) {
  ActorRecord a;
  a.actor_id = id;
  a.active_version = ver;
  a.tau = tau;
  a.staged_versions = std::move(staged);
  return a;
}

SchedulerParams params(std::uint64_t B) {
  SchedulerParams p;
  p.batch_size = B;
  return p;
}

}  // namespace

TEST(Scheduler, WorkedSplit) {
  std::vector<ActorRecord> actors{at(1, 4, 5000), at(2, 4, 2500)};
  auto r = allocate(4, actors, params(300));
  EXPECT_EQ(r.allocation.shares.at(1), 200u);
  EXPECT_EQ(r.allocation.shares.at(2), 100u);
  EXPECT_DOUBLE_EQ(r.allocation.eligible_total, 7500.0);
  EXPECT_TRUE(r.commit_targets.empty());
  EXPECT_TRUE(r.excluded.empty());
}

TEST(Scheduler, SingleEligibleGetsEverything) {
  std::vector<ActorRecord> actors{at(3, 7, 12.5)};
  EXPECT_EQ(allocate(7, actors, params(64)).allocation.shares.at(3), 64u);
}

TEST(Scheduler, RemainderTiesGoToLowerId) {
  std::vector<ActorRecord> actors{at(9, 1, 1), at(2, 1, 1), at(5, 1, 1)};
  auto r = allocate(1, actors, params(10));
  EXPECT_EQ(r.allocation.shares.at(2), 4u);
  EXPECT_EQ(r.allocation.shares.at(5), 3u);
  EXPECT_EQ(r.allocation.shares.at(9), 3u);
}

TEST(Scheduler, LaggardIsExcludedAndDecayed) {
  std::vector<ActorRecord> actors{at(1, 10, 800), at(2, 8, 1000)};
  auto r = allocate(10, actors, params(16));
  EXPECT_EQ(r.allocation.shares.at(2), 0u);
  EXPECT_EQ(r.allocation.shares.at(1), 16u);
  ASSERT_EQ(r.excluded, std::vector<ActorId>{2});
  EXPECT_DOUBLE_EQ(r.tau_after.at(2), 500.0);
}

TEST(Scheduler, PreviousVersionNeedsStagedDelta) {
  std::vector<ActorRecord> actors{at(1, 4, 100, {5}), at(2, 4, 100), at(3, 5, 100)};
  auto r = allocate(5, actors, params(10));
  EXPECT_GT(r.allocation.shares.at(1), 0u);
  EXPECT_EQ(r.allocation.shares.at(2), 0u);
  EXPECT_EQ(r.commit_targets, std::vector<ActorId>{1});
  EXPECT_EQ(r.excluded, std::vector<ActorId>{2});
}

TEST(Scheduler, GenesisEligibilityFromEmptyState) {
  std::vector<ActorRecord> actors{at(1, kNoVersion, 100, {0}), at(2, kNoVersion, 100)};
  auto r = allocate(0, actors, params(4));
  EXPECT_EQ(r.allocation.shares.at(1), 4u);
  EXPECT_EQ(r.commit_targets, std::vector<ActorId>{1});
}

TEST(Scheduler, UnreachableActorIsIneligible) {
  auto a = at(1, 3, 100);
  a.reachable = false;
  std::vector<ActorRecord> actors{a, at(2, 3, 100)};
  auto r = allocate(3, actors, params(8));
  EXPECT_EQ(r.allocation.shares.at(1), 0u);
  EXPECT_EQ(r.allocation.shares.at(2), 8u);
}

TEST(Scheduler, NoEligibleActorStalls) {
  std::vector<ActorRecord> actors{at(1, 1, 100)};
  try {
    allocate(5, actors, params(8));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::schedule_stall);
  }
}

TEST(Scheduler, ZeroShareEligibleIsNotDecayed) {
  std::vector<ActorRecord> actors{at(1, 2, 10000), at(2, 2, 1)};
  auto r = allocate(2, actors, params(3));
  EXPECT_EQ(r.allocation.shares.at(2), 0u);
  EXPECT_TRUE(r.excluded.empty());
  EXPECT_TRUE(r.tau_after.empty());
}

TEST(Scheduler, UniformModeIgnoresTau) {
  std::vector<ActorRecord> actors{at(1, 2, 5000), at(2, 2, 2500)};
  auto r = allocate(2, actors, params(300), SchedulerMode::uniform);
  EXPECT_EQ(r.allocation.shares.at(1), 150u);
  EXPECT_EQ(r.allocation.shares.at(2), 150u);
}

TEST(Scheduler, ParameterValidation) {
  std::vector<ActorRecord> actors{at(1, 0, 1)};
  auto p = params(0);
  EXPECT_THROW(allocate(0, actors, p), Error);
  p = params(1);
  p.alpha = 1.0;
  EXPECT_THROW(allocate(0, actors, p), Error);
  p = params(1);
  p.beta = 0.0;
  EXPECT_THROW(allocate(0, actors, p), Error);
}

TEST(Settle, DirectFormulaAndFixedPoint) {
  SchedulerParams p;
  EXPECT_DOUBLE_EQ(settle_update(1000, 500, 1.0, p), 900.0);
  EXPECT_DOUBLE_EQ(settle_update(1000, 2000, 2.0, p), 1000.0);
  EXPECT_DOUBLE_EQ(settle_update(1.0, 0, 1.0, p), 1.0);  // floored
  EXPECT_THROW(settle_update(1, 1, 0, p), Error);
  EXPECT_THROW(settle_update(1, -1, 1, p), Error);
}

TEST(Settle, GeometricConvergence) {
  SchedulerParams p;
  double tau = 4000;
  const double r = 1500;
  for (int k = 1; k <= 30; ++k) {
    tau = settle_update(tau, r * 2, 2.0, p);
    EXPECT_NEAR(std::abs(tau - r), std::pow(p.beta, k) * 2500, 1e-6);
  }
}

TEST(Scheduler, RandomizedProperties) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> tau_dist(1.0, 10000.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::uint64_t v = 5 + rng() % 100;
    const auto B = 1 + rng() % 1000;
    const int n = 1 + static_cast<int>(rng() % 12);
    std::vector<ActorRecord> actors;
    for (int i = 0; i < n; ++i) {
      const auto kind = rng() % 4;
      std::uint64_t ver = kind == 0 ? v : kind == 1 ? v - 1 : kind == 2 ? v - 2 - rng() % 3 : v - 1;
      std::set<std::uint64_t> staged;
      if (kind == 1) staged.insert(v);
      actors.push_back(at(static_cast<ActorId>(i * 3 + 1), ver, tau_dist(rng), staged));
    }
    actors[0].active_version = v;  // at least one eligible
    auto p = params(B);
    auto r = allocate(v, actors, p);

    std::uint64_t sum = 0;
    double T = 0;
    for (const auto& a : actors) {
      if (eligible_for(a, v)) T += a.tau;
    }
    for (const auto& a : actors) {
      const auto share = r.allocation.shares.at(a.actor_id);
      sum += share;
      if (!eligible_for(a, v)) {
        ASSERT_EQ(share, 0u);
        ASSERT_DOUBLE_EQ(r.tau_after.at(a.actor_id), std::max(1.0, 0.5 * a.tau));
      } else {
        ASSERT_LT(std::abs(double(share) / double(B) - a.tau / T), 1.0 / double(B) + 1e-12);
      }
    }
    ASSERT_EQ(sum, B);
    // Determinism.
    ASSERT_EQ(allocate(v, actors, p).allocation.shares, r.allocation.shares);

    // Monotone penalty: lowering one eligible actor's tau never raises its share.
    auto lowered = actors;
    lowered[0].tau *= std::uniform_real_distribution<double>(0.05, 0.99)(rng);
    auto r2 = allocate(v, lowered, p);
    ASSERT_LE(r2.allocation.shares.at(actors[0].actor_id), r.allocation.shares.at(actors[0].actor_id));
  }
}

TEST(Scheduler, ExclusionDecayTrajectory) {
  SchedulerParams p = params(10);
  std::vector<ActorRecord> actors{at(1, 20, 100), at(2, 10, 4096)};
  for (int k = 1; k <= 8; ++k) {
    auto r = allocate(20, actors, p);
    actors[1].tau = r.tau_after.at(2);
    EXPECT_DOUBLE_EQ(actors[1].tau, 4096.0 * std::pow(0.5, k));
  }
}
