#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/control/actor_record.hpp"

namespace deltasync::control {

struct SchedulerParams {
  std::uint64_t batch_size = 1;  // B, requests per step
  double alpha = 0.5;            // exclusion decay
  double beta = 0.8;             // EMA factor
  double min_tau = 1.0;          // floor for tau, tokens/s

  void validate() const {
    if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch size must be >= 1");
    if (!(alpha > 0 && alpha < 1)) throw Error(ErrorCode::invalid_argument, "alpha must lie in (0,1)");
    if (!(beta > 0 && beta < 1)) throw Error(ErrorCode::invalid_argument, "beta must lie in (0,1)");
    if (!(min_tau > 0)) throw Error(ErrorCode::invalid_argument, "min_tau must be positive");
  }
};

enum class SchedulerMode { heterogeneity_aware, uniform };

struct Allocation {
  std::uint64_t version = 0;
  std::map<ActorId, std::uint64_t> shares;  // every considered actor; 0 when ineligible
  double eligible_total = 0;                // T
};

struct AllocationResult {
  Allocation allocation;
  std::vector<ActorId> commit_targets;  // eligible actors still on v-1
  std::vector<ActorId> excluded;
  std::map<ActorId, double> tau_after;  // decayed estimates for excluded actors
};

// On v, or on v-1 with delta v fully staged.
inline bool eligible_for(const ActorRecord& a, std::uint64_t v) {
  if (!a.reachable) return false;
  if (a.active_version == v) return true;
  return a.active_version == v - 1 && a.staged_versions.count(v) > 0;
}

// Version-gated proportional split. Shares are floor(B * tau_a / T) with the
// leftover requests handed out by largest fractional remainder (ties -> lower
// actor id), so they always sum to B. Ineligible actors get nothing and have
// their estimate multiplied by alpha. Pure: the caller applies tau_after.
inline AllocationResult allocate(std::uint64_t v, std::span<const ActorRecord> actors, const SchedulerParams& p,
                                 SchedulerMode mode = SchedulerMode::heterogeneity_aware) {
  p.validate();
  AllocationResult out;
  out.allocation.version = v;
  std::vector<const ActorRecord*> elig;
  for (const auto& a : actors) {
    out.allocation.shares[a.actor_id] = 0;
    if (eligible_for(a, v)) {
      elig.push_back(&a);
    } else {
      out.excluded.push_back(a.actor_id);
      out.tau_after[a.actor_id] = std::max(p.min_tau, p.alpha * a.tau);
    }
  }
  if (elig.empty()) throw Error(ErrorCode::schedule_stall, "no eligible actor for version " + std::to_string(v));
  std::sort(elig.begin(), elig.end(), [](auto* x, auto* y) { return x->actor_id < y->actor_id; });

  auto weight = [&](const ActorRecord* a) { return mode == SchedulerMode::uniform ? 1.0 : a->tau; };
  double total = 0;
  for (auto* a : elig) total += weight(a);
  out.allocation.eligible_total = total;

  const auto B = p.batch_size;
  std::vector<std::uint64_t> share(elig.size());
  std::vector<double> frac(elig.size());
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < elig.size(); ++i) {
    const double quota = static_cast<double>(B) * weight(elig[i]) / total;
    share[i] = std::min<std::uint64_t>(B, static_cast<std::uint64_t>(std::floor(quota)));
    frac[i] = quota - static_cast<double>(share[i]);
    assigned += share[i];
  }
  // Float rounding can push the floors past B on pathological inputs; trim from the smallest fractions.
  std::vector<std::size_t> order(elig.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < B; k = (k + 1) % order.size()) {
    ++share[order[k]];
    ++assigned;
  }
  for (std::size_t k = order.size(); assigned > B;) {
    k = (k == 0 ? order.size() : k) - 1;
    if (share[order[k]] > 0) {
      --share[order[k]];
      --assigned;
    }
  }
  for (std::size_t i = 0; i < elig.size(); ++i) {
    out.allocation.shares[elig[i]->actor_id] = share[i];
    if (elig[i]->active_version != v) out.commit_targets.push_back(elig[i]->actor_id);
  }
  return out;
}

// EMA on settlement: tau <- beta * tau + (1 - beta) * tokens / elapsed, floored at min_tau.
inline double settle_update(double tau, double tokens, double elapsed_s, const SchedulerParams& p) {
  if (!(elapsed_s > 0)) throw Error(ErrorCode::invalid_argument, "elapsed must be positive");
  if (tokens < 0) throw Error(ErrorCode::invalid_argument, "tokens must be non-negative");
  return std::max(p.min_tau, p.beta * tau + (1.0 - p.beta) * (tokens / elapsed_s));
}

}  // namespace deltasync::control
