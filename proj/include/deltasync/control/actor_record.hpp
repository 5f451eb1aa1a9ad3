#pragma once

#include <cstdint>
#include <limits>
#include <set>
#include <string>

#include "deltasync/common.hpp"

namespace deltasync::control {

using ActorId = std::uint64_t;

// "No version yet". Arithmetic on versions is modulo 2^64, so kNoVersion + 1 == 0
// and an actor holding nothing is exactly one version behind genesis.
constexpr std::uint64_t kNoVersion = std::numeric_limits<std::uint64_t>::max();

// a > b where either may be "no version".
inline bool version_after(std::uint64_t a, std::uint64_t b) {
  return b == kNoVersion ? a != kNoVersion : (a != kNoVersion && a > b);
}

struct ActorRecord {
  ActorId actor_id = 0;
  std::string region;
  bool is_relay = false;
  std::uint64_t active_version = kNoVersion;
  std::set<std::uint64_t> staged_versions;  // fully received and hash-verified
  double tau = 1.0;                          // tokens/s estimate
  TimePoint last_seen{};
  bool excluded = false;
  bool reachable = true;  // heartbeats arriving; unreachable actors are never eligible
  bool generating = false;
};

}  // namespace deltasync::control
