#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deltasync/codec/delta.hpp"
#include "deltasync/codec/parameter_set.hpp"

namespace deltasync::roles {

struct SyntheticModel {
  codec::ParameterSet params;
  codec::FusionMap fusion;
};

namespace detail {

inline void fill_random(Bytes& data, std::mt19937_64& rng) {
  std::size_t i = 0;
  for (; i + 8 <= data.size(); i += 8) {
    const std::uint64_t v = rng();
    std::memcpy(data.data() + i, &v, 8);
  }
  if (i < data.size()) {
    const std::uint64_t v = rng();
    std::memcpy(data.data() + i, &v, data.size() - i);
  }
}

}  // namespace detail

// Transformer-shaped parameter set totalling exactly `elements` scalars, with
// q/k/v fused into qkv_proj and gate/up into gate_up_proj (stacked in that order).
inline SyntheticModel make_model(std::uint64_t elements, codec::ElementType type, std::uint32_t layers,
                                 std::uint64_t seed) {
  struct Part {
    const char* name;
    std::uint64_t weight;
  };
  static constexpr Part kLayer[] = {{"q_proj", 4},     {"k_proj", 1},  {"v_proj", 1},   {"o_proj", 4},
                                    {"gate_proj", 11}, {"up_proj", 11}, {"down_proj", 11}};
  constexpr std::uint64_t kLayerWeight = 43;
  std::mt19937_64 rng(seed);
  SyntheticModel m{codec::ParameterSet(type), {}};
  const std::uint64_t per_layer_units = layers ? elements * 19 / 20 / (layers * kLayerWeight) : 0;
  if (layers == 0 || per_layer_units == 0) {
    Bytes data(elements * codec::element_width(type));
    detail::fill_random(data, rng);
    m.params.add("weights", {elements}, std::move(data));
    return m;
  }
  std::uint64_t used = 0;
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  std::vector<std::pair<std::string, std::uint64_t>> sizes;
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    for (const auto& p : kLayer) {
      sizes.emplace_back(prefix + p.name, per_layer_units * p.weight);
      used += per_layer_units * p.weight;
    }
    groups.push_back({prefix + "qkv_proj", {prefix + "q_proj", prefix + "k_proj", prefix + "v_proj"}});
    groups.push_back({prefix + "gate_up_proj", {prefix + "gate_proj", prefix + "up_proj"}});
  }
  sizes.insert(sizes.begin(), {"embed_tokens", elements - used});
  for (auto& [name, n] : sizes) {
    Bytes data(n * codec::element_width(type));
    detail::fill_random(data, rng);
    m.params.add(name, {n}, std::move(data));
  }
  m.fusion = codec::FusionMap::stack(m.params, groups);
  return m;
}

// Per-step sparse update: flips ceil(rho * N) distinct elements to fresh random
// bit patterns. A `cluster_fraction` of them come from contiguous runs (mean
// length `mean_run`), the rest are uniform over the flat parameter space.
struct UpdateGenerator {
  double rho = 0.01;
  double cluster_fraction = 0.0;
  double mean_run = 16.0;
  std::uint64_t seed = 1;

  std::uint64_t target_count(std::uint64_t n) const {
    return std::min<std::uint64_t>(n, static_cast<std::uint64_t>(std::ceil(rho * static_cast<double>(n) - 1e-9)));
  }

  // Sorted distinct flat positions for `step`.
  std::vector<std::uint64_t> positions(std::uint64_t n, std::uint64_t step) const {
    const auto k = target_count(n);
    std::vector<std::uint64_t> out;
    if (k == 0) return out;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull ^ (step + 1) * 0xD1B54A32D192ED03ull);
    std::vector<std::uint64_t> bits((n + 63) / 64, 0);
    std::uint64_t chosen = 0;
    auto take = [&](std::uint64_t p) {
      auto& word = bits[p >> 6];
      const std::uint64_t mask = 1ull << (p & 63);
      if (word & mask) return;
      word |= mask;
      ++chosen;
    };
    const auto clustered = static_cast<std::uint64_t>(cluster_fraction * static_cast<double>(k));
    std::uniform_int_distribution<std::uint64_t> pos(0, n - 1);
    std::geometric_distribution<std::uint64_t> run(1.0 / std::max(1.0, mean_run));
    while (chosen < clustered) {
      const auto start = pos(rng);
      const auto len = run(rng) + 1;
      for (std::uint64_t j = 0; j < len && start + j < n && chosen < clustered; ++j) take(start + j);
    }
    // Bulk picks use multiply-shift bounding over the raw generator; the bias is below n / 2^64.
    while (chosen < k) take(static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64));
    out.reserve(k);
    for (std::uint64_t w = 0; w < bits.size(); ++w) {
      std::uint64_t word = bits[w];
      while (word) {
        out.push_back(w * 64 + static_cast<std::uint64_t>(__builtin_ctzll(word)));
        word &= word - 1;
      }
    }
    return out;
  }

  // Mutates `params` in place; every selected lane ends up bitwise different.
  std::uint64_t apply(codec::ParameterSet& params, std::uint64_t step) const {
    const auto n = params.total_elements();
    const auto picks = positions(n, step);
    const auto w = params.width();
    std::mt19937_64 rng(seed ^ (step + 0x5bd1e995ull) * 0xff51afd7ed558ccdull);
    std::size_t t = 0;
    std::uint64_t base = 0;
    for (auto p : picks) {
      while (p >= base + params.tensors()[t].element_count()) base += params.tensors()[t++].element_count();
      auto* lane = params.tensors()[t].data.data() + (p - base) * w;
      std::uint64_t fresh = rng();
      std::uint64_t old = 0;
      std::memcpy(&old, lane, w);
      const std::uint64_t mask = w == 8 ? ~0ull : ((1ull << (8 * w)) - 1);
      if ((fresh & mask) == (old & mask)) fresh ^= 1;
      std::memcpy(lane, &fresh, w);
    }
    return picks.size();
  }
};

}  // namespace deltasync::roles
