#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/varint.hpp"
#include "deltasync/common.hpp"

namespace deltasync::harness {

// Inference-layout tensors (name, element count) of the synthetic model,
// computed without allocating it. Matches make_model + inference_layout.
inline std::vector<std::pair<std::string, std::uint64_t>> synthetic_layout(std::uint64_t elements,
                                                                           std::uint32_t layers) {
  constexpr std::uint64_t kLayerWeight = 43;
  const std::uint64_t unit = layers ? elements * 19 / 20 / (layers * kLayerWeight) : 0;
  std::vector<std::pair<std::string, std::uint64_t>> out;
  if (layers == 0 || unit == 0) {
    out.emplace_back("weights", elements);
    return out;
  }
  out.emplace_back("embed_tokens", elements - unit * kLayerWeight * layers);
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "qkv_proj", unit * 6);
    out.emplace_back(p + "o_proj", unit * 4);
    out.emplace_back(p + "gate_up_proj", unit * 22);
    out.emplace_back(p + "down_proj", unit * 11);
  }
  return out;
}

// Fixed bytes of one tensor record: str16 name, three u64 counts, mode byte.
inline std::uint64_t tensor_record_overhead(const std::string& name) { return 2 + name.size() + 24 + 1; }

// E[varint length] of a gap drawn from a geometric distribution with success
// probability p: 1 + sum_k P(gap >= 128^k) = 1 + sum_k (1-p)^(128^k - 1).
inline double expected_varint_bytes_geometric(double p) {
  if (p >= 1) return 1.0;
  if (p <= 0) return 10.0;
  double e = 1.0;
  double threshold = 128.0;
  for (int k = 1; k < 10; ++k) {
    e += std::exp((threshold - 1) * std::log1p(-p));
    threshold *= 128.0;
  }
  return e;
}

// Mixture for clustered updates: the inner elements of contiguous runs have
// gap 1; run starts and uniform picks see gaps geometric in the density of
// run ends plus uniform picks.
inline double expected_varint_bytes(double rho, double cluster_fraction = 0.0, double mean_run = 16.0) {
  if (rho <= 0) return 0.0;
  const double c = std::clamp(cluster_fraction, 0.0, 1.0);
  const double m = std::max(1.0, mean_run);
  const double inner = c * (1.0 - 1.0 / m);
  const double starts_density = rho * (1.0 - inner);
  return inner * 1.0 + (1.0 - inner) * expected_varint_bytes_geometric(starts_density);
}

struct PayloadParams {
  std::uint64_t elements = 0;
  std::uint32_t layers = 4;
  double rho = 0.01;
  std::size_t width = 2;
  double cluster_fraction = 0.0;
  double mean_run = 16.0;
};

struct PayloadEstimate {
  double nnz = 0;
  double index_bytes = 0;
  double value_bytes = 0;
  std::uint64_t record_overhead = 0;  // per-tensor records
  std::uint64_t header_bytes = codec::kCheckpointHeaderSize;
  double total = 0;
  double mean_index_bytes = 0;     // per entry
  double naive_int32_bytes = 0;    // nnz x (4 + width) + overhead
  std::uint64_t full_bytes = 0;    // dense snapshot of the same model

  double reduction() const { return total > 0 ? static_cast<double>(full_bytes) / total : 0.0; }
  double naive_ratio() const { return total > 0 ? naive_int32_bytes / total : 0.0; }
};

// Expected serialized size of one sparse step.
inline PayloadEstimate payload_model(const PayloadParams& p) {
  PayloadEstimate e;
  const auto layout = synthetic_layout(p.elements, p.layers);
  const double nnz_total =
      p.rho <= 0 ? 0.0 : std::min<double>(static_cast<double>(p.elements), std::ceil(p.rho * static_cast<double>(p.elements) - 1e-9));
  const double eb = expected_varint_bytes(p.rho, p.cluster_fraction, p.mean_run);
  for (const auto& [name, n] : layout) {
    e.record_overhead += tensor_record_overhead(name);
    e.full_bytes += tensor_record_overhead(name) + n * p.width;
  }
  e.full_bytes += codec::kCheckpointHeaderSize;
  e.nnz = nnz_total;
  e.index_bytes = nnz_total * eb;
  e.value_bytes = nnz_total * static_cast<double>(p.width);
  e.total = e.index_bytes + e.value_bytes + static_cast<double>(e.record_overhead + e.header_bytes);
  e.mean_index_bytes = nnz_total > 0 ? eb : 0.0;
  e.naive_int32_bytes =
      nnz_total * (4.0 + static_cast<double>(p.width)) + static_cast<double>(e.record_overhead + e.header_bytes);
  return e;
}

// Monte-Carlo check of the gap model: mean varint bytes over sorted uniform
// positions without replacement.
inline double sampled_varint_bytes(std::uint64_t n, std::uint64_t nnz, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> picks;
  picks.reserve(nnz);
  // Selection sampling keeps positions sorted and distinct.
  std::uint64_t needed = nnz;
  for (std::uint64_t i = 0; i < n && needed > 0; ++i) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - i - 1);
    if (d(rng) < needed) {
      picks.push_back(i);
      --needed;
    }
  }
  if (picks.empty()) return 0.0;
  std::uint64_t bytes = 0, prev = 0;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    bytes += codec::varint_size(i == 0 ? picks[i] : picks[i] - prev);
    prev = picks[i];
  }
  return static_cast<double>(bytes) / static_cast<double>(picks.size());
}

}  // namespace deltasync::harness
