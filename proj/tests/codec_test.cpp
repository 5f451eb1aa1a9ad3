#include <gtest/gtest.h>

#include <random>

#include "deltasync/codec/delta.hpp"
#include "deltasync/roles/synthetic.hpp"

using namespace deltasync;
using namespace deltasync::codec;

namespace {

Bytes f32_lanes(std::initializer_list<float> vals) {
  Bytes b(vals.size() * 4);
  std::size_t i = 0;
  for (float v : vals) std::memcpy(b.data() + 4 * i++, &v, 4);
  return b;
}

std::vector<float> f32_values(const Bytes& b) {
  std::vector<float> out(b.size() / 4);
  std::memcpy(out.data(), b.data(), b.size());
  return out;
}

ParameterSet one_tensor(std::initializer_list<float> vals) {
  ParameterSet p(ElementType::f32);
  p.add("w", {vals.size()}, f32_lanes(vals));
  return p;
}

}  // namespace

TEST(Extract, SingleChangedElementReplaceMode) {
  auto old_set = one_tensor({1, 2, 3});
  auto new_set = one_tensor({1, 5, 3});
  auto d = extract_delta(old_set, new_set, {}, DeltaMode::replace, 1, 0);
  ASSERT_EQ(d.tensors.size(), 1u);
  const auto& t = d.tensors[0];
  EXPECT_EQ(t.nnz, 1u);
  EXPECT_EQ(decode_indices(t.index_stream, t.nnz, t.element_count), (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(f32_values(t.values), (std::vector<float>{5}));
}

TEST(Extract, IdentityGivesEmptyDelta) {
  auto p = one_tensor({1, 2, 3});
  auto d = extract_delta(p, p, {}, DeltaMode::replace, 1, 0);
  EXPECT_EQ(d.total_nnz(), 0u);
  EXPECT_EQ(compute_rho(p, p).rho, 0.0);
  auto q = p;
  apply_delta(q, d);
  EXPECT_EQ(q, p);
}

TEST(Extract, FusedOffsets) {
  ParameterSet old_set(ElementType::f32);
  old_set.add("q", {2}, f32_lanes({0, 0}));
  old_set.add("k", {2}, f32_lanes({0, 0}));
  old_set.add("v", {2}, f32_lanes({0, 0}));
  auto new_set = old_set;
  new_set.find("q")->data = f32_lanes({0, 1});
  new_set.find("v")->data = f32_lanes({1, 0});
  auto fusion = FusionMap::stack(old_set, {{"qkv_proj", {"q", "k", "v"}}});
  ASSERT_EQ(fusion.entries()[0].components[2].offset, 4u);
  auto d = extract_delta(old_set, new_set, fusion, DeltaMode::replace, 1, 0);
  ASSERT_EQ(d.tensors.size(), 1u);
  EXPECT_EQ(d.tensors[0].name, "qkv_proj");
  EXPECT_EQ(d.tensors[0].element_count, 6u);
  // q changed at 1, v changed at 0 -> 4 + 0.
  EXPECT_EQ(decode_indices(d.tensors[0].index_stream, 2, 6), (std::vector<std::uint64_t>{1, 4}));
}

TEST(Extract, StructureMismatchesAreRejected) {
  auto a = one_tensor({1, 2, 3});
  auto b = one_tensor({1, 2});
  EXPECT_THROW(extract_delta(a, b, {}, DeltaMode::replace, 1, 0), Error);
  ParameterSet c(ElementType::f32);
  c.add("other", {3}, f32_lanes({1, 2, 3}));
  EXPECT_THROW(extract_delta(a, c, {}, DeltaMode::replace, 1, 0), Error);
  FusionMap bad;
  bad.add({"fused", {{"missing", 0}}});
  try {
    extract_delta(a, a, bad, DeltaMode::replace, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::fusion_source_missing);
  }
}

TEST(Extract, NegativeZeroCountsAsChanged) {
  auto a = one_tensor({0.0f, 1.0f});
  auto b = one_tensor({-0.0f, 1.0f});
  EXPECT_EQ(compute_rho(a, b).total_nonzeros, 1u);
}

TEST(Apply, ScatterStore) {
  auto p = one_tensor({1, 2, 3});
  TensorDelta t{"w", 3, 1, encode_indices(std::vector<std::uint64_t>{1}), f32_lanes({5}), DeltaMode::replace};
  auto d = DeltaCheckpoint::seal(1, 0, ElementType::f32, {t});
  apply_delta(p, d);
  EXPECT_EQ(f32_values(p.tensors()[0].data), (std::vector<float>{1, 5, 3}));
}

TEST(Apply, AdditiveModeAddsDifferences) {
  auto old_set = one_tensor({1, 2, 3});
  auto new_set = one_tensor({1, 2.5f, 3});
  auto d = extract_delta(old_set, new_set, {}, DeltaMode::additive, 1, 0);
  EXPECT_EQ(f32_values(d.tensors[0].values), (std::vector<float>{0.5f}));
  auto p = old_set;
  apply_delta(p, d);
  EXPECT_EQ(p, new_set);  // exact here because 2 + 0.5 is representable
}

TEST(Apply, ValidatesBeforeMutating) {
  ParameterSet p(ElementType::f32);
  p.add("a", {3}, f32_lanes({1, 2, 3}));
  p.add("b", {2}, f32_lanes({7, 8}));
  const auto before = p;
  TensorDelta good{"a", 3, 1, encode_indices(std::vector<std::uint64_t>{0}), f32_lanes({9}), DeltaMode::replace};
  TensorDelta bad{"b", 2, 1, encode_indices(std::vector<std::uint64_t>{5}), f32_lanes({9}), DeltaMode::replace};
  bad.element_count = 2;
  // Bypass the writer's validation to build an out-of-range checkpoint by hand.
  DeltaCheckpoint d;
  d.version = 1;
  d.base_version = 0;
  d.element_type = ElementType::f32;
  d.tensors = {good, bad};
  CheckpointView view;
  view.header = d.header();
  for (const auto& t : d.tensors) view.tensors.push_back(view_of(t));
  try {
    apply_delta(p, view);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::index_out_of_range);
  }
  EXPECT_EQ(p, before);

  TensorDelta unknown{"zzz", 3, 0, {}, {}, DeltaMode::replace};
  auto d2 = DeltaCheckpoint::seal(1, 0, ElementType::f32, {unknown});
  EXPECT_THROW(apply_delta(p, d2), Error);
  EXPECT_EQ(p, before);
}

TEST(Apply, HashMismatchIsRejected) {
  auto p = one_tensor({1, 2, 3});
  TensorDelta t{"w", 3, 1, encode_indices(std::vector<std::uint64_t>{1}), f32_lanes({5}), DeltaMode::replace};
  auto d = DeltaCheckpoint::seal(1, 0, ElementType::f32, {t});
  d.tensors[0].values = f32_lanes({6});
  try {
    apply_delta(p, d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::hash_mismatch);
  }
}

TEST(Rho, DirectRatio) {
  ParameterSet a(ElementType::f32), b(ElementType::f32);
  a.add("x", {4}, f32_lanes({0, 0, 0, 0}));
  a.add("y", {6}, f32_lanes({0, 0, 0, 0, 0, 0}));
  b.add("x", {4}, f32_lanes({1, 0, 0, 0}));
  b.add("y", {6}, f32_lanes({0, 2, 0, 0, 3, 0}));
  auto s = compute_rho(a, b);
  EXPECT_EQ(s.total_elements, 10u);
  EXPECT_EQ(s.total_nonzeros, 3u);
  EXPECT_DOUBLE_EQ(s.rho, 0.3);
}

TEST(Rho, BinomialMaskMatchesTarget) {
  // Independent change mask: each element flips with probability 0.01.
  std::mt19937_64 rng(3);
  std::bernoulli_distribution flip(0.01);
  ParameterSet a(ElementType::f16);
  a.add_zeros("w", {1000000});
  auto b = a;
  std::uint64_t flipped = 0;
  for (std::uint64_t i = 0; i < 1000000; ++i) {
    if (flip(rng)) {
      b.tensors()[0].data[2 * i] = 1;
      ++flipped;
    }
  }
  auto s = compute_rho(a, b);
  EXPECT_EQ(s.total_nonzeros, flipped);
  EXPECT_NEAR(s.rho, 0.01, 0.002);
}

TEST(Container, SerializeIsDeterministicAndRoundTrips) {
  auto m = roles::make_model(20000, ElementType::f16, 2, 5);
  auto next = m.params;
  roles::UpdateGenerator gen{0.03, 0.5, 8.0, 9};
  gen.apply(next, 1);
  auto d = extract_delta(m.params, next, m.fusion, DeltaMode::replace, 4, 3);
  auto b1 = d.serialize();
  auto b2 = d.serialize();
  EXPECT_EQ(b1, b2);
  auto back = DeltaCheckpoint::deserialize(b1);
  EXPECT_EQ(back, d);
  EXPECT_EQ(back.serialize(), b1);
  auto h = parse_header(b1);
  EXPECT_EQ(h.version, 4u);
  EXPECT_EQ(h.base_version, 3u);
  EXPECT_EQ(h.body_length + kCheckpointHeaderSize, b1.size());
  EXPECT_EQ(h.body_hash, sha256(ByteSpan(b1).subspan(kCheckpointHeaderSize)));
}

TEST(Container, ReaderRejectsCorruption) {
  auto p = one_tensor({1, 2, 3});
  auto q = one_tensor({1, 5, 3});
  auto bytes = extract_delta(p, q, {}, DeltaMode::replace, 1, 0).serialize();
  auto code_of = [](Bytes b) {
    try {
      parse_checkpoint(b);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::invalid_argument;
  };
  auto flipped = bytes;
  flipped.back() ^= 1;
  EXPECT_EQ(code_of(flipped), ErrorCode::hash_mismatch);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of(bad_magic), ErrorCode::bad_magic);
  auto future = bytes;
  future[4] = 2;
  EXPECT_EQ(code_of(future), ErrorCode::unsupported_format_version);
  auto cut = bytes;
  cut.pop_back();
  EXPECT_EQ(code_of(cut), ErrorCode::malformed);
}

TEST(Container, DenseSnapshotAppliesToZeros) {
  auto m = roles::make_model(5000, ElementType::f32, 1, 1);
  auto snap = dense_snapshot(m.params, m.fusion, 0, kNoBaseVersion);
  EXPECT_EQ(snap.version, snap.base_version + 1);
  for (const auto& t : snap.tensors) EXPECT_TRUE(t.dense());
  auto fused = fuse(m.params, m.fusion);
  ParameterSet zeros(fused.element_type());
  for (const auto& t : fused.tensors()) zeros.add_zeros(t.name, t.shape);
  auto bytes = snap.serialize();
  apply_delta(zeros, parse_checkpoint(bytes));
  EXPECT_EQ(zeros, fused);
}

// Fusion correctness: fused extraction applied to the fused layout equals
// per-source extraction applied to each source, then stacked.
TEST(Fusion, MatchesPerSourceApplication) {
  auto m = roles::make_model(30000, ElementType::f16, 3, 2);
  auto next = m.params;
  roles::UpdateGenerator{0.02, 0.3, 4.0, 77}.apply(next, 1);

  auto fused_old = fuse(m.params, m.fusion);
  auto fused_delta = extract_delta(m.params, next, m.fusion, DeltaMode::replace, 1, 0);
  apply_delta(fused_old, fused_delta);

  auto per_source = m.params;
  apply_delta(per_source, extract_delta(m.params, next, {}, DeltaMode::replace, 1, 0));
  EXPECT_EQ(fused_old, fuse(per_source, m.fusion));
}

// Losslessness property: apply(extract(W, W')) == W' for random sparse pairs.
TEST(Property, ReplaceModeIsLossless) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const auto n = 100 + rng() % 50000;
    const auto type = (rng() & 1) ? ElementType::f16 : ElementType::f32;
    auto m = roles::make_model(n, type, static_cast<std::uint32_t>(rng() % 3), rng());
    auto next = m.params;
    const double rhos[] = {0.001, 0.01, 0.03, 0.5};
    roles::UpdateGenerator gen{rhos[rng() % 4], (rng() % 2) ? 0.6 : 0.0, 8.0, rng()};
    gen.apply(next, trial);
    auto d = extract_delta(m.params, next, m.fusion, DeltaMode::replace, 1, 0);
    auto bytes = d.serialize();
    auto fused = fuse(m.params, m.fusion);
    apply_delta(fused, parse_checkpoint(bytes));
    ASSERT_EQ(fused, fuse(next, m.fusion)) << "trial " << trial;
    EXPECT_EQ(checkpoint_sparsity(parse_checkpoint(bytes)).total_nonzeros, compute_rho(m.params, next).total_nonzeros);
  }
}

TEST(Synthetic, UpdateFlipsExactCount) {
  auto m = roles::make_model(100000, ElementType::f16, 2, 1);
  auto next = m.params;
  roles::UpdateGenerator gen{0.01, 0.5, 16.0, 3};
  EXPECT_EQ(gen.apply(next, 1), 1000u);
  EXPECT_EQ(compute_rho(m.params, next).total_nonzeros, 1000u);
  auto again = m.params;
  gen.apply(again, 1);
  EXPECT_EQ(again, next);
}

TEST(HalfFloat, RoundTripsAllFiniteHalves) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const auto exp = (h >> 10) & 0x1F;
    if (exp == 0x1F) continue;
    ASSERT_EQ(float_to_half(half_to_float(static_cast<std::uint16_t>(h))), h) << h;
  }
}
