#include <gtest/gtest.h>

#include <random>

#include "deltasync/codec/varint.hpp"

using namespace deltasync;
using namespace deltasync::codec;

TEST(Varint, TwoByteAnchor) {
  EXPECT_EQ(varint_encode(198), (Bytes{0xC6, 0x01}));
  const Bytes b{0xC6, 0x01};
  auto r = varint_decode(b, 0);
  EXPECT_EQ(r.value, 198u);
  EXPECT_EQ(r.cursor, 2u);
}

TEST(Varint, SingleByteValues) {
  EXPECT_EQ(varint_encode(70), (Bytes{0x46}));
  EXPECT_EQ(varint_encode(0), (Bytes{0x00}));
  EXPECT_EQ(varint_encode(127), (Bytes{0x7F}));
  EXPECT_EQ(varint_decode(Bytes{0x46}, 0).value, 70u);
}

TEST(Varint, TwoByteBoundary) {
  // 188 = 60 + (1 << 7): low group 0x3C with continuation, then 0x01.
  EXPECT_EQ(varint_encode(188), (Bytes{0xBC, 0x01}));
  EXPECT_EQ(varint_encode(128), (Bytes{0x80, 0x01}));
  EXPECT_EQ(varint_size(16383), 2u);
  EXPECT_EQ(varint_size(16384), 3u);
}

TEST(Varint, MaxValueUsesTenBytes) {
  auto b = varint_encode(UINT64_MAX);
  ASSERT_EQ(b.size(), 10u);
  EXPECT_EQ(b.back(), 0x01);
  EXPECT_EQ(varint_decode(b, 0).value, UINT64_MAX);
}

TEST(Varint, DecodeAdvancesCursorThroughConcatenation) {
  Bytes b;
  for (std::uint64_t v : {1ull, 300ull, 0ull, 1ull << 40}) varint_encode(v, b);
  std::size_t cur = 0;
  std::vector<std::uint64_t> got;
  while (cur < b.size()) {
    auto r = varint_decode(b, cur);
    got.push_back(r.value);
    cur = r.cursor;
  }
  EXPECT_EQ(got, (std::vector<std::uint64_t>{1, 300, 0, 1ull << 40}));
}

namespace {
ErrorCode decode_error(const Bytes& b) {
  try {
    varint_decode(b, 0);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::malformed;
}
}  // namespace

TEST(Varint, RejectsDanglingContinuation) {
  EXPECT_EQ(decode_error({0x80}), ErrorCode::truncated);
  EXPECT_EQ(decode_error({0xC6}), ErrorCode::truncated);
  EXPECT_EQ(decode_error({}), ErrorCode::truncated);
}

TEST(Varint, RejectsOverlongEncodings) {
  EXPECT_EQ(decode_error({0x80, 0x00}), ErrorCode::overlong);
  EXPECT_EQ(decode_error({0xC6, 0x80, 0x00}), ErrorCode::overlong);
}

TEST(Varint, RejectsValuesWiderThan64Bits) {
  Bytes b(9, 0xFF);
  b.push_back(0x02);
  EXPECT_EQ(decode_error(b), ErrorCode::overflow);
  Bytes c(10, 0xFF);
  c.push_back(0x01);
  EXPECT_EQ(decode_error(c), ErrorCode::overflow);
}

TEST(Varint, RandomRoundTripAndMinimality) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200000; ++i) {
    // Spread values across all byte lengths.
    const std::uint64_t v = rng() >> (rng() % 64);
    auto b = varint_encode(v);
    ASSERT_EQ(b.size(), varint_size(v));
    auto r = varint_decode(b, 0);
    ASSERT_EQ(r.value, v);
    ASSERT_EQ(r.cursor, b.size());
    if (b.size() > 1) {
      ASSERT_NE(b.back(), 0);
    }
  }
}

TEST(Indices, GapEncoding) {
  std::vector<std::uint64_t> idx{5, 12, 200};
  EXPECT_EQ(encode_indices(idx), (Bytes{0x05, 0x07, 0xBC, 0x01}));
  EXPECT_EQ(encode_indices(std::vector<std::uint64_t>{0}), (Bytes{0x00}));
  EXPECT_TRUE(encode_indices(std::vector<std::uint64_t>{}).empty());
}

TEST(Indices, RejectsNonIncreasing) {
  EXPECT_THROW(encode_indices(std::vector<std::uint64_t>{3, 3}), Error);
  EXPECT_THROW(encode_indices(std::vector<std::uint64_t>{4, 2}), Error);
}

TEST(Indices, DecodeValidatesCountAndBounds) {
  const Bytes b{0x05, 0x07, 0xBC, 0x01};
  EXPECT_EQ(decode_indices(b, 3, 201), (std::vector<std::uint64_t>{5, 12, 200}));
  EXPECT_THROW(decode_indices(b, 3, 200), Error);  // 200 out of range
  EXPECT_THROW(decode_indices(b, 2, 1000), Error);
  EXPECT_THROW(decode_indices(b, 4, 1000), Error);
  EXPECT_THROW(decode_indices(Bytes{0x05, 0x00}, 2, 1000), Error);  // zero gap
}

TEST(Indices, RandomSortedRoundTrip) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint64_t> idx;
    std::uint64_t cur = rng() % 1000;
    const int n = static_cast<int>(rng() % 500);
    for (int i = 0; i < n; ++i) {
      idx.push_back(cur);
      cur += 1 + (rng() % ((rng() % 3 == 0) ? 100000 : 100));
    }
    auto b = encode_indices(idx);
    ASSERT_EQ(decode_indices(b, idx.size(), cur + 1), idx);
  }
}
