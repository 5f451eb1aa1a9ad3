#include <gtest/gtest.h>

#include "deltasync/control/messages.hpp"

using namespace deltasync;
using namespace deltasync::control;

namespace {

Digest digest_of(std::uint8_t seed) {
  Digest d{};
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<std::uint8_t>(seed + i);
  return d;
}

Message roundtrip(const Message& m) {
  auto frame = encode_message(m);
  EXPECT_EQ(load_le32(frame.data()), frame.size() - 4);
  return decode_message(ByteSpan(frame.data() + 4, frame.size() - 4));
}

std::vector<Message> samples() {
  return {
      RegisterMsg{7, "us-east", true, "127.0.0.1:9000"},
      IssueJobsMsg{{JobSpec{1, 3, digest_of(1), 5000, 400, {10, 11, 12, 13}}, JobSpec{2, 3, digest_of(1), 5000, 100, {14}}}},
      SubmitResultMsg{9, 7, 3, digest_of(2), 400, 123456, Bytes{1, 2, 3}},
      CommitMsg{4, digest_of(3)},
      CommitAckMsg{7, 4, digest_of(4)},
      HeartbeatMsg{7, 3, true, {4, 5}},
      ExcludedNoticeMsg{3, 812.25},
  };
}

}  // namespace

TEST(Messages, RoundTripEveryType) {
  for (const auto& m : samples()) {
    SCOPED_TRACE(to_string(type_of(m)));
    EXPECT_EQ(roundtrip(m), m);
  }
}

TEST(Messages, TypeBytesMatchTable) {
  const auto s = samples();
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto frame = encode_message(s[i]);
    EXPECT_EQ(frame[4], i + 1);
  }
}

TEST(Messages, CommitLayoutIsFixed) {
  auto frame = encode_message(CommitMsg{0x0102030405060708ull, digest_of(0)});
  ASSERT_EQ(frame.size(), 4u + 1 + 8 + 32);
  EXPECT_EQ(frame[5], 0x08);
  EXPECT_EQ(frame[12], 0x01);
}

TEST(Messages, RejectsUnknownType) {
  Bytes frame{0x42};
  EXPECT_THROW(decode_message(frame), Error);
  Bytes zero{0x00};
  EXPECT_THROW(decode_message(zero), Error);
}

TEST(Messages, RejectsTrailingAndTruncated) {
  for (const auto& m : samples()) {
    auto frame = encode_message(m);
    Bytes body(frame.begin() + 4, frame.end());
    auto longer = body;
    longer.push_back(0);
    EXPECT_THROW(decode_message(longer), Error);
    auto shorter = body;
    shorter.pop_back();
    EXPECT_THROW(decode_message(shorter), Error);
  }
}

TEST(Messages, RejectsBadFlag) {
  auto frame = encode_message(HeartbeatMsg{1, 2, false, {}});
  Bytes body(frame.begin() + 4, frame.end());
  body[1 + 16] = 2;
  EXPECT_THROW(decode_message(body), Error);
}

TEST(Messages, RejectsOversizedCounts) {
  Bytes body{static_cast<std::uint8_t>(MsgType::issue_jobs), 0xff, 0xff, 0xff, 0xff};
  EXPECT_THROW(decode_message(body), Error);
}

TEST(Messages, ChannelCarriesFramesOverLoopback) {
  transport::Listener listener(transport::Endpoint{"127.0.0.1", 0});
  std::thread server([&] {
    auto s = listener.accept(std::chrono::seconds(5));
    ASSERT_TRUE(s.valid());
    auto hello = transport::read_hello(s);
    EXPECT_EQ(hello.node_id, 7u);
    ControlChannel ch(std::move(s));
    for (const auto& m : samples()) {
      auto got = ch.receive();
      ASSERT_TRUE(got.has_value());
      EXPECT_EQ(*got, m);
    }
    EXPECT_FALSE(ch.receive().has_value());
  });
  {
    auto ch = ControlChannel::dial(listener.endpoint(), transport::Role::actor, 7);
    for (const auto& m : samples()) ch->send(m);
    ch->shutdown();
  }
  server.join();
}
