/*
 * Copyright 2026 The BASA Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "basa/transport.h"

#include <random>
#include <vector>

#include "basa/session.h"
#include "gmock/gmock.h"
#include "gtest/gtest.h"
#include "round_driver.h"

namespace basa {
namespace {

using ::testing::ElementsAre;

Frame RandomFrame(std::mt19937_64& rng) {
  Frame f;
  f.type = static_cast<MsgType>(1 + rng() % 8);
  f.round_id = rng();
  f.payload.resize(rng() % 300);
  for (auto& b : f.payload) b = static_cast<uint8_t>(rng());
  return f;
}

TEST(FrameTest, ConnectHeaderLayout) {
  auto b = Encode(Frame{MsgType::kConnect, 0, {}});
  ASSERT_TRUE(b.ok());
  EXPECT_EQ(*b, Bytes({1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}));
  auto c = Encode(Frame{MsgType::kModelPush, 0x0102030405060708, {0xaa, 0xbb}});
  EXPECT_EQ(*c, Bytes({8, 1, 2, 3, 4, 5, 6, 7, 8, 0, 0, 0, 2, 0xaa, 0xbb}));
}

TEST(FrameTest, RoundTripRandomFrames) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    Frame f = RandomFrame(rng);
    auto b = Encode(f);
    ASSERT_TRUE(b.ok());
    EXPECT_EQ(b->size(), kFrameHeaderSize + f.payload.size());
    auto d = Decode(*b);
    ASSERT_TRUE(d.ok());
    EXPECT_EQ(d->frame, f);
    EXPECT_EQ(d->consumed, b->size());
  }
}

TEST(FrameTest, DecodeLeavesFollowingBytes) {
  std::mt19937_64 rng(2);
  std::vector<Frame> frames;
  Bytes stream;
  for (int i = 0; i < 20; ++i) {
    frames.push_back(RandomFrame(rng));
    Bytes b = *Encode(frames.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  std::span<const uint8_t> rest(stream);
  for (const Frame& f : frames) {
    auto d = Decode(rest);
    ASSERT_TRUE(d.ok());
    EXPECT_EQ(d->frame, f);
    rest = rest.subspan(d->consumed);
  }
  EXPECT_TRUE(rest.empty());
}

TEST(FrameTest, TruncationIsIncomplete) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    Bytes b = *Encode(RandomFrame(rng));
    b.pop_back();
    auto d = Decode(b);
    ASSERT_FALSE(d.ok());
    EXPECT_TRUE(IsIncompleteFrame(d.status())) << d.status();
  }
  EXPECT_TRUE(IsIncompleteFrame(Decode(Bytes{}).status()));
}

TEST(FrameTest, UnknownTypeIsProtocolError) {
  Bytes b = *Encode(Frame{MsgType::kConnect, 0, {}});
  b[0] = 99;
  auto d = Decode(b);
  EXPECT_EQ(d.status().code(), absl::StatusCode::kInvalidArgument);
  b[0] = 0;
  EXPECT_EQ(Decode(b).status().code(), absl::StatusCode::kInvalidArgument);
}

TEST(UploadCodecTest, FixedLayoutLength) {
  UploadMsg up{FieldVector(std::vector<uint32_t>{0x7ffffffe}, kDefaultModulus),
               1.0,
               {}};
  Bytes p = EncodeUpload(up);
  // alpha f64 | d u32 | one element | count u32
  EXPECT_EQ(p.size(), 8u + 4 + 4 + 4);
  EXPECT_EQ(p.size(), UploadPayloadSize(1, {}));
  EXPECT_EQ(p, Bytes({0x3f, 0xf0, 0, 0, 0, 0, 0, 0,  // 1.0
                      0, 0, 0, 1,                   // d
                      0x7f, 0xff, 0xff, 0xfe,       // element
                      0, 0, 0, 0}));                // no ciphertexts
  auto back = DecodeUpload(p, kDefaultModulus);
  ASSERT_TRUE(back.ok());
  EXPECT_EQ(*back, up);
}

TEST(UploadCodecTest, RejectsMalformedPayloads) {
  UploadMsg up{FieldVector(std::vector<uint32_t>{5, 6}, 97), 0.5, {}};
  Bytes p = EncodeUpload(up);
  EXPECT_TRUE(DecodeUpload(p, 97).ok());
  // Element not below modulus.
  EXPECT_FALSE(DecodeUpload(p, 5).ok());
  Bytes shorter(p.begin(), p.end() - 1);
  EXPECT_FALSE(DecodeUpload(shorter, 97).ok());
  Bytes longer = p;
  longer.push_back(0);
  EXPECT_FALSE(DecodeUpload(longer, 97).ok());
  // A huge declared dimension must not allocate.
  Bytes huge = p;
  huge[8] = 0xff;
  EXPECT_FALSE(DecodeUpload(huge, 97).ok());
}

class ProtocolCodecTest : public ::testing::Test {
 protected:
  ProtocolCodecTest() : driver_({.buffer_size = 4, .dim = 5, .seed = 4}) {}
  testing::RoundDriver driver_;
};

TEST_F(ProtocolCodecTest, SlotGrantAndUploadRoundTrip) {
  testing::DrivenRound r = driver_.RunRound();
  for (const SlotRecord& rec : r.transcript.slots) {
    Bytes p = EncodeUpload(rec.upload);
    EXPECT_EQ(p.size(), UploadPayloadSize(5, rec.upload.outgoing));
    auto back = DecodeUpload(p, kDefaultModulus);
    ASSERT_TRUE(back.ok());
    EXPECT_EQ(*back, rec.upload);
  }
  std::mt19937_64 rng(5);
  // A grant with incoming ciphertexts: replay to slot 2 of the next round.
  ServerEngine& e = driver_.engine();
  for (int k = 0; k < 3; ++k) {
    auto g = e.OnConnect(driver_.now());
    ASSERT_TRUE(g.ok());
    Bytes p = EncodeSlotGrant(*g);
    auto back = DecodeSlotGrant(p);
    ASSERT_TRUE(back.ok());
    EXPECT_EQ(*back, *g);
    p.pop_back();
    EXPECT_FALSE(DecodeSlotGrant(p).ok());
    auto out = RunUser(driver_.RandomInput(), *g, driver_.authority(),
                       QuantizerConfig{}, testing::InverseSqrtStaleness, rng);
    ASSERT_TRUE(out.ok());
    ASSERT_TRUE(e.OnUpload(g->token, out->upload).ok());
  }
}

TEST(AaCodecTest, RequestsRoundTrip) {
  std::mt19937_64 rng(6);
  GrantToken tok = GrantToken::Generate(rng);
  std::vector<AaRequest> reqs{KeyRequest{{3, 4}, tok}, AaRegister{tok, {5, 6}},
                              AaRevoke{tok}, AaPublish{7, 8}};
  for (const AaRequest& req : reqs) {
    Frame f = EncodeAaRequest(req);
    EXPECT_EQ(f.type, MsgType::kAaKeyReq);
    auto back = DecodeAaRequest(f);
    ASSERT_TRUE(back.ok());
    EXPECT_EQ(back->index(), req.index());
  }
  auto k = DecodeAaRequest(EncodeAaRequest(KeyRequest{{3, 4}, tok}));
  EXPECT_EQ(std::get<KeyRequest>(*k).attribute, (Attribute{3, 4}));
  EXPECT_EQ(std::get<KeyRequest>(*k).token, tok);
  Frame bad{MsgType::kAaKeyReq, 0, {9}};
  EXPECT_FALSE(DecodeAaRequest(bad).ok());
}

TEST(AaCodecTest, RejectCarriesStatus) {
  Frame f = EncodeAaReject(3, absl::AlreadyExistsError("slot already claimed"));
  EXPECT_EQ(f.type, MsgType::kAaReject);
  absl::Status s = DecodeAaReject(f);
  EXPECT_EQ(s.code(), absl::StatusCode::kAlreadyExists);
  EXPECT_EQ(s.message(), "slot already claimed");
}

TEST(AaCodecTest, RemoteAuthorityMatchesLocal) {
  std::mt19937_64 rng(7);
  auto aa = AttributeAuthority::Create(rng);
  RemoteKeyAuthority remote(DirectAuthorityFactory(aa));
  auto set = remote.PublishRound(2, 3);
  ASSERT_TRUE(set.ok());
  EXPECT_EQ(*set, *aa.PublishRound(2, 3));
  GrantToken a = GrantToken::Generate(rng), b = GrantToken::Generate(rng);
  ASSERT_TRUE(remote.RegisterGrant(a, {2, 1}).ok());
  auto issue = remote.RequestKey({{2, 1}, a});
  ASSERT_TRUE(issue.ok()) << issue.status();
  EXPECT_EQ(issue->params, aa.public_params());
  EXPECT_EQ(PublicKeyOf(issue->key), set->keys[1]);
  ASSERT_TRUE(remote.RegisterGrant(b, {2, 1}).ok());
  EXPECT_EQ(remote.RequestKey({{2, 1}, b}).status().code(),
            absl::StatusCode::kAlreadyExists);
  ASSERT_TRUE(remote.RevokeGrant(a).ok());
  EXPECT_TRUE(remote.RequestKey({{2, 1}, b}).ok());
  EXPECT_EQ(remote.PublishRound(1, 3).status().code(),
            absl::StatusCode::kFailedPrecondition);
}

TEST(ModelPushTest, RoundTrip) {
  Frame ack = EncodeModelPush(4, UploadAck{.slot = 3, .committed = true});
  auto a = DecodeModelPush(ack, 97);
  ASSERT_TRUE(a.ok());
  EXPECT_EQ(std::get<UploadAck>(*a).slot, 3u);
  EXPECT_TRUE(std::get<UploadAck>(*a).committed);

  RoundResult rr{.aggregate = FieldVector(std::vector<uint32_t>{1, 2, 96}, 97),
                 .staleness_total = 2.5,
                 .round_id = 4,
                 .contributor_count = 3};
  auto r = DecodeModelPush(EncodeModelPush(4, rr), 97);
  ASSERT_TRUE(r.ok());
  const RoundResult& got = std::get<RoundResult>(*r);
  EXPECT_EQ(got.aggregate, rr.aggregate);
  EXPECT_EQ(got.staleness_total, 2.5);
  EXPECT_EQ(got.round_id, 4u);
  EXPECT_EQ(got.contributor_count, 3u);

  ModelSnapshot m{9, {0.5, -1.25}};
  auto s = DecodeModelPush(EncodeModelPush(9, m), 97);
  ASSERT_TRUE(s.ok());
  EXPECT_EQ(std::get<ModelSnapshot>(*s), m);
  EXPECT_FALSE(DecodeModelPush(Frame{MsgType::kModelPush, 0, {4}}, 97).ok());
  EXPECT_FALSE(DecodeModelPush(Frame{MsgType::kAbort, 0, {1}}, 97).ok());
}

TEST(LoopbackTest, LatencyIsExact) {
  LoopbackNetwork net;
  net.SetLatency(1, 2, 2500);
  auto arrival = net.Deliver(1, 2, Frame{MsgType::kConnect, 0, {}}, 1000);
  ASSERT_TRUE(arrival.ok());
  EXPECT_EQ(*arrival, 3500);
  EXPECT_FALSE(net.Receive(1, 2, 3499));
  auto d = net.Receive(1, 2, 3500);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->arrival, 3500);
  EXPECT_EQ(d->frame.type, MsgType::kConnect);
  EXPECT_EQ(net.InFlight(), 0u);
  // Reverse direction has its own latency.
  EXPECT_EQ(*net.Deliver(2, 1, Frame{}, 0), 0);
  EXPECT_EQ(*net.Deliver(1, 2, Frame{}, 0, 40), 2540);
}

TEST(LoopbackTest, FifoPerPair) {
  std::mt19937_64 rng(8);
  LoopbackNetwork net;
  net.SetLatency(1, 2, 100);
  std::vector<Frame> sent;
  Micros t = 0;
  for (int i = 0; i < 100; ++i) {
    sent.push_back(RandomFrame(rng));
    // Random per-frame transfer time; later frames must not overtake.
    ASSERT_TRUE(net.Deliver(1, 2, sent.back(), t, rng() % 500).ok());
    t += rng() % 50;
  }
  std::vector<Frame> got;
  Micros last = 0;
  while (auto d = net.Receive(1, 2, 1 << 30)) {
    EXPECT_GE(d->arrival, last);
    last = d->arrival;
    got.push_back(d->frame);
  }
  EXPECT_EQ(got, sent);
}

TEST(EndpointTest, SessionFlowAndViolations) {
  std::mt19937_64 rng(9);
  auto aa = AttributeAuthority::Create(rng);
  auto engine = *ServerEngine::Create({.buffer_size = 2, .dim = 3}, aa);
  QuantizerConfig cfg;
  ServerEndpoint ep(engine, cfg);
  ServerEndpoint::Session s1, s2;

  auto r = ep.Handle(s1, Frame{MsgType::kUpload, 0, {}}, 0);
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_EQ(r.frames[0].type, MsgType::kAbort);

  r = ep.Handle(s1, Frame{MsgType::kConnect, 0, {}}, 0);
  ASSERT_EQ(r.frames[0].type, MsgType::kSlotGrant);
  EXPECT_EQ(ep.Handle(s2, Frame{MsgType::kConnect, 0, {}}, 0).frames[0].type,
            MsgType::kAbort);

  // Garbage upload aborts the grant; the slot is offered again.
  r = ep.Handle(s1, Frame{MsgType::kUpload, 0, {1, 2, 3}}, 0);
  EXPECT_EQ(r.frames[0].type, MsgType::kAbort);
  EXPECT_FALSE(engine.state().pending);

  DirectServerChannel ch(ep, [] { return Micros{5}; });
  RemoteKeyAuthority remote(DirectAuthorityFactory(aa));
  std::optional<RoundResult> result;
  for (int k = 0; k < 2; ++k) {
    DirectServerChannel user(ep, [] { return Micros{5}; });
    auto out = RunUserSession(user, remote, {{1.0, 2.0, -3.0}, 0}, cfg,
                              testing::InverseSqrtStaleness, rng);
    ASSERT_TRUE(out.ok()) << out.status();
    EXPECT_EQ(out->ack.slot, uint32_t(k));
    EXPECT_EQ(out->ack.committed, k == 1);
    EXPECT_EQ(user.sent().size(), 2u);
    if (k == 1) result = out->round_result;
  }
  ASSERT_TRUE(result);
  EXPECT_THAT(UnmaskAggregate(*result, cfg), ElementsAre(1.0, 2.0, -3.0));
}

}  // namespace
}  // namespace basa
