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

#include "basa/protocol.h"

#include <random>
#include <set>
#include <vector>

#include "gtest/gtest.h"
#include "round_driver.h"

namespace basa {
namespace {

using testing::DriverOptions;
using testing::InverseSqrtStaleness;
using testing::PlainSum;
using testing::RoundDriver;

double One(uint64_t) { return 1.0; }

class ThreeUserTest : public ::testing::Test {
 protected:
  ThreeUserTest()
      : rng_(31),
        aa_(AttributeAuthority::Create(rng_)),
        engine_(*ServerEngine::Create({.buffer_size = 3, .dim = 4}, aa_)) {}

  UserInput Input(double v) { return {{v, -v, 2 * v, 0.5}, 0}; }

  absl::StatusOr<UserOutcome> Run(const SlotGrant& g, const UserInput& in) {
    return RunUser(in, g, aa_, cfg_, One, rng_);
  }

  std::mt19937_64 rng_;
  QuantizerConfig cfg_;
  AttributeAuthority aa_;
  ServerEngine engine_;
};

TEST_F(ThreeUserTest, FirstConnectGetsSlotZero) {
  auto g = engine_.OnConnect(100);
  ASSERT_TRUE(g.ok());
  EXPECT_EQ(g->slot, 0u);
  EXPECT_TRUE(g->incoming.empty());
  EXPECT_EQ(g->round_id, 0u);
  EXPECT_EQ(g->deadline, 100 + kDefaultTimeout);
  EXPECT_EQ(g->attributes.buffer_size(), 3u);
  EXPECT_EQ(engine_.OnConnect(101).status().code(),
            absl::StatusCode::kUnavailable);
}

// Three users, slots 0..2. Slot 1 receives exactly c_01, slot 2 receives
// c_02 and c_12, slot 2 sends nothing, and the masks cancel.
TEST_F(ThreeUserTest, FullTrace) {
  std::vector<UserOutcome> users;
  for (uint32_t k = 0; k < 3; ++k) {
    auto g = engine_.OnConnect(k);
    ASSERT_TRUE(g.ok());
    ASSERT_EQ(g->slot, k);
    ASSERT_EQ(g->incoming.size(), k);
    for (uint32_t i = 0; i < k; ++i) {
      EXPECT_EQ(g->incoming[i], users[i].upload.outgoing[k - i - 1]);
    }
    auto out = Run(*g, Input(k + 1.0));
    ASSERT_TRUE(out.ok()) << out.status();
    EXPECT_EQ(out->upload.outgoing.size(), 2 - k);
    auto r = engine_.OnUpload(g->token, out->upload);
    ASSERT_TRUE(r.ok());
    EXPECT_EQ(r->has_value(), k == 2);
    users.push_back(*out);
    if (k == 2) {
      FieldVector sum(4, kDefaultModulus);
      for (const auto& u : users) sum += u.view.input;
      EXPECT_EQ((*r)->aggregate, sum);
      EXPECT_EQ((*r)->contributor_count, 3u);
      EXPECT_EQ((*r)->round_id, 0u);
      EXPECT_DOUBLE_EQ((*r)->staleness_total, 3.0);
      // Each user's masked vector differs from its input.
      for (const auto& u : {users[0], users[1]}) {
        EXPECT_NE(u.upload.masked_update, u.view.input);
      }
    }
  }
  // The user in the last slot received both seeds that were meant for it.
  EXPECT_EQ(users[2].view.incoming_seeds.at(0), users[0].view.outgoing_seeds.at(2));
  EXPECT_EQ(users[2].view.incoming_seeds.at(1), users[1].view.outgoing_seeds.at(2));
  EXPECT_EQ(users[1].view.incoming_seeds.at(0), users[0].view.outgoing_seeds.at(1));
  // Next round: fresh attributes, empty buffers.
  EXPECT_EQ(engine_.state().round_id, 1u);
  EXPECT_EQ(engine_.state().cursor, 0u);
  auto g = engine_.OnConnect(10);
  ASSERT_TRUE(g.ok());
  EXPECT_EQ(g->round_id, 1u);
}

TEST_F(ThreeUserTest, AttributesRegeneratedEachRound) {
  AttributeSet first = engine_.state().attributes;
  for (uint32_t k = 0; k < 3; ++k) {
    auto g = engine_.OnConnect(k);
    auto out = Run(*g, Input(1));
    ASSERT_TRUE(engine_.OnUpload(g->token, out->upload).ok());
  }
  AttributeSet second = engine_.state().attributes;
  EXPECT_EQ(second.round, 1u);
  for (uint32_t j = 0; j < 3; ++j) EXPECT_NE(first.keys[j].key, second.keys[j].key);
}

TEST_F(ThreeUserTest, StaleGrantCannotGetKey) {
  for (uint32_t k = 0; k < 3; ++k) {
    auto g = engine_.OnConnect(k);
    auto out = Run(*g, Input(1));
    ASSERT_TRUE(engine_.OnUpload(g->token, out->upload).ok());
  }
  // A grant from round 0 replayed in round 1.
  SlotGrant stale{.attributes = PublishAttributes(
                      MasterKey(internal::Key32{}), 0, 3),
                  .slot = 0,
                  .round_id = 0};
  auto out = Run(stale, Input(1));
  EXPECT_EQ(out.status().code(), absl::StatusCode::kAborted);
}

TEST_F(ThreeUserTest, TooManyOutgoingDoesNotConsumeSlot) {
  auto g0 = engine_.OnConnect(0);
  auto u0 = Run(*g0, Input(1));
  ASSERT_TRUE(engine_.OnUpload(g0->token, u0->upload).ok());

  auto g1 = engine_.OnConnect(1);
  auto u1 = Run(*g1, Input(2));
  UploadMsg bad = u1->upload;
  bad.outgoing.push_back(bad.outgoing.back());
  auto r = engine_.OnUpload(g1->token, bad);
  EXPECT_EQ(r.status().code(), absl::StatusCode::kInvalidArgument);
  EXPECT_EQ(engine_.state().cursor, 1u);
  EXPECT_FALSE(engine_.state().pending);

  auto again = engine_.OnConnect(2);
  ASSERT_TRUE(again.ok());
  EXPECT_EQ(again->slot, 1u);
  EXPECT_EQ(again->incoming, g1->incoming);
  // The aborted grant's key claim was released.
  EXPECT_TRUE(Run(*again, Input(2)).ok());
}

TEST_F(ThreeUserTest, UploadViolations) {
  auto g0 = engine_.OnConnect(0);
  auto u0 = Run(*g0, Input(1));
  EXPECT_EQ(engine_.OnUpload(GrantToken{}, u0->upload).status().code(),
            absl::StatusCode::kPermissionDenied);

  auto check_rejected = [&](UploadMsg m) {
    auto g = engine_.state().pending ? absl::StatusOr<SlotGrant>(*g0)
                                     : engine_.OnConnect(0);
    ASSERT_TRUE(g.ok());
    EXPECT_EQ(engine_.OnUpload(g->token, m).status().code(),
              absl::StatusCode::kInvalidArgument);
    EXPECT_EQ(engine_.state().cursor, 0u);
  };
  UploadMsg m = u0->upload;
  m.masked_update = FieldVector(5, kDefaultModulus);
  check_rejected(m);
  m = u0->upload;
  m.outgoing.pop_back();
  check_rejected(m);
  m = u0->upload;
  m.outgoing[0].attribute.slot = 2;  // duplicate target
  check_rejected(m);
  m = u0->upload;
  m.outgoing[0].attribute.round = 7;
  check_rejected(m);
  m = u0->upload;
  m.outgoing[0].origin_slot = 1;
  check_rejected(m);
  m = u0->upload;
  m.staleness = 0;
  check_rejected(m);
  EXPECT_EQ(engine_.OnUpload(GrantToken{}, u0->upload).status().code(),
            absl::StatusCode::kFailedPrecondition);
}

TEST_F(ThreeUserTest, TimeoutReoffersSameSlot) {
  auto g0 = engine_.OnConnect(0);
  ASSERT_TRUE(engine_.OnUpload(g0->token, Run(*g0, Input(1))->upload).ok());
  const RoundState before = engine_.state();

  auto g1 = engine_.OnConnect(1000);
  ASSERT_TRUE(g1.ok());
  EXPECT_FALSE(engine_.OnTimeout(g1->deadline - 1));
  for (int i = 0; i < 3; ++i) {
    auto g = i == 0 ? g1 : engine_.OnConnect(1000);
    ASSERT_TRUE(g.ok());
    EXPECT_EQ(g->slot, 1u);
    EXPECT_EQ(g->incoming, g1->incoming);
    EXPECT_TRUE(engine_.OnTimeout(g->deadline));
    EXPECT_EQ(engine_.state().cursor, 1u);
    EXPECT_EQ(engine_.state().accumulator, before.accumulator);
    EXPECT_EQ(engine_.state().ciphertext_buffers, before.ciphertext_buffers);
  }
  EXPECT_FALSE(engine_.OnTimeout(1u << 30));
  EXPECT_EQ(engine_.state().cursor, 1u);
}

TEST_F(ThreeUserTest, DroppedUserCannotUploadLate) {
  auto g0 = engine_.OnConnect(0);
  auto late = Run(*g0, Input(1));
  ASSERT_TRUE(late.ok());
  ASSERT_TRUE(engine_.OnTimeout(g0->deadline));
  auto g0b = engine_.OnConnect(g0->deadline + 1);
  EXPECT_EQ(g0b->slot, 0u);
  EXPECT_EQ(engine_.OnUpload(g0->token, late->upload).status().code(),
            absl::StatusCode::kPermissionDenied);
  EXPECT_TRUE(engine_.OnUpload(g0b->token, Run(*g0b, Input(1))->upload).ok());
}

TEST_F(ThreeUserTest, UserAbortsOnTamperedIncoming) {
  auto g0 = engine_.OnConnect(0);
  ASSERT_TRUE(engine_.OnUpload(g0->token, Run(*g0, Input(1))->upload).ok());
  auto g1 = engine_.OnConnect(1);
  SlotGrant tampered = *g1;
  tampered.incoming[0].ciphertext[40] ^= 1;
  EXPECT_EQ(Run(tampered, Input(1)).status().code(), absl::StatusCode::kAborted);
  SlotGrant missing = *g1;
  missing.incoming.clear();
  EXPECT_EQ(Run(missing, Input(1)).status().code(), absl::StatusCode::kAborted);
}

TEST_F(ThreeUserTest, AaRejectionAborts) {
  auto g0 = engine_.OnConnect(0);
  SlotGrant forged = *g0;
  forged.token = GrantToken{};
  EXPECT_EQ(Run(forged, Input(1)).status().code(), absl::StatusCode::kAborted);
}

TEST_F(ThreeUserTest, LastSlotSendsNoCiphertexts) {
  for (uint32_t k = 0; k < 3; ++k) {
    auto g = engine_.OnConnect(k);
    auto out = Run(*g, Input(1));
    ASSERT_TRUE(out.ok());
    if (k == 2) {
      EXPECT_TRUE(out->upload.outgoing.empty());
      EXPECT_EQ(out->view.incoming_seeds.size(), 2u);
    }
    ASSERT_TRUE(engine_.OnUpload(g->token, out->upload).ok());
  }
}

TEST(SingleSlotTest, AggregateIsTheUpdate) {
  std::mt19937_64 rng(5);
  auto aa = AttributeAuthority::Create(rng);
  auto engine = *ServerEngine::Create({.buffer_size = 1, .dim = 3}, aa);
  QuantizerConfig cfg;
  auto g = engine.OnConnect(0);
  UserInput in{{0.25, -1.5, 3.0}, 0};
  auto out = RunUser(in, *g, aa, cfg, InverseSqrtStaleness, rng);
  ASSERT_TRUE(out.ok());
  EXPECT_TRUE(out->upload.outgoing.empty());
  EXPECT_EQ(out->upload.staleness, 1.0);
  // All inputs are on the grid, so quantization is exact.
  EXPECT_EQ(out->upload.masked_update,
            FieldVector(std::vector<uint32_t>{16384, uint32_t(kDefaultModulus - 98304),
                                              196608},
                        kDefaultModulus));
  auto r = engine.OnUpload(g->token, out->upload);
  ASSERT_TRUE(r.ok() && r->has_value());
  EXPECT_EQ((*r)->aggregate, out->upload.masked_update);
  auto v = UnmaskAggregate(**r, cfg);
  EXPECT_EQ(v, in.update);
}

TEST(StalenessTest, AlphaFollowsModelAge) {
  std::mt19937_64 rng(6);
  auto aa = AttributeAuthority::Create(rng);
  auto engine = *ServerEngine::Create({.buffer_size = 1, .dim = 1}, aa);
  QuantizerConfig cfg;
  // Advance to round 3.
  for (int t = 0; t < 3; ++t) {
    auto g = engine.OnConnect(0);
    auto out = RunUser({{1.0}, uint64_t(t)}, *g, aa, cfg, InverseSqrtStaleness, rng);
    EXPECT_EQ(out->upload.staleness, 1.0);
    ASSERT_TRUE(engine.OnUpload(g->token, out->upload).ok());
  }
  auto g = engine.OnConnect(0);
  auto out = RunUser({{1.0}, 0}, *g, aa, cfg, InverseSqrtStaleness, rng);
  EXPECT_DOUBLE_EQ(out->upload.staleness, 0.5);
  EXPECT_NEAR(Dequantize(out->view.input, cfg)[0], 0.5, 1.0 / cfg.scale);
  EXPECT_EQ(RunUser({{1.0}, 4}, *g, aa, cfg, InverseSqrtStaleness, rng)
                .status()
                .code(),
            absl::StatusCode::kInvalidArgument);
}

TEST(UnmaskTest, WeightedMeans) {
  QuantizerConfig cfg;
  std::mt19937_64 rng(7);
  std::vector<double> v{1.1, -0.3, 7.77};
  auto q = [&](double a) {
    std::vector<double> s(v);
    for (double& x : s) x *= a;
    return Quantize(s, cfg, rng);
  };
  RoundResult equal{.aggregate = q(1) + q(1), .staleness_total = 2};
  RoundResult weighted{.aggregate = q(1) + q(0.5), .staleness_total = 1.5};
  RoundResult single{.aggregate = q(1), .staleness_total = 1};
  for (size_t i = 0; i < v.size(); ++i) {
    EXPECT_NEAR(UnmaskAggregate(equal, cfg)[i], v[i], 2 / cfg.scale);
    EXPECT_NEAR(UnmaskAggregate(weighted, cfg)[i], v[i], 2 / cfg.scale);
    EXPECT_NEAR(UnmaskAggregate(single, cfg)[i], v[i], 1 / cfg.scale);
  }
  RoundResult zero{.aggregate = q(1), .staleness_total = 0};
  EXPECT_THROW(UnmaskAggregate(zero, cfg), std::invalid_argument);
}

TEST(CollusionTest, DocumentedCases) {
  RoundDriver driver({.buffer_size = 6, .dim = 16, .seed = 8});
  RoundTranscript t = driver.RunRound().transcript;
  // Everyone after slot 2 colludes: the server learns the honest prefix sum.
  std::set<uint32_t> late{3, 4, 5};
  EXPECT_EQ(CollusionView(t, 2, late), HonestPrefixSum(t, 2, late));
  // Honest users remain after the prefix: the residual is masked.
  std::set<uint32_t> some{4};
  EXPECT_NE(CollusionView(t, 2, some), HonestPrefixSum(t, 2, some));
  // No colluders, full round: the aggregate.
  FieldVector total(16, kDefaultModulus);
  for (const auto& r : t.slots) total += r.upload.masked_update;
  EXPECT_EQ(CollusionView(t, 5, {}), total);
  EXPECT_EQ(total, PlainSum(t));
}

// Residual stays masked for every colluder set that leaves an honest slot
// after the prefix, and changes when only the honest seeds change.
TEST(CollusionTest, ResidualDependsOnHonestMasks) {
  std::mt19937_64 pick(9);
  for (int trial = 0; trial < 40; ++trial) {
    const uint32_t k = 3 + pick() % 8;
    RoundDriver a({.buffer_size = k, .dim = 12, .seed = 100 + uint64_t(trial)});
    RoundTranscript t = a.RunRound().transcript;
    const uint32_t last = pick() % (k - 1);
    std::set<uint32_t> colluders;
    for (uint32_t i = 0; i < k; ++i) {
      if (pick() % 2) colluders.insert(i);
    }
    uint32_t honest_after = last + 1 + pick() % (k - last - 1);
    colluders.erase(honest_after);
    uint32_t honest_count = 0;
    for (uint32_t i = 0; i < k; ++i) honest_count += !colluders.contains(i);
    if (honest_count < 2) colluders.erase(*colluders.begin());
    bool prefix_has_honest = false;
    for (uint32_t i = 0; i <= last; ++i) {
      prefix_has_honest |= !colluders.contains(i);
    }
    if (!prefix_has_honest) colluders.erase(0);

    FieldVector residual = CollusionView(t, last, colluders);
    EXPECT_NE(residual, HonestPrefixSum(t, last, colluders)) << trial;

    // Same inputs, fresh seeds for honest users only.
    RoundTranscript t2 = t;
    std::mt19937_64 reseed(1000 + trial);
    for (uint32_t i = 0; i < k; ++i) {
      if (colluders.contains(i)) continue;
      SlotRecord& rec = t2.slots[i];
      for (auto& [j, s] : rec.view.outgoing_seeds) {
        FieldVector old = Expand(s, t.dim, t.modulus);
        s = Seed::Generate(reseed);
        rec.upload.masked_update += Expand(s, t.dim, t.modulus) - old;
        t2.slots[j].view.incoming_seeds[i] = s;
        t2.slots[j].upload.masked_update -= Expand(s, t.dim, t.modulus) - old;
      }
    }
    EXPECT_EQ(PlainSum(t2), PlainSum(t));
    EXPECT_EQ(HonestPrefixSum(t2, last, colluders),
              HonestPrefixSum(t, last, colluders));
    EXPECT_NE(CollusionView(t2, last, colluders), residual) << trial;
  }
}

// Mask cancellation, slot conservation and ciphertext addressing across
// random buffer sizes, dimensions and drop/timeout interleavings.
TEST(ProtocolProperty, MaskCancellationWithDrops) {
  std::mt19937_64 pick(10);
  for (int trial = 0; trial < 24; ++trial) {
    DriverOptions opts{.buffer_size = uint32_t(1 + pick() % 64),
                       .dim = size_t(1 + pick() % 2000),
                       .drop_probability = 0.2,
                       .seed = 500 + uint64_t(trial)};
    RoundDriver driver(opts);
    for (int round = 0; round < 2; ++round) {
      testing::DrivenRound r = driver.RunRound();
      ASSERT_EQ(r.transcript.slots.size(), opts.buffer_size);
      EXPECT_EQ(r.result.contributor_count, opts.buffer_size);
      EXPECT_EQ(r.result.aggregate, PlainSum(r.transcript)) << trial;
      double alpha = 0;
      for (uint32_t i = 0; i < opts.buffer_size; ++i) {
        const SlotRecord& rec = r.transcript.slots[i];
        EXPECT_EQ(rec.view.slot, i);
        alpha += rec.view.staleness;
        // Inputs are the scaled updates up to one grid step.
        auto back = Dequantize(rec.view.input, opts.quantizer);
        for (size_t c = 0; c < opts.dim; ++c) {
          ASSERT_NEAR(back[c], rec.view.staleness * r.inputs[i].update[c],
                      1.0 / opts.quantizer.scale);
        }
        for (const SealedSeed& c : rec.upload.outgoing) {
          EXPECT_EQ(c.origin_slot, i);
          EXPECT_GT(c.attribute.slot, i);
          EXPECT_EQ(c.attribute.round, r.result.round_id);
        }
      }
      EXPECT_DOUBLE_EQ(r.result.staleness_total, alpha);
    }
  }
}

TEST(ProtocolProperty, BufferInvariantsDuringRound) {
  RoundDriver driver({.buffer_size = 8, .dim = 4, .seed = 11});
  ServerEngine& e = driver.engine();
  std::mt19937_64 rng(12);
  uint32_t last_cursor = 0;
  for (int step = 0; step < 40 && e.state().round_id == 0; ++step) {
    auto g = e.OnConnect(step * 10);
    ASSERT_TRUE(g.ok());
    auto out = RunUser(driver.RandomInput(), *g, driver.authority(),
                       QuantizerConfig{}, InverseSqrtStaleness, rng);
    ASSERT_TRUE(out.ok());
    if (rng() % 3 == 0) {
      e.Abort(g->token);
    } else {
      ASSERT_TRUE(e.OnUpload(g->token, out->upload).ok());
    }
    const RoundState& s = e.state();
    if (s.round_id != 0) break;
    EXPECT_GE(s.cursor, last_cursor);
    last_cursor = s.cursor;
    for (uint32_t j = 0; j < s.buffer_size; ++j) {
      EXPECT_LE(s.ciphertext_buffers[j].size(), std::min(s.cursor, j));
      for (const SealedSeed& c : s.ciphertext_buffers[j]) {
        EXPECT_EQ(c.attribute, (Attribute{0, j}));
        EXPECT_LT(c.origin_slot, j);
      }
    }
  }
  EXPECT_EQ(e.state().round_id, 1u);
}

TEST(ServerConfigTest, Validation) {
  std::mt19937_64 rng(13);
  auto aa = AttributeAuthority::Create(rng);
  EXPECT_FALSE(ServerEngine::Create({.buffer_size = 0, .dim = 3}, aa).ok());
  EXPECT_FALSE(ServerEngine::Create({.dim = 3, .timeout = -1}, aa).ok());
}

}  // namespace
}  // namespace basa
