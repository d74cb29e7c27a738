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

// Buffered asynchronous secure aggregation.
//
// The server keeps a buffer of K slots. Users connect one at a time; the user
// granted slot k receives the sealed seeds addressed to slot k by the k users
// before it, subtracts their expansions, adds fresh masks for every later slot
// and seals those seeds to the later slots' attributes:
//
//   y_k = x_k - sum_{i<k} PRG(s_ik) + sum_{k<j<K} PRG(s_kj)
//
// Every seed is added once and subtracted once, so sum_k y_k == sum_k x_k.
// Slots are 0-based throughout.

#ifndef BASA_PROTOCOL_H_
#define BASA_PROTOCOL_H_

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "basa/field.h"
#include "basa/prg.h"
#include "basa/random.h"
#include "basa/seedvault.h"

namespace basa {

// Microseconds on whatever clock drives the engine (simulated or wall).
using Micros = int64_t;

inline constexpr Micros kDefaultTimeout = 30'000'000;

struct SlotGrant {
  AttributeSet attributes;
  uint32_t slot = 0;
  std::vector<SealedSeed> incoming;
  uint64_t round_id = 0;
  GrantToken token;
  Micros deadline = 0;

  friend bool operator==(const SlotGrant&, const SlotGrant&) = default;
};

struct UploadMsg {
  FieldVector masked_update;
  double staleness = 1.0;
  std::vector<SealedSeed> outgoing;

  friend bool operator==(const UploadMsg&, const UploadMsg&) = default;
};

struct RoundResult {
  FieldVector aggregate;
  double staleness_total = 0;
  uint64_t round_id = 0;
  uint32_t contributor_count = 0;
};

struct ServerConfig {
  uint32_t buffer_size = 10;
  size_t dim = 0;
  uint64_t modulus = kDefaultModulus;
  Micros timeout = kDefaultTimeout;
};

struct PendingGrant {
  uint32_t slot = 0;
  GrantToken token;
  Micros deadline = 0;
};

struct RoundState {
  uint32_t buffer_size = 0;
  uint32_t cursor = 0;
  FieldVector accumulator;
  double staleness_sum = 0;
  std::vector<std::vector<SealedSeed>> ciphertext_buffers;
  AttributeSet attributes;
  uint64_t round_id = 0;
  std::optional<PendingGrant> pending;
};

// Server side. A single logical state machine with at most one grant in
// flight; callers serialize connections in front of it. Not thread-safe.
class ServerEngine {
 public:
  using TokenSource = std::function<GrantToken()>;

  // `authority` must outlive the engine. Tokens come from the OS CSPRNG
  // unless `tokens` is given.
  static absl::StatusOr<ServerEngine> Create(const ServerConfig& config,
                                             KeyAuthority& authority,
                                             TokenSource tokens = {}) {
    if (config.buffer_size == 0) {
      return absl::InvalidArgumentError("buffer size must be positive");
    }
    if (config.timeout < 0) {
      return absl::InvalidArgumentError("timeout must be non-negative");
    }
    ServerEngine engine(config, authority, std::move(tokens));
    if (auto s = engine.Publish(); !s.ok()) return s;
    return engine;
  }

  const ServerConfig& config() const { return config_; }
  const RoundState& state() const { return state_; }

  // Grants the next slot. UNAVAILABLE while another grant is in flight.
  absl::StatusOr<SlotGrant> OnConnect(Micros now) {
    if (state_.pending) {
      return absl::UnavailableError("busy: a slot grant is in flight");
    }
    if (state_.cursor >= state_.buffer_size) {
      return absl::UnavailableError("round complete");
    }
    if (needs_publish_) {
      if (auto s = Publish(); !s.ok()) return s;
    }
    const uint32_t slot = state_.cursor;
    GrantToken token = tokens_();
    if (auto s = authority_->RegisterGrant(token, {state_.round_id, slot});
        !s.ok()) {
      return s;
    }
    state_.pending =
        PendingGrant{.slot = slot, .token = token,
                     .deadline = now + config_.timeout};
    return SlotGrant{.attributes = state_.attributes,
                     .slot = slot,
                     .incoming = state_.ciphertext_buffers[slot],
                     .round_id = state_.round_id,
                     .token = token,
                     .deadline = state_.pending->deadline};
  }

  // Applies an upload from the holder of `token`. A malformed upload aborts
  // the grant without consuming the slot. Returns the round result when the
  // upload fills the buffer.
  absl::StatusOr<std::optional<RoundResult>> OnUpload(const GrantToken& token,
                                                      const UploadMsg& up) {
    if (!state_.pending) {
      return absl::FailedPreconditionError("upload without a slot grant");
    }
    if (state_.pending->token != token) {
      return absl::PermissionDeniedError("upload from a non-granted session");
    }
    if (auto s = ValidateUpload(up); !s.ok()) {
      AbortPending();
      return s;
    }
    const uint32_t slot = state_.pending->slot;
    state_.accumulator += up.masked_update;
    state_.staleness_sum += up.staleness;
    for (const SealedSeed& c : up.outgoing) {
      state_.ciphertext_buffers[c.attribute.slot].push_back(c);
    }
    state_.cursor = slot + 1;
    state_.pending.reset();
    if (state_.cursor < state_.buffer_size) return std::nullopt;

    RoundResult result{.aggregate = std::move(state_.accumulator),
                       .staleness_total = state_.staleness_sum,
                       .round_id = state_.round_id,
                       .contributor_count = state_.buffer_size};
    ++state_.round_id;
    ResetBuffers();
    // A failed publish is retried on the next connect.
    needs_publish_ = true;
    (void)Publish();
    return result;
  }

  // Aborts the in-flight grant if its deadline has passed. The slot and its
  // incoming ciphertexts stay as they were. Returns whether a grant was
  // aborted.
  bool OnTimeout(Micros now) {
    if (!state_.pending || now < state_.pending->deadline) return false;
    AbortPending();
    return true;
  }

  // Connection reset: same effect as a timeout, regardless of the deadline.
  bool Abort(const GrantToken& token) {
    if (!state_.pending || state_.pending->token != token) return false;
    AbortPending();
    return true;
  }

 private:
  ServerEngine(const ServerConfig& config, KeyAuthority& authority,
               TokenSource tokens)
      : config_(config), authority_(&authority), tokens_(std::move(tokens)) {
    if (!tokens_) {
      tokens_ = [] {
        CryptoRng rng;
        return GrantToken::Generate(rng);
      };
    }
    state_.buffer_size = config.buffer_size;
    ResetBuffers();
  }

  void ResetBuffers() {
    state_.cursor = 0;
    state_.accumulator = FieldVector(config_.dim, config_.modulus);
    state_.staleness_sum = 0;
    state_.ciphertext_buffers.assign(config_.buffer_size, {});
    state_.pending.reset();
  }

  absl::Status Publish() {
    auto set = authority_->PublishRound(state_.round_id, config_.buffer_size);
    if (!set.ok()) return set.status();
    state_.attributes = *std::move(set);
    needs_publish_ = false;
    return absl::OkStatus();
  }

  void AbortPending() {
    (void)authority_->RevokeGrant(state_.pending->token);
    state_.pending.reset();
  }

  absl::Status ValidateUpload(const UploadMsg& up) const {
    const uint32_t slot = state_.pending->slot;
    const uint32_t k = state_.buffer_size;
    if (up.masked_update.dim() != config_.dim ||
        up.masked_update.modulus() != config_.modulus) {
      return absl::InvalidArgumentError("masked update has wrong shape");
    }
    if (!std::isfinite(up.staleness) || up.staleness <= 0) {
      return absl::InvalidArgumentError("staleness factor must be positive");
    }
    if (up.outgoing.size() != k - slot - 1) {
      return absl::InvalidArgumentError(
          "expected " + std::to_string(k - slot - 1) +
          " outgoing ciphertexts, got " + std::to_string(up.outgoing.size()));
    }
    std::vector<bool> seen(k, false);
    for (const SealedSeed& c : up.outgoing) {
      const uint32_t j = c.attribute.slot;
      if (c.attribute.round != state_.round_id || j <= slot || j >= k ||
          seen[j] || c.origin_slot != slot) {
        return absl::InvalidArgumentError("mis-addressed ciphertext " +
                                          ToString(c.attribute));
      }
      seen[j] = true;
    }
    return absl::OkStatus();
  }

  ServerConfig config_;
  KeyAuthority* authority_;
  TokenSource tokens_;
  RoundState state_;
  bool needs_publish_ = true;
};

// Maps staleness t - tau to a weight alpha.
using StalenessFunction = std::function<double(uint64_t)>;

struct UserInput {
  std::vector<double> update;
  uint64_t model_timestamp = 0;  // tau: round of the model the update used
};

// Everything a user knows after running the protocol; what a colluding user
// would hand to the server.
struct UserView {
  uint64_t round_id = 0;
  uint32_t slot = 0;
  double staleness = 1.0;
  FieldVector input;  // quantize(alpha * update)
  std::map<uint32_t, Seed> incoming_seeds;  // origin i -> s_ik
  std::map<uint32_t, Seed> outgoing_seeds;  // target j -> s_kj
};

struct UserOutcome {
  UploadMsg upload;
  UserView view;
};

// One user's protocol run for `grant`. Any failure (bad grant, AA rejection,
// undecryptable incoming seed) aborts with no upload: a partially unmasked
// vector would break cancellation.
template <RandomSource Rng>
absl::StatusOr<UserOutcome> RunUser(const UserInput& input,
                                    const SlotGrant& grant,
                                    KeyAuthority& authority,
                                    const QuantizerConfig& cfg,
                                    const StalenessFunction& staleness,
                                    Rng& rng) {
  const uint32_t k = grant.attributes.buffer_size();
  const uint32_t slot = grant.slot;
  if (grant.attributes.round != grant.round_id || slot >= k) {
    return absl::InvalidArgumentError("inconsistent slot grant");
  }
  if (input.model_timestamp > grant.round_id) {
    return absl::InvalidArgumentError("model timestamp is ahead of server");
  }
  if (grant.incoming.size() != slot) {
    return absl::AbortedError("expected " + std::to_string(slot) +
                              " incoming ciphertexts");
  }
  std::set<uint32_t> origins;
  for (const SealedSeed& c : grant.incoming) {
    if (c.attribute != Attribute{grant.round_id, slot} ||
        c.origin_slot >= slot || !origins.insert(c.origin_slot).second) {
      return absl::AbortedError("mis-addressed incoming ciphertext");
    }
  }
  for (uint32_t j = 0; j < k; ++j) {
    if (grant.attributes.keys[j].attribute != Attribute{grant.round_id, j}) {
      return absl::InvalidArgumentError("attribute set out of order");
    }
  }

  const double alpha = staleness(grant.round_id - input.model_timestamp);
  if (!std::isfinite(alpha) || alpha <= 0) {
    return absl::InvalidArgumentError("staleness factor must be positive");
  }

  auto issue = authority.RequestKey({{grant.round_id, slot}, grant.token});
  if (!issue.ok()) {
    return absl::AbortedError("attribute key refused: " +
                              std::string(issue.status().message()));
  }

  UserOutcome out;
  UserView& view = out.view;
  view.round_id = grant.round_id;
  view.slot = slot;
  view.staleness = alpha;
  std::vector<double> scaled(input.update.size());
  for (size_t i = 0; i < scaled.size(); ++i) {
    scaled[i] = alpha * input.update[i];
  }
  view.input = Quantize(scaled, cfg, rng);
  const size_t d = view.input.dim();

  FieldVector y = view.input;
  for (const SealedSeed& c : grant.incoming) {
    auto seed = Decrypt(issue->params, c, issue->key);
    if (!seed.ok()) {
      return absl::AbortedError("incoming seed from slot " +
                                std::to_string(c.origin_slot) +
                                " failed to open");
    }
    AddExpansion(y, *seed, /*subtract=*/true);
    view.incoming_seeds.emplace(c.origin_slot, *seed);
  }
  std::optional<SeedSealer> sealer;
  if (slot + 1 < k) sealer.emplace(rng);
  for (uint32_t j = slot + 1; j < k; ++j) {
    Seed s = Seed::Generate(rng);
    AddExpansion(y, s, /*subtract=*/false);
    out.upload.outgoing.push_back(
        sealer->Seal(issue->params, s, grant.attributes.keys[j], slot, rng));
    view.outgoing_seeds.emplace(j, s);
  }
  out.upload.masked_update = std::move(y);
  out.upload.staleness = alpha;
  return out;
}

// Dequantized staleness-weighted mean: aggregate / (scale * sum alpha).
inline std::vector<double> UnmaskAggregate(const RoundResult& result,
                                           const QuantizerConfig& cfg) {
  if (!(result.staleness_total > 0)) {
    throw std::invalid_argument("UnmaskAggregate: zero staleness total");
  }
  return Dequantize(result.aggregate, cfg, result.staleness_total);
}

// Full record of one round in slot order: what the server saw plus each
// user's private view.
struct SlotRecord {
  UploadMsg upload;
  UserView view;
};

struct RoundTranscript {
  uint32_t buffer_size = 0;
  size_t dim = 0;
  uint64_t modulus = kDefaultModulus;
  std::vector<SlotRecord> slots;  // slots[i].view.slot == i
};

// What an honest-but-curious server learns, jointly with the users in
// `colluders`, after accepting slots 0..last: the partial sum of masked
// updates with every colluder input and every seed touching a colluder
// (as origin or target) removed.
inline FieldVector CollusionView(const RoundTranscript& transcript,
                                 uint32_t last,
                                 const std::set<uint32_t>& colluders) {
  if (last >= transcript.slots.size()) {
    throw std::invalid_argument("CollusionView: prefix beyond transcript");
  }
  FieldVector residual(transcript.dim, transcript.modulus);
  for (uint32_t i = 0; i <= last; ++i) {
    const SlotRecord& rec = transcript.slots[i];
    residual += rec.upload.masked_update;
    const bool i_colludes = colluders.contains(i);
    if (i_colludes) residual -= rec.view.input;
    for (const auto& [j, seed] : rec.view.outgoing_seeds) {
      // Pairs inside the prefix cancel in the sum already.
      if (j > last && (i_colludes || colluders.contains(j))) {
        residual -= Expand(seed, transcript.dim, transcript.modulus);
      }
    }
  }
  return residual;
}

// sum of quantized inputs of the honest slots 0..last.
inline FieldVector HonestPrefixSum(const RoundTranscript& transcript,
                                   uint32_t last,
                                   const std::set<uint32_t>& colluders) {
  FieldVector sum(transcript.dim, transcript.modulus);
  for (uint32_t i = 0; i <= last && i < transcript.slots.size(); ++i) {
    if (!colluders.contains(i)) sum += transcript.slots[i].view.input;
  }
  return sum;
}

}  // namespace basa

#endif  // BASA_PROTOCOL_H_
