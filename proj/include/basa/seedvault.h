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

// Attribute-gated seed distribution.
//
// A user sealing a mask seed does not know who will later occupy buffer slot
// j; it only knows the attribute (round, slot j). The attribute authority (AA)
// holds a master key from which it derives one X25519 key pair per attribute.
// The public halves are published for the round (the attribute set handed out
// with every slot grant); the private half of (t, j) is released only to the
// user granted slot j in round t. Sealing is ephemeral-static ECDH, HKDF-SHA256
// and AES-256-GCM, with the attribute bound into the associated data.
//
// The four-algorithm shape Setup / KeyGen / Encrypt / Decrypt is preserved so
// that a pairing-based CP-ABE backend with single-attribute equality policies
// can be dropped in behind the same calls.

#ifndef BASA_SEEDVAULT_H_
#define BASA_SEEDVAULT_H_

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "basa/internal/bytes.h"
#include "basa/internal/openssl.h"
#include "basa/internal/x25519.h"
#include "basa/prg.h"
#include "basa/random.h"

namespace basa {

struct Attribute {
  uint64_t round = 0;
  uint32_t slot = 0;

  friend auto operator<=>(const Attribute&, const Attribute&) = default;
};

inline std::string ToString(const Attribute& a) {
  return "(t=" + std::to_string(a.round) + ", slot=" + std::to_string(a.slot) +
         ")";
}

struct PublicParams {
  std::string system_id;
  uint32_t version = 1;
  std::string aa_endpoint;

  friend bool operator==(const PublicParams&, const PublicParams&) = default;

  Bytes Serialize() const {
    internal::ByteWriter w;
    w.String(system_id);
    w.U32(version);
    w.String(aa_endpoint);
    return w.Take();
  }
  static absl::StatusOr<PublicParams> Parse(std::span<const uint8_t> data) {
    internal::ByteReader r(data);
    PublicParams pp;
    pp.system_id = r.String();
    pp.version = r.U32();
    pp.aa_endpoint = r.String();
    if (auto s = r.Finish("PublicParams"); !s.ok()) return s;
    return pp;
  }
};

struct AttributeSecretKey;
class MasterKey;
inline AttributeSecretKey KeyGen(const MasterKey& mk, const Attribute& attr);

// Root secret of the AA. Move-only and deliberately without a serializer.
class MasterKey {
 public:
  explicit MasterKey(const internal::Key32& bytes) : bytes_(bytes) {}
  MasterKey(MasterKey&&) = default;
  MasterKey& operator=(MasterKey&&) = default;
  MasterKey(const MasterKey&) = delete;
  MasterKey& operator=(const MasterKey&) = delete;

  bool SameAs(const MasterKey& other) const { return bytes_ == other.bytes_; }

 private:
  friend AttributeSecretKey KeyGen(const MasterKey& mk, const Attribute& attr);
  internal::Key32 bytes_;
};

struct AttributeSecretKey {
  Attribute attribute;
  internal::Key32 key{};
  internal::Key32 public_key{};  // X25519 public half of `key`

  static AttributeSecretKey FromSecret(const Attribute& attribute,
                                       const internal::Key32& key) {
    return {attribute, key, internal::X25519PublicKey(key)};
  }

  friend bool operator==(const AttributeSecretKey&,
                         const AttributeSecretKey&) = default;
};

struct AttributePublicKey {
  Attribute attribute;
  internal::Key32 key{};

  friend bool operator==(const AttributePublicKey&,
                         const AttributePublicKey&) = default;
};

// The round's attribute set: one public key per buffer slot.
struct AttributeSet {
  uint64_t round = 0;
  std::vector<AttributePublicKey> keys;  // keys[j].attribute == {round, j}

  uint32_t buffer_size() const { return static_cast<uint32_t>(keys.size()); }
  const AttributePublicKey* Find(uint32_t slot) const {
    return slot < keys.size() ? &keys[slot] : nullptr;
  }

  friend bool operator==(const AttributeSet&, const AttributeSet&) = default;
};

inline constexpr size_t kSealedSeedOverhead = 32 + internal::kGcmTagSize;

struct SealedSeed {
  Attribute attribute;  // the access policy, in the clear
  uint32_t origin_slot = 0;
  internal::GcmNonce nonce{};
  Bytes ciphertext;  // ephemeral public key || AES-GCM(seed) || tag

  friend bool operator==(const SealedSeed&, const SealedSeed&) = default;

  // round u64 | slot u32 | origin u32 | nonce[12] | u32 len | ciphertext,
  // all integers big-endian.
  void AppendTo(internal::ByteWriter& w) const {
    w.U64(attribute.round);
    w.U32(attribute.slot);
    w.U32(origin_slot);
    w.Raw(nonce);
    w.Blob(ciphertext);
  }
  Bytes Serialize() const {
    internal::ByteWriter w;
    AppendTo(w);
    return w.Take();
  }
  static SealedSeed ReadFrom(internal::ByteReader& r) {
    SealedSeed s;
    s.attribute.round = r.U64();
    s.attribute.slot = r.U32();
    s.origin_slot = r.U32();
    r.Fixed(s.nonce);
    s.ciphertext = r.Blob();
    return s;
  }
  static absl::StatusOr<SealedSeed> Parse(std::span<const uint8_t> data) {
    internal::ByteReader r(data);
    SealedSeed s = ReadFrom(r);
    if (auto st = r.Finish("SealedSeed"); !st.ok()) return st;
    return s;
  }
  size_t SerializedSize() const { return 8 + 4 + 4 + 12 + 4 + ciphertext.size(); }
};

namespace internal {

inline Bytes AttributeLabel(const Attribute& a) {
  ByteWriter w;
  w.U64(a.round);
  w.U32(a.slot);
  return w.Take();
}

inline Bytes SealContext(const PublicParams& pp, const Attribute& a,
                         uint32_t origin) {
  ByteWriter w;
  w.String("basa-seedvault");
  w.U32(pp.version);
  w.String(pp.system_id);
  w.U64(a.round);
  w.U32(a.slot);
  w.U32(origin);
  return w.Take();
}

inline Key32 SealKey(const Key32& shared, const Key32& ephemeral_pub,
                     const Key32& attribute_pub, std::span<const uint8_t> ctx) {
  std::array<uint8_t, 64> salt;
  std::copy(ephemeral_pub.begin(), ephemeral_pub.end(), salt.begin());
  std::copy(attribute_pub.begin(), attribute_pub.end(), salt.begin() + 32);
  return HkdfSha256(shared, salt, ctx);
}

}  // namespace internal

// Fresh system parameters and master key.
template <RandomSource Rng>
std::pair<PublicParams, MasterKey> Setup(Rng& rng,
                                         std::string aa_endpoint = "inproc") {
  internal::Key32 root;
  FillRandomBytes(rng, root);
  std::array<uint8_t, 16> id;
  FillRandomBytes(rng, id);
  PublicParams pp{.system_id = internal::ToHex(id),
                  .version = 1,
                  .aa_endpoint = std::move(aa_endpoint)};
  return {std::move(pp), MasterKey(root)};
}

// Deterministic in (mk, attr).
inline AttributeSecretKey KeyGen(const MasterKey& mk, const Attribute& attr) {
  static constexpr std::string_view kSalt = "basa-attribute-key";
  Bytes info = internal::AttributeLabel(attr);
  return AttributeSecretKey::FromSecret(
      attr, internal::HkdfSha256(
                mk.bytes_,
                {reinterpret_cast<const uint8_t*>(kSalt.data()), kSalt.size()},
                info));
}

inline AttributePublicKey PublicKeyOf(const AttributeSecretKey& sk) {
  return {.attribute = sk.attribute, .key = sk.public_key};
}

inline AttributeSet PublishAttributes(const MasterKey& mk, uint64_t round,
                                      uint32_t buffer_size) {
  AttributeSet set{.round = round, .keys = {}};
  set.keys.reserve(buffer_size);
  for (uint32_t j = 0; j < buffer_size; ++j) {
    set.keys.push_back(PublicKeyOf(KeyGen(mk, {round, j})));
  }
  return set;
}

// Sender side of the seal. One ephemeral key pair serves every seed a user
// seals in a round; each ciphertext still gets a fresh nonce and a key bound
// to the recipient's public key, attribute and the sender's slot.
class SeedSealer {
 public:
  template <RandomSource Rng>
  explicit SeedSealer(Rng& rng) {
    FillRandomBytes(rng, ephemeral_);
    ephemeral_pub_ = internal::X25519PublicKey(ephemeral_);
  }

  // Seals `seed` so that only the holder of the secret key for
  // `recipient.attribute` can open it.
  template <RandomSource Rng>
  SealedSeed Seal(const PublicParams& pp, const Seed& seed,
                  const AttributePublicKey& recipient, uint32_t origin_slot,
                  Rng& rng) const {
    SealedSeed out;
    out.attribute = recipient.attribute;
    out.origin_slot = origin_slot;
    FillRandomBytes(rng, out.nonce);

    auto shared = internal::X25519Shared(ephemeral_, recipient.key);
    if (!shared) throw std::invalid_argument("degenerate attribute public key");
    Bytes ctx = internal::SealContext(pp, out.attribute, origin_slot);
    internal::Key32 key =
        internal::SealKey(*shared, ephemeral_pub_, recipient.key, ctx);

    out.ciphertext.assign(ephemeral_pub_.begin(), ephemeral_pub_.end());
    Bytes body = internal::AesGcmSeal(key, out.nonce, ctx, seed.bytes);
    out.ciphertext.insert(out.ciphertext.end(), body.begin(), body.end());
    return out;
  }

 private:
  internal::Key32 ephemeral_{};
  internal::Key32 ephemeral_pub_{};
};

// One-shot seal with its own ephemeral key.
template <RandomSource Rng>
SealedSeed Encrypt(const PublicParams& pp, const Seed& seed,
                   const AttributePublicKey& recipient, uint32_t origin_slot,
                   Rng& rng) {
  return SeedSealer(rng).Seal(pp, seed, recipient, origin_slot, rng);
}

// Returns the sealed seed, or PERMISSION_DENIED for a wrong attribute, a key
// from another authority, or any tampering. The error carries no detail about
// which of these occurred.
inline absl::StatusOr<Seed> Decrypt(const PublicParams& pp,
                                    const SealedSeed& ct,
                                    const AttributeSecretKey& sk) {
  const absl::Status denied = absl::PermissionDeniedError("access denied");
  if (sk.attribute != ct.attribute ||
      ct.ciphertext.size() != kSeedSize + kSealedSeedOverhead) {
    return denied;
  }
  internal::Key32 ephemeral_pub;
  std::copy_n(ct.ciphertext.begin(), 32, ephemeral_pub.begin());
  auto shared = internal::X25519Shared(sk.key, ephemeral_pub);
  if (!shared) return denied;
  Bytes ctx = internal::SealContext(pp, ct.attribute, ct.origin_slot);
  internal::Key32 key =
      internal::SealKey(*shared, ephemeral_pub, sk.public_key, ctx);
  auto plain = internal::AesGcmOpen(
      key, ct.nonce, ctx,
      std::span<const uint8_t>(ct.ciphertext).subspan(32));
  if (!plain || plain->size() != kSeedSize) return denied;
  Seed seed;
  std::copy(plain->begin(), plain->end(), seed.bytes.begin());
  return seed;
}

// Ephemeral per-connection token minted by the server; the AA only releases a
// slot key to a token the server registered for that slot.
struct GrantToken {
  std::array<uint8_t, 16> bytes{};

  template <RandomSource Rng>
  static GrantToken Generate(Rng& rng) {
    GrantToken t;
    FillRandomBytes(rng, t.bytes);
    return t;
  }
  friend auto operator<=>(const GrantToken&, const GrantToken&) = default;
};

struct KeyRequest {
  Attribute attribute;
  GrantToken token;
};

struct KeyIssue {
  PublicParams params;
  AttributeSecretKey key;
};

// What the server and users need from an attribute authority. Implemented
// in-process by AttributeAuthority and over the wire by transport clients.
class KeyAuthority {
 public:
  virtual ~KeyAuthority() = default;

  // Server -> AA: round `round` begins with `buffer_size` slots. Older rounds
  // become stale. Returns the round's attribute set.
  virtual absl::StatusOr<AttributeSet> PublishRound(uint64_t round,
                                                    uint32_t buffer_size) = 0;
  // Server -> AA: `token` was granted slot `attribute`.
  virtual absl::Status RegisterGrant(const GrantToken& token,
                                     const Attribute& attribute) = 0;
  // Server -> AA: the grant behind `token` was aborted.
  virtual absl::Status RevokeGrant(const GrantToken& token) = 0;
  // User -> AA.
  virtual absl::StatusOr<KeyIssue> RequestKey(const KeyRequest& request) = 0;
};

// The trusted attribute authority. Thread-safe.
//
// Issuance policy: a key for (t, j) is released only while t is the current
// round, only to a token registered for exactly (t, j), and only to one live
// claimant at a time. Revoking the claimant's grant (server timeout) releases
// the claim so the slot can be re-granted.
class AttributeAuthority final : public KeyAuthority {
 public:
  AttributeAuthority(PublicParams params, MasterKey master)
      : params_(std::move(params)), master_(std::move(master)) {}

  template <RandomSource Rng>
  static AttributeAuthority Create(Rng& rng,
                                   std::string aa_endpoint = "inproc") {
    auto [pp, mk] = Setup(rng, std::move(aa_endpoint));
    return AttributeAuthority(std::move(pp), std::move(mk));
  }

  const PublicParams& public_params() const { return params_; }

  absl::StatusOr<AttributeSet> PublishRound(uint64_t round,
                                            uint32_t buffer_size) override {
    std::lock_guard<std::mutex> lock(mu_);
    if (published_ && round < current_round_) {
      return absl::FailedPreconditionError("round " + std::to_string(round) +
                                           " is older than current round " +
                                           std::to_string(current_round_));
    }
    if (!published_ || round != current_round_) {
      grants_.clear();
      claims_.clear();
    }
    published_ = true;
    current_round_ = round;
    buffer_size_ = buffer_size;
    return PublishAttributes(master_, round, buffer_size);
  }

  absl::Status RegisterGrant(const GrantToken& token,
                             const Attribute& attribute) override {
    std::lock_guard<std::mutex> lock(mu_);
    if (!published_ || attribute.round != current_round_) {
      return absl::FailedPreconditionError("grant for stale round");
    }
    if (attribute.slot >= buffer_size_) {
      return absl::InvalidArgumentError("slot outside buffer");
    }
    grants_[token] = Grant{attribute, false};
    return absl::OkStatus();
  }

  absl::Status RevokeGrant(const GrantToken& token) override {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = grants_.find(token);
    if (it == grants_.end()) return absl::OkStatus();
    it->second.revoked = true;
    auto claim = claims_.find(it->second.attribute);
    if (claim != claims_.end() && claim->second == token) claims_.erase(claim);
    return absl::OkStatus();
  }

  absl::StatusOr<KeyIssue> RequestKey(const KeyRequest& request) override {
    std::lock_guard<std::mutex> lock(mu_);
    const Attribute& attr = request.attribute;
    if (!published_ || attr.round != current_round_) {
      return absl::FailedPreconditionError("stale round in key request " +
                                           ToString(attr));
    }
    auto grant = grants_.find(request.token);
    if (grant == grants_.end() || grant->second.revoked ||
        grant->second.attribute != attr) {
      return absl::PermissionDeniedError("no live grant for " +
                                         ToString(attr));
    }
    auto [claim, inserted] = claims_.try_emplace(attr, request.token);
    if (!inserted && claim->second != request.token) {
      return absl::AlreadyExistsError("slot already claimed " +
                                      ToString(attr));
    }
    return KeyIssue{params_, KeyGen(master_, attr)};
  }

 private:
  struct Grant {
    Attribute attribute;
    bool revoked = false;
  };

  const PublicParams params_;
  const MasterKey master_;
  std::mutex mu_;
  bool published_ = false;
  uint64_t current_round_ = 0;
  uint32_t buffer_size_ = 0;
  std::map<GrantToken, Grant> grants_;
  std::map<Attribute, GrantToken> claims_;
};

}  // namespace basa

#endif  // BASA_SEEDVAULT_H_
