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

// X25519 scalar multiplication through libsodium.

#ifndef BASA_INTERNAL_X25519_H_
#define BASA_INTERNAL_X25519_H_

#include <sodium.h>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>

namespace basa::internal {

using Key32 = std::array<uint8_t, 32>;

inline void EnsureSodium() {
  static const bool ready = sodium_init() >= 0;
  if (!ready) throw std::runtime_error("libsodium initialization failed");
}

inline Key32 X25519PublicKey(const Key32& priv) {
  EnsureSodium();
  Key32 pub{};
  if (crypto_scalarmult_base(pub.data(), priv.data()) != 0) {
    throw std::runtime_error("x25519 public key");
  }
  return pub;
}

// Returns nullopt when the peer key is degenerate (all-zero shared secret).
inline std::optional<Key32> X25519Shared(const Key32& priv,
                                         const Key32& peer_pub) {
  EnsureSodium();
  Key32 shared{};
  if (crypto_scalarmult(shared.data(), priv.data(), peer_pub.data()) != 0) {
    return std::nullopt;
  }
  return shared;
}

}  // namespace basa::internal

#endif  // BASA_INTERNAL_X25519_H_
