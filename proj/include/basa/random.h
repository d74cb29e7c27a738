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

#ifndef BASA_RANDOM_H_
#define BASA_RANDOM_H_

#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <span>

#include "basa/internal/openssl.h"

namespace basa {

// Every randomized operation takes its randomness from the caller through a
// 64-bit uniform random bit generator. Production callers pass CryptoRng;
// tests and the simulator pass a seeded std::mt19937_64.
template <typename G>
concept RandomSource =
    std::uniform_random_bit_generator<G> &&
    std::same_as<typename G::result_type, uint64_t> &&
    G::min() == 0 && G::max() == std::numeric_limits<uint64_t>::max();

// Operating-system CSPRNG behind the standard generator interface.
class CryptoRng {
 public:
  using result_type = uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }
  result_type operator()() {
    result_type v;
    internal::SecureRandomBytes(
        {reinterpret_cast<uint8_t*>(&v), sizeof(v)});
    return v;
  }
};

template <RandomSource Rng>
void FillRandomBytes(Rng& rng, std::span<uint8_t> out) {
  size_t i = 0;
  while (i < out.size()) {
    uint64_t word = rng();
    for (int b = 0; b < 8 && i < out.size(); ++b, ++i) {
      out[i] = static_cast<uint8_t>(word >> (8 * b));
    }
  }
}

// Uniform double in [0, 1) with 53 bits of precision.
template <RandomSource Rng>
double UniformUnit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Independent deterministic generator for (seed, stream, index). Used to
// give every simulated user and every concern its own reproducible stream.
inline std::mt19937_64 StreamRng(uint64_t seed, uint64_t stream,
                                 uint64_t index = 0) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace basa

#endif  // BASA_RANDOM_H_
