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

#ifndef BASA_PRG_H_
#define BASA_PRG_H_

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "basa/field.h"
#include "basa/internal/openssl.h"
#include "basa/random.h"

namespace basa {

inline constexpr size_t kSeedSize = 32;

// Opaque 32-byte mask seed.
struct Seed {
  std::array<uint8_t, kSeedSize> bytes{};

  template <RandomSource Rng>
  static Seed Generate(Rng& rng) {
    Seed s;
    FillRandomBytes(rng, s.bytes);
    return s;
  }

  friend bool operator==(const Seed&, const Seed&) = default;
};

namespace internal {

// Calls sink(offset, values) with consecutive batches of the first `dim`
// accepted elements of the expansion of `seed`, in order.
template <typename Sink>
void ExpandEach(const Seed& seed, size_t dim, uint64_t modulus, Sink&& sink) {
  FieldVector probe(0, modulus);  // validates modulus
  const uint64_t limit = (kMaxModulus / modulus) * modulus;
  // For q > 2^31 the acceptance bound is q itself and no reduction is needed.
  const bool reduce = limit != modulus;
  // For 2^30 < q < 2^31 (the default prime) an accepted word is below 2q and
  // one conditional subtraction replaces the division.
  const bool twice = limit == 2 * modulus;
  const bool rejects = limit != kMaxModulus;
  const auto limit32 = static_cast<uint32_t>(std::min<uint64_t>(limit, UINT32_MAX));
  const auto q32 = static_cast<uint32_t>(std::min<uint64_t>(modulus, UINT32_MAX));
  if (dim == 0) return;

  AesCtrStream stream(seed.bytes);
  std::array<uint8_t, 4096> bytes;
  std::array<uint32_t, 1024> words;
  size_t n = 0;
  while (n < dim) {
    // Rejections are rare (probability < 2^-30 for the default q), so one
    // word per remaining element plus slack is nearly always one pass.
    const size_t count =
        std::min<size_t>(words.size(), (dim - n + 4 + 3) / 4 * 4);
    stream.Generate(std::span<uint8_t>(bytes.data(), count * 4));
    // Big-endian decode four words at a time; written with vector types
    // because the scalar byte-swap idiom does not vectorize.
    using V4 = uint32_t __attribute__((vector_size(16)));
    for (size_t w = 0; w < count; w += 4) {
      V4 x;
      std::memcpy(&x, bytes.data() + 4 * w, sizeof x);
      if constexpr (std::endian::native == std::endian::little) {
        x = (x >> 24) | ((x >> 8) & 0xff00) | ((x & 0xff00) << 8) | (x << 24);
      }
      std::memcpy(words.data() + w, &x, sizeof x);
    }
    size_t accepted = count;
    if (rejects) {
      uint32_t top = 0;
      for (size_t w = 0; w < count; ++w) top = std::max(top, words[w]);
      if (top >= limit32) {
        accepted = 0;
        for (size_t w = 0; w < count; ++w) {
          if (words[w] < limit32) words[accepted++] = words[w];
        }
      }
    }
    const size_t take = std::min(accepted, dim - n);
    if (twice) {
      for (size_t w = 0; w < take; ++w) {
        words[w] = words[w] >= q32 ? words[w] - q32 : words[w];
      }
    } else if (reduce) {
      for (size_t w = 0; w < take; ++w) words[w] %= q32;
    }
    sink(n, std::span<const uint32_t>(words.data(), take));
    n += take;
  }
}

}  // namespace internal

// Expands `seed` into `dim` field elements: AES-256-CTR keystream under the
// seed, read as big-endian 32-bit words, with words at or above the largest
// multiple of q below 2^32 rejected. Because the stream is consumed in order,
// Expand(s, d1, q) is a prefix of Expand(s, d2, q) for d1 < d2.
inline FieldVector Expand(const Seed& seed, size_t dim, uint64_t modulus) {
  std::vector<uint32_t> out(dim);
  internal::ExpandEach(seed, dim, modulus,
                       [&](size_t at, std::span<const uint32_t> v) {
                         std::copy(v.begin(), v.end(), out.begin() + at);
                       });
  return FieldVector(std::move(out), modulus);
}

// acc += Expand(seed, acc.dim(), acc.modulus()), or -= when `subtract`,
// without materializing the expansion.
inline void AddExpansion(FieldVector& acc, const Seed& seed, bool subtract) {
  const uint64_t q = acc.modulus_;
  uint32_t* e = acc.elems_.data();
  if (subtract) {
    internal::ExpandEach(seed, acc.dim(), q,
                         [&](size_t at, std::span<const uint32_t> v) {
                           uint32_t* x = e + at;
                           for (size_t i = 0; i < v.size(); ++i) {
                             const uint64_t a = x[i];
                             x[i] = static_cast<uint32_t>(
                                 a >= v[i] ? a - v[i] : a + q - v[i]);
                           }
                         });
  } else {
    internal::ExpandEach(seed, acc.dim(), q,
                         [&](size_t at, std::span<const uint32_t> v) {
                           uint32_t* x = e + at;
                           for (size_t i = 0; i < v.size(); ++i) {
                             const uint64_t sum = uint64_t{x[i]} + v[i];
                             x[i] = static_cast<uint32_t>(sum >= q ? sum - q : sum);
                           }
                         });
  }
}

}  // namespace basa

#endif  // BASA_PRG_H_
