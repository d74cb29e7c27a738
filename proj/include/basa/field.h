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

// Vectors over Z_q and the stochastic quantizer that maps real-valued model
// updates into them.

#ifndef BASA_FIELD_H_
#define BASA_FIELD_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "basa/random.h"

namespace basa {

// 2^31 - 1. Elements fit in 32 bits and the sum of any two fits in 64.
inline constexpr uint64_t kDefaultModulus = (uint64_t{1} << 31) - 1;
inline constexpr uint64_t kMaxModulus = uint64_t{1} << 32;

struct Seed;
class FieldVector;
void AddExpansion(FieldVector& acc, const Seed& seed, bool subtract);

class FieldVector {
 public:
  FieldVector() = default;

  // Zero vector of the given dimension.
  FieldVector(size_t dim, uint64_t modulus)
      : modulus_(CheckedModulus(modulus)), elems_(dim, 0) {}

  // Throws std::invalid_argument if any element is >= modulus.
  FieldVector(std::vector<uint32_t> elems, uint64_t modulus)
      : modulus_(CheckedModulus(modulus)), elems_(std::move(elems)) {
    // Branch-free max first so the common all-valid case vectorizes.
    uint32_t top = 0;
    for (uint32_t e : elems_) top = std::max(top, e);
    if (top < modulus_) return;
    for (uint32_t e : elems_) {
      if (e >= modulus_) {
        throw std::invalid_argument("FieldVector: element " +
                                    std::to_string(e) + " not below modulus " +
                                    std::to_string(modulus_));
      }
    }
  }

  size_t dim() const { return elems_.size(); }
  uint64_t modulus() const { return modulus_; }
  std::span<const uint32_t> elements() const { return elems_; }
  uint32_t operator[](size_t i) const { return elems_[i]; }

  bool IsZero() const {
    return std::all_of(elems_.begin(), elems_.end(),
                       [](uint32_t e) { return e == 0; });
  }

  FieldVector& operator+=(const FieldVector& other) {
    CheckCompatible(other);
    for (size_t i = 0; i < elems_.size(); ++i) {
      uint64_t s = uint64_t{elems_[i]} + other.elems_[i];
      elems_[i] = static_cast<uint32_t>(s >= modulus_ ? s - modulus_ : s);
    }
    return *this;
  }

  FieldVector& operator-=(const FieldVector& other) {
    CheckCompatible(other);
    for (size_t i = 0; i < elems_.size(); ++i) {
      uint64_t a = elems_[i];
      uint64_t b = other.elems_[i];
      elems_[i] = static_cast<uint32_t>(a >= b ? a - b : a + modulus_ - b);
    }
    return *this;
  }

  FieldVector& operator*=(uint64_t scalar) {
    scalar %= modulus_;
    for (uint32_t& e : elems_) {
      e = static_cast<uint32_t>((uint64_t{e} * scalar) % modulus_);
    }
    return *this;
  }

  friend FieldVector operator+(FieldVector a, const FieldVector& b) {
    return a += b;
  }
  friend FieldVector operator-(FieldVector a, const FieldVector& b) {
    return a -= b;
  }
  friend FieldVector operator*(FieldVector a, uint64_t scalar) {
    return a *= scalar;
  }
  friend bool operator==(const FieldVector&, const FieldVector&) = default;

 private:
  friend void AddExpansion(FieldVector& acc, const Seed& seed, bool subtract);

  static uint64_t CheckedModulus(uint64_t q) {
    if (q < 2 || q > kMaxModulus) {
      throw std::invalid_argument("FieldVector: modulus out of range: " +
                                  std::to_string(q));
    }
    return q;
  }

  void CheckCompatible(const FieldVector& other) const {
    if (modulus_ != other.modulus_) {
      throw std::invalid_argument("FieldVector: modulus mismatch");
    }
    if (elems_.size() != other.elems_.size()) {
      throw std::invalid_argument("FieldVector: dimension mismatch (" +
                                  std::to_string(elems_.size()) + " vs " +
                                  std::to_string(other.elems_.size()) + ")");
    }
  }

  uint64_t modulus_ = kDefaultModulus;
  std::vector<uint32_t> elems_;
};

// Parameters of the real <-> F_q bridge. Signed integers are embedded with
// the symmetric representative split at q/2, so scale * clip must stay below
// (q - 1) / 2.
struct QuantizerConfig {
  uint64_t modulus = kDefaultModulus;
  double scale = 65536.0;
  double clip = 100.0;

  bool IsValid() const {
    return modulus >= 3 && modulus <= kMaxModulus && scale > 0 && clip > 0 &&
           std::isfinite(scale) && std::isfinite(clip) &&
           scale * clip < static_cast<double>(modulus - 1) / 2;
  }
  void Check() const {
    if (!IsValid()) {
      throw std::invalid_argument(
          "QuantizerConfig: need scale, clip > 0 and scale*clip < (q-1)/2");
    }
  }
};

inline uint32_t EmbedSigned(int64_t z, uint64_t modulus) {
  int64_t q = static_cast<int64_t>(modulus);
  int64_t r = z % q;
  return static_cast<uint32_t>(r < 0 ? r + q : r);
}

inline int64_t SignedRepresentative(uint32_t e, uint64_t modulus) {
  return 2 * uint64_t{e} < modulus
             ? static_cast<int64_t>(e)
             : static_cast<int64_t>(e) - static_cast<int64_t>(modulus);
}

// Clips each coordinate to [-clip, clip], scales it, and rounds stochastically
// to an adjacent integer so the result is unbiased.
template <RandomSource Rng>
FieldVector Quantize(std::span<const double> x, const QuantizerConfig& cfg,
                     Rng& rng) {
  cfg.Check();
  std::vector<uint32_t> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw std::invalid_argument("Quantize: non-finite coordinate");
    }
    double scaled = std::clamp(x[i], -cfg.clip, cfg.clip) * cfg.scale;
    double floor = std::floor(scaled);
    double up_probability = scaled - floor;
    auto z = static_cast<int64_t>(floor);
    if (UniformUnit(rng) < up_probability) ++z;
    out[i] = EmbedSigned(z, cfg.modulus);
  }
  return FieldVector(std::move(out), cfg.modulus);
}

// Maps each element to its signed representative and divides by
// scale * divisor. Throws std::invalid_argument if divisor <= 0.
inline std::vector<double> Dequantize(const FieldVector& v,
                                      const QuantizerConfig& cfg,
                                      double divisor = 1.0) {
  if (!(divisor > 0) || !std::isfinite(divisor)) {
    throw std::invalid_argument("Dequantize: divisor must be positive");
  }
  if (v.modulus() != cfg.modulus) {
    throw std::invalid_argument("Dequantize: modulus mismatch");
  }
  std::vector<double> out(v.dim());
  const double denom = cfg.scale * divisor;
  for (size_t i = 0; i < v.dim(); ++i) {
    out[i] = static_cast<double>(SignedRepresentative(v[i], v.modulus())) /
             denom;
  }
  return out;
}

}  // namespace basa

#endif  // BASA_FIELD_H_
