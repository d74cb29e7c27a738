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

#include "basa/prg.h"

#include <numeric>
#include <random>
#include <vector>

#include "boost/math/distributions/chi_squared.hpp"
#include "gmock/gmock.h"
#include "gtest/gtest.h"

namespace basa {
namespace {

std::vector<uint32_t> Elems(const FieldVector& v) {
  return {v.elements().begin(), v.elements().end()};
}

using ::testing::ElementsAre;

Seed CountingSeed() {
  Seed s;
  std::iota(s.bytes.begin(), s.bytes.end(), 0);
  return s;
}

// Reference values produced with an independent AES-256-CTR implementation
// (Python "cryptography"): zero IV, big-endian 32-bit words, rejection of
// words at or above floor(2^32 / q) * q.
TEST(PrgTest, GoldenVectors) {
  EXPECT_THAT(Elems(Expand(CountingSeed(), 8, kDefaultModulus)),
              ElementsAre(1922039991u, 709468112u, 703830635u, 1563326337u,
                          1885173423u, 1253679077u, 653695794u, 1220687421u));
  EXPECT_THAT(Elems(Expand(Seed{}, 6, kDefaultModulus)),
              ElementsAre(1553318009u, 574654858u, 759734805u, 310648968u,
                          1393527547u, 1195718330u));
  EXPECT_THAT(Elems(Expand(CountingSeed(), 8, 97)),
              ElementsAre(91u, 24u, 58u, 3u, 22u, 55u, 55u, 39u));
}

TEST(PrgTest, RejectionSamplingSkipsHighWords) {
  // With q = 2^31 + 1 only one multiple fits below 2^32, so roughly half the
  // words are rejected.
  EXPECT_THAT(Elems(Expand(CountingSeed(), 8, (uint64_t{1} << 31) + 1)),
              ElementsAre(709468112u, 1253679077u, 1220687421u, 247248350u,
                          145271093u, 405574041u, 679567407u, 1314907836u));
}

TEST(PrgTest, Deterministic) {
  std::mt19937_64 rng(3);
  Seed s = Seed::Generate(rng);
  EXPECT_EQ(Expand(s, 1000, kDefaultModulus), Expand(s, 1000, kDefaultModulus));
}

TEST(PrgTest, PrefixConsistent) {
  std::mt19937_64 rng(4);
  for (uint64_t q : {uint64_t{97}, kDefaultModulus, (uint64_t{1} << 31) + 1,
                     kMaxModulus}) {
    Seed s = Seed::Generate(rng);
    FieldVector longer = Expand(s, 5000, q);
    for (size_t d : {1, 3, 4, 5, 1000, 4099}) {
      FieldVector shorter = Expand(s, d, q);
      ASSERT_EQ(shorter.dim(), d);
      for (size_t i = 0; i < d; ++i) EXPECT_EQ(shorter[i], longer[i]);
    }
  }
}

TEST(PrgTest, DistinctSeedsDiffer) {
  std::mt19937_64 rng(5);
  Seed a = Seed::Generate(rng);
  Seed b = Seed::Generate(rng);
  ASSERT_FALSE(a == b);
  FieldVector ea = Expand(a, 64, kDefaultModulus);
  FieldVector eb = Expand(b, 64, kDefaultModulus);
  int equal = 0;
  for (size_t i = 0; i < 64; ++i) equal += ea[i] == eb[i];
  EXPECT_EQ(equal, 0);
}

TEST(PrgTest, ElementsBelowModulus) {
  std::mt19937_64 rng(6);
  for (uint64_t q : {uint64_t{2}, uint64_t{97}, kDefaultModulus, kMaxModulus}) {
    FieldVector v = Expand(Seed::Generate(rng), 10000, q);
    for (uint32_t e : v.elements()) EXPECT_LT(e, q);
  }
}

TEST(PrgTest, AddExpansionMatchesExpand) {
  std::mt19937_64 rng(8);
  for (uint64_t q : {uint64_t{2}, uint64_t{97}, kDefaultModulus,
                     kDefaultModulus + 2, kMaxModulus}) {
    for (size_t dim : {size_t{0}, size_t{1}, size_t{1025}, size_t{5000}}) {
      std::vector<uint32_t> start(dim);
      for (uint32_t& e : start) e = static_cast<uint32_t>(rng() % q);
      const FieldVector base(start, q);
      const Seed seed = Seed::Generate(rng);
      FieldVector plus = base, minus = base;
      AddExpansion(plus, seed, /*subtract=*/false);
      AddExpansion(minus, seed, /*subtract=*/true);
      FieldVector want_plus = base, want_minus = base;
      want_plus += Expand(seed, dim, q);
      want_minus -= Expand(seed, dim, q);
      EXPECT_EQ(plus, want_plus) << "q=" << q << " dim=" << dim;
      EXPECT_EQ(minus, want_minus) << "q=" << q << " dim=" << dim;
    }
  }
}

TEST(PrgTest, ChiSquareUniformity) {
  constexpr size_t kDim = 100000;
  constexpr size_t kBins = 256;
  Seed s = CountingSeed();
  FieldVector v = Expand(s, kDim, kDefaultModulus);
  std::vector<double> counts(kBins, 0);
  for (uint32_t e : v.elements()) {
    counts[static_cast<size_t>(uint64_t{e} * kBins / kDefaultModulus)] += 1;
  }
  const double expected = double(kDim) / kBins;
  double stat = 0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(kBins - 1);
  const double critical = boost::math::quantile(complement(dist, 0.001));
  EXPECT_LT(stat, critical);
}

}  // namespace
}  // namespace basa
