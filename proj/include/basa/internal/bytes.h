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

#ifndef BASA_INTERNAL_BYTES_H_
#define BASA_INTERNAL_BYTES_H_

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"

namespace basa {

using Bytes = std::vector<uint8_t>;

namespace internal {

// Appends big-endian integers and raw byte runs to a growing buffer.
class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(Bytes* out) : out_(out) {}

  void U8(uint8_t v) { buffer().push_back(v); }
  void U32(uint32_t v) { Uint(v, 4); }
  void U64(uint64_t v) { Uint(v, 8); }
  void F64(double v) { U64(std::bit_cast<uint64_t>(v)); }
  void Raw(std::span<const uint8_t> bytes) {
    buffer().insert(buffer().end(), bytes.begin(), bytes.end());
  }
  // 4-byte length prefix followed by the bytes.
  void Blob(std::span<const uint8_t> bytes) {
    U32(static_cast<uint32_t>(bytes.size()));
    Raw(bytes);
  }
  void String(std::string_view s) {
    Blob({reinterpret_cast<const uint8_t*>(s.data()), s.size()});
  }

  Bytes Take() { return std::move(owned_); }

 private:
  Bytes& buffer() { return out_ != nullptr ? *out_ : owned_; }
  void Uint(uint64_t v, int width) {
    for (int i = width - 1; i >= 0; --i) {
      buffer().push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
  }

  Bytes* out_ = nullptr;
  Bytes owned_;
};

// Cursor over a byte span. Every read is bounds-checked; the first failure
// latches and all later reads return zero values.
class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t U8() { return static_cast<uint8_t>(Uint(1)); }
  uint32_t U32() { return static_cast<uint32_t>(Uint(4)); }
  uint64_t U64() { return Uint(8); }
  double F64() { return std::bit_cast<double>(U64()); }

  std::span<const uint8_t> Raw(size_t n) {
    if (!Require(n)) return {};
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  template <size_t N>
  void Fixed(std::array<uint8_t, N>& out) {
    auto r = Raw(N);
    if (r.size() == N) std::memcpy(out.data(), r.data(), N);
  }
  Bytes Blob() {
    uint32_t n = U32();
    auto r = Raw(n);
    return Bytes(r.begin(), r.end());
  }
  std::string String() {
    Bytes b = Blob();
    return std::string(b.begin(), b.end());
  }

  bool ok() const { return ok_; }
  size_t remaining() const { return ok_ ? data_.size() - pos_ : 0; }
  size_t position() const { return pos_; }

  // Fails unless every byte was consumed without error.
  absl::Status Finish(std::string_view what) const {
    if (!ok_) {
      return absl::InvalidArgumentError(std::string(what) + ": truncated");
    }
    if (pos_ != data_.size()) {
      return absl::InvalidArgumentError(std::string(what) +
                                        ": trailing bytes");
    }
    return absl::OkStatus();
  }

 private:
  bool Require(size_t n) {
    if (!ok_ || data_.size() - pos_ < n) {
      ok_ = false;
      return false;
    }
    return true;
  }
  uint64_t Uint(int width) {
    if (!Require(width)) return 0;
    uint64_t v = 0;
    for (int i = 0; i < width; ++i) v = (v << 8) | data_[pos_ + i];
    pos_ += width;
    return v;
  }

  std::span<const uint8_t> data_;
  size_t pos_ = 0;
  bool ok_ = true;
};

inline std::string ToHex(std::span<const uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xf]);
  }
  return out;
}

}  // namespace internal
}  // namespace basa

#endif  // BASA_INTERNAL_BYTES_H_
