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

// Thin RAII wrappers over the handful of OpenSSL primitives the library
// uses: AES-256-CTR keystream, AES-256-GCM and HKDF-SHA256.

#ifndef BASA_INTERNAL_OPENSSL_H_
#define BASA_INTERNAL_OPENSSL_H_

#include <openssl/core_names.h>
#include <openssl/evp.h>
#include <openssl/kdf.h>
#include <openssl/params.h>
#include <openssl/rand.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "basa/internal/bytes.h"

namespace basa::internal {

using Key32 = std::array<uint8_t, 32>;

struct CipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

[[noreturn]] inline void OpenSslFailure(const char* what) {
  throw std::runtime_error(std::string("openssl: ") + what);
}

// Algorithm handles are fetched once per process; the implicit fetch behind
// EVP_aes_256_*() costs a provider lookup on every init.
inline const EVP_CIPHER* Aes256Ctr() {
  static EVP_CIPHER* const cipher =
      EVP_CIPHER_fetch(nullptr, "AES-256-CTR", nullptr);
  if (!cipher) OpenSslFailure("fetch aes-256-ctr");
  return cipher;
}

inline const EVP_CIPHER* Aes256Gcm() {
  static EVP_CIPHER* const cipher =
      EVP_CIPHER_fetch(nullptr, "AES-256-GCM", nullptr);
  if (!cipher) OpenSslFailure("fetch aes-256-gcm");
  return cipher;
}

inline EVP_KDF* Hkdf() {
  static EVP_KDF* const kdf = EVP_KDF_fetch(nullptr, "HKDF", nullptr);
  if (!kdf) OpenSslFailure("fetch hkdf");
  return kdf;
}

struct KdfCtxDeleter {
  void operator()(EVP_KDF_CTX* ctx) const { EVP_KDF_CTX_free(ctx); }
};
using KdfCtx = std::unique_ptr<EVP_KDF_CTX, KdfCtxDeleter>;

// AES-256 in counter mode with an all-zero initial counter block. Successive
// calls continue the same stream.
class AesCtrStream {
 public:
  explicit AesCtrStream(const Key32& key) : ctx_(EVP_CIPHER_CTX_new()) {
    static constexpr std::array<uint8_t, 16> kZeroIv{};
    if (!ctx_ || EVP_EncryptInit_ex(ctx_.get(), Aes256Ctr(), nullptr,
                                    key.data(), kZeroIv.data()) != 1) {
      OpenSslFailure("aes-256-ctr init");
    }
  }

  // Overwrites `out` with the next out.size() keystream bytes.
  void Generate(std::span<uint8_t> out) {
    static constexpr std::array<uint8_t, 4096> kZeros{};
    for (size_t at = 0; at < out.size(); at += kZeros.size()) {
      const int n = static_cast<int>(std::min(kZeros.size(), out.size() - at));
      int len = 0;
      if (EVP_EncryptUpdate(ctx_.get(), out.data() + at, &len, kZeros.data(),
                            n) != 1 ||
          len != n) {
        OpenSslFailure("aes-256-ctr update");
      }
    }
  }

 private:
  CipherCtx ctx_;
};

inline Key32 HkdfSha256(std::span<const uint8_t> ikm,
                        std::span<const uint8_t> salt,
                        std::span<const uint8_t> info) {
  KdfCtx ctx(EVP_KDF_CTX_new(Hkdf()));
  Key32 out{};
  // OpenSSL rejects a null salt pointer even when the length is zero.
  static uint8_t empty = 0;
  char digest[] = "SHA256";
  auto octets = [](const char* key, std::span<const uint8_t> v) {
    return OSSL_PARAM_construct_octet_string(
        key, v.empty() ? &empty : const_cast<uint8_t*>(v.data()), v.size());
  };
  const OSSL_PARAM params[] = {
      OSSL_PARAM_construct_utf8_string(OSSL_KDF_PARAM_DIGEST, digest, 0),
      octets(OSSL_KDF_PARAM_KEY, ikm),
      octets(OSSL_KDF_PARAM_SALT, salt),
      octets(OSSL_KDF_PARAM_INFO, info),
      OSSL_PARAM_construct_end(),
  };
  if (!ctx || EVP_KDF_derive(ctx.get(), out.data(), out.size(), params) <= 0) {
    OpenSslFailure("hkdf-sha256");
  }
  return out;
}

inline constexpr size_t kGcmNonceSize = 12;
inline constexpr size_t kGcmTagSize = 16;
using GcmNonce = std::array<uint8_t, kGcmNonceSize>;

// Returns ciphertext || tag.
inline Bytes AesGcmSeal(const Key32& key, const GcmNonce& nonce,
                        std::span<const uint8_t> aad,
                        std::span<const uint8_t> plaintext) {
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  Bytes out(plaintext.size() + kGcmTagSize);
  int len = 0;
  if (!ctx ||
      EVP_EncryptInit_ex(ctx.get(), Aes256Gcm(), nullptr, key.data(),
                         nonce.data()) != 1 ||
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(),
                        static_cast<int>(aad.size())) != 1 ||
      EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(),
                        static_cast<int>(plaintext.size())) != 1 ||
      EVP_EncryptFinal_ex(ctx.get(), out.data() + len, &len) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kGcmTagSize,
                          out.data() + plaintext.size()) != 1) {
    OpenSslFailure("aes-256-gcm seal");
  }
  return out;
}

// Returns nullopt on authentication failure.
inline std::optional<Bytes> AesGcmOpen(const Key32& key, const GcmNonce& nonce,
                                       std::span<const uint8_t> aad,
                                       std::span<const uint8_t> sealed) {
  if (sealed.size() < kGcmTagSize) return std::nullopt;
  const size_t body = sealed.size() - kGcmTagSize;
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  Bytes out(body);
  Bytes tag(sealed.begin() + body, sealed.end());
  int len = 0;
  if (!ctx ||
      EVP_DecryptInit_ex(ctx.get(), Aes256Gcm(), nullptr, key.data(),
                         nonce.data()) != 1 ||
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(),
                        static_cast<int>(aad.size())) != 1 ||
      EVP_DecryptUpdate(ctx.get(), out.data(), &len, sealed.data(),
                        static_cast<int>(body)) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kGcmTagSize,
                          tag.data()) != 1) {
    return std::nullopt;
  }
  if (EVP_DecryptFinal_ex(ctx.get(), out.data() + len, &len) != 1) {
    return std::nullopt;
  }
  return out;
}

inline void SecureRandomBytes(std::span<uint8_t> out) {
  if (RAND_bytes(out.data(), static_cast<int>(out.size())) != 1) {
    OpenSslFailure("RAND_bytes");
  }
}

}  // namespace basa::internal

#endif  // BASA_INTERNAL_OPENSSL_H_
