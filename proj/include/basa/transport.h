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

// Wire format shared by every backend.
//
//   frame   := msg_type u8 | round_id u64 | payload_len u32 | payload
//
// All integers are big-endian. Payload layouts for each message type are
// defined by the Encode*/Decode* pairs below.

#ifndef BASA_TRANSPORT_H_
#define BASA_TRANSPORT_H_

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "basa/field.h"
#include "basa/internal/bytes.h"
#include "basa/protocol.h"
#include "basa/seedvault.h"

namespace basa {

enum class MsgType : uint8_t {
  kConnect = 1,
  kSlotGrant = 2,
  kUpload = 3,
  kAbort = 4,
  kAaKeyReq = 5,
  kAaKeyResp = 6,
  kAaReject = 7,
  kModelPush = 8,
};

inline bool IsKnownMsgType(uint8_t tag) { return tag >= 1 && tag <= 8; }

inline constexpr size_t kFrameHeaderSize = 13;

struct Frame {
  MsgType type = MsgType::kConnect;
  uint64_t round_id = 0;
  Bytes payload;

  friend bool operator==(const Frame&, const Frame&) = default;
};

inline absl::StatusOr<Bytes> Encode(const Frame& frame) {
  if (frame.payload.size() > std::numeric_limits<uint32_t>::max()) {
    return absl::InvalidArgumentError("frame payload exceeds 2^32-1 bytes");
  }
  Bytes out;
  out.reserve(kFrameHeaderSize + frame.payload.size());
  internal::ByteWriter w(&out);
  w.U8(static_cast<uint8_t>(frame.type));
  w.U64(frame.round_id);
  w.U32(static_cast<uint32_t>(frame.payload.size()));
  w.Raw(frame.payload);
  return out;
}

// Incomplete input is reported as OUT_OF_RANGE, an unknown message type as
// INVALID_ARGUMENT.
inline bool IsIncompleteFrame(const absl::Status& s) {
  return absl::IsOutOfRange(s);
}

struct FrameHeader {
  MsgType type;
  uint64_t round_id;
  uint32_t payload_len;
};

inline absl::StatusOr<FrameHeader> DecodeHeader(
    std::span<const uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) {
    return absl::OutOfRangeError("incomplete frame header");
  }
  internal::ByteReader r(bytes.first(kFrameHeaderSize));
  uint8_t tag = r.U8();
  if (!IsKnownMsgType(tag)) {
    return absl::InvalidArgumentError("unknown message type " +
                                      std::to_string(tag));
  }
  FrameHeader h{static_cast<MsgType>(tag), 0, 0};
  h.round_id = r.U64();
  h.payload_len = r.U32();
  return h;
}

struct DecodedFrame {
  Frame frame;
  size_t consumed = 0;
};

// Reads exactly one frame from the front of `bytes`; anything after it is
// left for the next call.
inline absl::StatusOr<DecodedFrame> Decode(std::span<const uint8_t> bytes) {
  auto header = DecodeHeader(bytes);
  if (!header.ok()) return header.status();
  const size_t total = kFrameHeaderSize + size_t{header->payload_len};
  if (bytes.size() < total) {
    return absl::OutOfRangeError("incomplete frame payload");
  }
  auto payload = bytes.subspan(kFrameHeaderSize, header->payload_len);
  return DecodedFrame{
      Frame{header->type, header->round_id,
            Bytes(payload.begin(), payload.end())},
      total};
}

// ---------------------------------------------------------------------------
// Payload codecs.

namespace internal {

inline void WriteAttributeSet(ByteWriter& w, const AttributeSet& set) {
  w.U64(set.round);
  w.U32(static_cast<uint32_t>(set.keys.size()));
  for (const AttributePublicKey& k : set.keys) {
    w.U32(k.attribute.slot);
    w.Raw(k.key);
  }
}

inline AttributeSet ReadAttributeSet(ByteReader& r) {
  AttributeSet set;
  set.round = r.U64();
  uint32_t n = r.U32();
  // Each entry is 36 bytes; refuse counts the input cannot hold.
  if (n > r.remaining() / 36) {
    r.Raw(r.remaining() + 1);
    return set;
  }
  set.keys.resize(n);
  for (AttributePublicKey& k : set.keys) {
    k.attribute.round = set.round;
    k.attribute.slot = r.U32();
    r.Fixed(k.key);
  }
  return set;
}

inline void WriteSealedSeeds(ByteWriter& w, std::span<const SealedSeed> seeds) {
  w.U32(static_cast<uint32_t>(seeds.size()));
  for (const SealedSeed& s : seeds) s.AppendTo(w);
}

inline std::vector<SealedSeed> ReadSealedSeeds(ByteReader& r) {
  uint32_t n = r.U32();
  std::vector<SealedSeed> out;
  // Minimum serialized SealedSeed is 32 bytes.
  if (n > r.remaining() / 32) {
    r.Raw(r.remaining() + 1);
    return out;
  }
  out.reserve(n);
  for (uint32_t i = 0; i < n && r.ok(); ++i) out.push_back(SealedSeed::ReadFrom(r));
  return out;
}

inline void WriteFieldElements(ByteWriter& w, const FieldVector& v) {
  w.U32(static_cast<uint32_t>(v.dim()));
  for (uint32_t e : v.elements()) w.U32(e);
}

inline absl::StatusOr<FieldVector> ReadFieldElements(ByteReader& r,
                                                     uint64_t modulus) {
  uint32_t d = r.U32();
  if (d > r.remaining() / 4) {
    return absl::InvalidArgumentError("field vector: truncated");
  }
  std::vector<uint32_t> elems(d);
  for (uint32_t& e : elems) {
    e = r.U32();
    if (e >= modulus) {
      return absl::InvalidArgumentError("field vector: element not below q");
    }
  }
  return FieldVector(std::move(elems), modulus);
}

}  // namespace internal

// SLOT_GRANT: attribute set (round u64 | n u32 | n x (slot u32 | key[32])) |
// slot u32 | incoming sealed seeds (count u32 | ...) | round_id u64 |
// token[16] | deadline i64
inline Bytes EncodeSlotGrant(const SlotGrant& g) {
  internal::ByteWriter w;
  internal::WriteAttributeSet(w, g.attributes);
  w.U32(g.slot);
  internal::WriteSealedSeeds(w, g.incoming);
  w.U64(g.round_id);
  w.Raw(g.token.bytes);
  w.U64(static_cast<uint64_t>(g.deadline));
  return w.Take();
}

inline absl::StatusOr<SlotGrant> DecodeSlotGrant(
    std::span<const uint8_t> payload) {
  internal::ByteReader r(payload);
  SlotGrant g;
  g.attributes = internal::ReadAttributeSet(r);
  g.slot = r.U32();
  g.incoming = internal::ReadSealedSeeds(r);
  g.round_id = r.U64();
  r.Fixed(g.token.bytes);
  g.deadline = static_cast<Micros>(r.U64());
  if (auto s = r.Finish("SlotGrant"); !s.ok()) return s;
  return g;
}

// UPLOAD: staleness f64 | d u32 | d x element u32 | count u32 | sealed seeds
inline Bytes EncodeUpload(const UploadMsg& up) {
  internal::ByteWriter w;
  w.F64(up.staleness);
  internal::WriteFieldElements(w, up.masked_update);
  internal::WriteSealedSeeds(w, up.outgoing);
  return w.Take();
}

inline size_t UploadPayloadSize(size_t dim,
                                std::span<const SealedSeed> outgoing) {
  size_t n = 8 + 4 + 4 * dim + 4;
  for (const SealedSeed& s : outgoing) n += s.SerializedSize();
  return n;
}

inline absl::StatusOr<UploadMsg> DecodeUpload(std::span<const uint8_t> payload,
                                              uint64_t modulus) {
  internal::ByteReader r(payload);
  UploadMsg up;
  up.staleness = r.F64();
  auto v = internal::ReadFieldElements(r, modulus);
  if (!v.ok()) return v.status();
  up.masked_update = *std::move(v);
  up.outgoing = internal::ReadSealedSeeds(r);
  if (auto s = r.Finish("UploadMsg"); !s.ok()) return s;
  return up;
}

// ---------------------------------------------------------------------------
// Attribute-authority messages. AA_KEY_REQ payloads start with a kind byte;
// AA_KEY_RESP echoes it. AA_REJECT carries status code u32 | message.

enum class AaRequestKind : uint8_t {
  kKey = 1,       // round u64 | slot u32 | token[16]
  kRegister = 2,  // token[16] | round u64 | slot u32
  kRevoke = 3,    // token[16]
  kPublish = 4,   // round u64 | buffer_size u32
};

struct AaRegister {
  GrantToken token;
  Attribute attribute;
};
struct AaRevoke {
  GrantToken token;
};
struct AaPublish {
  uint64_t round = 0;
  uint32_t buffer_size = 0;
};
using AaRequest = std::variant<KeyRequest, AaRegister, AaRevoke, AaPublish>;

inline Frame EncodeAaRequest(const AaRequest& req) {
  internal::ByteWriter w;
  uint64_t round = 0;
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, KeyRequest>) {
          w.U8(static_cast<uint8_t>(AaRequestKind::kKey));
          w.U64(r.attribute.round);
          w.U32(r.attribute.slot);
          w.Raw(r.token.bytes);
          round = r.attribute.round;
        } else if constexpr (std::is_same_v<T, AaRegister>) {
          w.U8(static_cast<uint8_t>(AaRequestKind::kRegister));
          w.Raw(r.token.bytes);
          w.U64(r.attribute.round);
          w.U32(r.attribute.slot);
          round = r.attribute.round;
        } else if constexpr (std::is_same_v<T, AaRevoke>) {
          w.U8(static_cast<uint8_t>(AaRequestKind::kRevoke));
          w.Raw(r.token.bytes);
        } else {
          w.U8(static_cast<uint8_t>(AaRequestKind::kPublish));
          w.U64(r.round);
          w.U32(r.buffer_size);
          round = r.round;
        }
      },
      req);
  return Frame{MsgType::kAaKeyReq, round, w.Take()};
}

inline absl::StatusOr<AaRequest> DecodeAaRequest(const Frame& f) {
  if (f.type != MsgType::kAaKeyReq) {
    return absl::InvalidArgumentError("not an AA request");
  }
  internal::ByteReader r(f.payload);
  AaRequest out;
  switch (static_cast<AaRequestKind>(r.U8())) {
    case AaRequestKind::kKey: {
      KeyRequest k;
      k.attribute.round = r.U64();
      k.attribute.slot = r.U32();
      r.Fixed(k.token.bytes);
      out = k;
      break;
    }
    case AaRequestKind::kRegister: {
      AaRegister g;
      r.Fixed(g.token.bytes);
      g.attribute.round = r.U64();
      g.attribute.slot = r.U32();
      out = g;
      break;
    }
    case AaRequestKind::kRevoke: {
      AaRevoke v;
      r.Fixed(v.token.bytes);
      out = v;
      break;
    }
    case AaRequestKind::kPublish: {
      AaPublish p;
      p.round = r.U64();
      p.buffer_size = r.U32();
      out = p;
      break;
    }
    default:
      return absl::InvalidArgumentError("unknown AA request kind");
  }
  if (auto s = r.Finish("AaRequest"); !s.ok()) return s;
  return out;
}

inline Frame EncodeAaReject(uint64_t round, const absl::Status& status) {
  internal::ByteWriter w;
  w.U32(static_cast<uint32_t>(status.code()));
  w.String(std::string(status.message()));
  return Frame{MsgType::kAaReject, round, w.Take()};
}

inline absl::Status DecodeAaReject(const Frame& f) {
  internal::ByteReader r(f.payload);
  auto code = static_cast<absl::StatusCode>(r.U32());
  std::string message = r.String();
  if (!r.Finish("AaReject").ok() || code == absl::StatusCode::kOk) {
    return absl::InternalError("malformed AA rejection");
  }
  return absl::Status(code, message);
}

// Serves AA requests against an in-process authority. Used by the TCP AA
// process and by loopback tests.
inline Frame HandleAaRequest(KeyAuthority& aa, const Frame& request) {
  auto req = DecodeAaRequest(request);
  if (!req.ok()) return EncodeAaReject(request.round_id, req.status());
  internal::ByteWriter w;
  absl::Status status;
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, KeyRequest>) {
          auto issue = aa.RequestKey(r);
          if (!issue.ok()) {
            status = issue.status();
            return;
          }
          w.U8(static_cast<uint8_t>(AaRequestKind::kKey));
          w.Blob(issue->params.Serialize());
          w.U64(issue->key.attribute.round);
          w.U32(issue->key.attribute.slot);
          w.Raw(issue->key.key);
        } else if constexpr (std::is_same_v<T, AaRegister>) {
          status = aa.RegisterGrant(r.token, r.attribute);
          w.U8(static_cast<uint8_t>(AaRequestKind::kRegister));
        } else if constexpr (std::is_same_v<T, AaRevoke>) {
          status = aa.RevokeGrant(r.token);
          w.U8(static_cast<uint8_t>(AaRequestKind::kRevoke));
        } else {
          auto set = aa.PublishRound(r.round, r.buffer_size);
          if (!set.ok()) {
            status = set.status();
            return;
          }
          w.U8(static_cast<uint8_t>(AaRequestKind::kPublish));
          internal::WriteAttributeSet(w, *set);
        }
      },
      *req);
  if (!status.ok()) return EncodeAaReject(request.round_id, status);
  return Frame{MsgType::kAaKeyResp, request.round_id, w.Take()};
}

// ---------------------------------------------------------------------------
// MODEL_PUSH: kind u8, then per kind
//   1 upload ack:     slot u32 | committed u8
//   2 round result:   contributors u32 | staleness_total f64 | d u32 | d x u32
//   3 global model:   timestamp u64 | d u32 | d x f64

enum class PushKind : uint8_t { kAck = 1, kRoundResult = 2, kModel = 3 };

struct UploadAck {
  uint32_t slot = 0;
  bool committed = false;
};

struct ModelSnapshot {
  uint64_t timestamp = 0;
  std::vector<double> weights;
  friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;
};

using ModelPush = std::variant<UploadAck, RoundResult, ModelSnapshot>;

inline Frame EncodeModelPush(uint64_t round, const ModelPush& push) {
  internal::ByteWriter w;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, UploadAck>) {
          w.U8(static_cast<uint8_t>(PushKind::kAck));
          w.U32(p.slot);
          w.U8(p.committed ? 1 : 0);
        } else if constexpr (std::is_same_v<T, RoundResult>) {
          w.U8(static_cast<uint8_t>(PushKind::kRoundResult));
          w.U32(p.contributor_count);
          w.F64(p.staleness_total);
          internal::WriteFieldElements(w, p.aggregate);
        } else {
          w.U8(static_cast<uint8_t>(PushKind::kModel));
          w.U64(p.timestamp);
          w.U32(static_cast<uint32_t>(p.weights.size()));
          for (double x : p.weights) w.F64(x);
        }
      },
      push);
  return Frame{MsgType::kModelPush, round, w.Take()};
}

inline absl::StatusOr<ModelPush> DecodeModelPush(const Frame& f,
                                                 uint64_t modulus) {
  if (f.type != MsgType::kModelPush) {
    return absl::InvalidArgumentError("not a MODEL_PUSH frame");
  }
  internal::ByteReader r(f.payload);
  ModelPush out;
  switch (static_cast<PushKind>(r.U8())) {
    case PushKind::kAck: {
      UploadAck a;
      a.slot = r.U32();
      a.committed = r.U8() != 0;
      out = a;
      break;
    }
    case PushKind::kRoundResult: {
      RoundResult res;
      res.round_id = f.round_id;
      res.contributor_count = r.U32();
      res.staleness_total = r.F64();
      auto v = internal::ReadFieldElements(r, modulus);
      if (!v.ok()) return v.status();
      res.aggregate = *std::move(v);
      out = std::move(res);
      break;
    }
    case PushKind::kModel: {
      ModelSnapshot m;
      m.timestamp = r.U64();
      uint32_t d = r.U32();
      if (d > r.remaining() / 8) {
        return absl::InvalidArgumentError("model push: truncated");
      }
      m.weights.resize(d);
      for (double& x : m.weights) x = r.F64();
      out = std::move(m);
      break;
    }
    default:
      return absl::InvalidArgumentError("unknown MODEL_PUSH kind");
  }
  if (auto s = r.Finish("ModelPush"); !s.ok()) return s;
  return out;
}

inline Frame EncodeAbort(uint64_t round, std::string_view reason) {
  return Frame{MsgType::kAbort, round, Bytes(reason.begin(), reason.end())};
}

// ---------------------------------------------------------------------------
// Server-side session handling shared by every backend.

// Translates frames into ServerEngine calls. One Session per connection; the
// session remembers the grant token so uploads are bound to the connection
// that received the grant.
class ServerEndpoint {
 public:
  struct Session {
    std::optional<GrantToken> token;
  };

  ServerEndpoint(ServerEngine& engine, QuantizerConfig cfg)
      : engine_(&engine), cfg_(cfg) {}

  struct Reply {
    std::vector<Frame> frames;
    std::optional<RoundResult> result;  // set when this frame closed a round
  };

  // CONNECT -> SLOT_GRANT (or ABORT "busy"); UPLOAD -> MODEL_PUSH ack, plus a
  // round-result notification when the buffer filled.
  Reply Handle(Session& session, const Frame& in, Micros now) {
    const uint64_t round = engine_->state().round_id;
    Reply reply;
    switch (in.type) {
      case MsgType::kConnect: {
        auto grant = engine_->OnConnect(now);
        if (!grant.ok()) {
          reply.frames.push_back(
              EncodeAbort(round, grant.status().ToString()));
          break;
        }
        session.token = grant->token;
        reply.frames.push_back(
            Frame{MsgType::kSlotGrant, round, EncodeSlotGrant(*grant)});
        break;
      }
      case MsgType::kUpload: {
        if (!session.token) {
          reply.frames.push_back(EncodeAbort(round, "upload without grant"));
          break;
        }
        const uint32_t slot = engine_->state().pending
                                  ? engine_->state().pending->slot
                                  : 0;
        auto up = DecodeUpload(in.payload, cfg_.modulus);
        if (!up.ok()) {
          engine_->Abort(*session.token);
          session.token.reset();
          reply.frames.push_back(EncodeAbort(round, up.status().ToString()));
          break;
        }
        auto res = engine_->OnUpload(*session.token, *up);
        session.token.reset();
        if (!res.ok()) {
          reply.frames.push_back(EncodeAbort(round, res.status().ToString()));
          break;
        }
        reply.frames.push_back(EncodeModelPush(
            round, UploadAck{.slot = slot, .committed = res->has_value()}));
        if (res->has_value()) {
          reply.frames.push_back(EncodeModelPush(round, **res));
          reply.result = std::move(**res);
        }
        break;
      }
      case MsgType::kAbort:
        if (session.token) engine_->Abort(*session.token);
        session.token.reset();
        break;
      default:
        reply.frames.push_back(EncodeAbort(round, "unexpected message"));
    }
    return reply;
  }

 private:
  ServerEngine* engine_;
  QuantizerConfig cfg_;
};

// ---------------------------------------------------------------------------
// Loopback backend: frames travel as encoded bytes through per-pair FIFO
// queues on a simulated clock. A frame sent at time s over a link with
// latency L becomes receivable at exactly s + L.

using EndpointId = uint32_t;

struct Delivery {
  Frame frame;
  EndpointId from = 0;
  Micros arrival = 0;
};

class LoopbackNetwork {
 public:
  void SetLatency(EndpointId from, EndpointId to, Micros latency) {
    latency_[{from, to}] = latency;
  }
  Micros Latency(EndpointId from, EndpointId to) const {
    auto it = latency_.find({from, to});
    return it == latency_.end() ? 0 : it->second;
  }

  // Sends with the link's configured latency plus `extra` (e.g. a
  // size-dependent transfer time). Returns the arrival time.
  absl::StatusOr<Micros> Deliver(EndpointId from, EndpointId to,
                                 const Frame& frame, Micros send_time,
                                 Micros extra = 0) {
    auto bytes = Encode(frame);
    if (!bytes.ok()) return bytes.status();
    Micros arrival = send_time + Latency(from, to) + extra;
    auto& queue = queues_[{from, to}];
    // FIFO per pair: a frame never overtakes an earlier one on the same link.
    if (!queue.empty()) arrival = std::max(arrival, queue.back().arrival);
    queue.push_back({*std::move(bytes), arrival});
    return arrival;
  }

  // Next frame from `from` to `to` whose arrival time is <= now.
  std::optional<Delivery> Receive(EndpointId from, EndpointId to, Micros now) {
    auto it = queues_.find({from, to});
    if (it == queues_.end() || it->second.empty() ||
        it->second.front().arrival > now) {
      return std::nullopt;
    }
    Pending p = std::move(it->second.front());
    it->second.pop_front();
    auto decoded = Decode(p.bytes);
    if (!decoded.ok()) return std::nullopt;  // cannot happen: we encoded it
    return Delivery{std::move(decoded->frame), from, p.arrival};
  }

  size_t InFlight() const {
    size_t n = 0;
    for (const auto& [_, q] : queues_) n += q.size();
    return n;
  }

 private:
  struct Pending {
    Bytes bytes;
    Micros arrival;
  };
  std::map<std::pair<EndpointId, EndpointId>, Micros> latency_;
  std::map<std::pair<EndpointId, EndpointId>, std::deque<Pending>> queues_;
};

}  // namespace basa

#endif  // BASA_TRANSPORT_H_
