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

// Protocol sessions over a frame channel. The same user and AA-client code
// runs over the in-process direct channels below and over TCP.

#ifndef BASA_SESSION_H_
#define BASA_SESSION_H_

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "basa/protocol.h"
#include "basa/seedvault.h"
#include "basa/transport.h"

namespace basa {

// A bidirectional, ordered frame pipe to one peer.
class FrameChannel {
 public:
  virtual ~FrameChannel() = default;
  virtual absl::Status Send(const Frame& frame) = 0;
  // DEADLINE_EXCEEDED after `timeout` microseconds without a frame;
  // UNAVAILABLE when the peer is gone.
  virtual absl::StatusOr<Frame> Receive(Micros timeout) = 0;
};

using ChannelFactory =
    std::function<absl::StatusOr<std::unique_ptr<FrameChannel>>()>;

// KeyAuthority that forwards every call as one AA_KEY_REQ exchange on a fresh
// channel.
class RemoteKeyAuthority final : public KeyAuthority {
 public:
  explicit RemoteKeyAuthority(ChannelFactory connect,
                              Micros timeout = 10'000'000)
      : connect_(std::move(connect)), timeout_(timeout) {}

  absl::StatusOr<AttributeSet> PublishRound(uint64_t round,
                                            uint32_t buffer_size) override {
    auto resp = Call(AaPublish{round, buffer_size});
    if (!resp.ok()) return resp.status();
    internal::ByteReader r(resp->payload);
    r.U8();
    AttributeSet set = internal::ReadAttributeSet(r);
    if (auto s = r.Finish("AttributeSet"); !s.ok()) return s;
    return set;
  }

  absl::Status RegisterGrant(const GrantToken& token,
                             const Attribute& attribute) override {
    return Call(AaRegister{token, attribute}).status();
  }

  absl::Status RevokeGrant(const GrantToken& token) override {
    return Call(AaRevoke{token}).status();
  }

  absl::StatusOr<KeyIssue> RequestKey(const KeyRequest& request) override {
    auto resp = Call(request);
    if (!resp.ok()) return resp.status();
    internal::ByteReader r(resp->payload);
    r.U8();
    Bytes pp_bytes = r.Blob();
    KeyIssue issue;
    Attribute attribute;
    attribute.round = r.U64();
    attribute.slot = r.U32();
    internal::Key32 secret{};
    r.Fixed(secret);
    if (auto s = r.Finish("KeyIssue"); !s.ok()) return s;
    issue.key = AttributeSecretKey::FromSecret(attribute, secret);
    auto pp = PublicParams::Parse(pp_bytes);
    if (!pp.ok()) return pp.status();
    issue.params = *std::move(pp);
    return issue;
  }

 private:
  absl::StatusOr<Frame> Call(const AaRequest& request) {
    auto channel = connect_();
    if (!channel.ok()) return channel.status();
    if (auto s = (*channel)->Send(EncodeAaRequest(request)); !s.ok()) return s;
    auto resp = (*channel)->Receive(timeout_);
    if (!resp.ok()) return resp.status();
    if (resp->type == MsgType::kAaReject) return DecodeAaReject(*resp);
    if (resp->type != MsgType::kAaKeyResp) {
      return absl::InternalError("unexpected reply from attribute authority");
    }
    return resp;
  }

  ChannelFactory connect_;
  Micros timeout_;
};

// In-process channel to a ServerEndpoint. Every frame is encoded and decoded
// on the way through so the bytes match what a socket would carry.
class DirectServerChannel final : public FrameChannel {
 public:
  using Clock = std::function<Micros()>;
  using ResultSink = std::function<void(const RoundResult&)>;

  DirectServerChannel(ServerEndpoint& endpoint, Clock clock,
                      ResultSink on_result = {})
      : endpoint_(&endpoint),
        clock_(std::move(clock)),
        on_result_(std::move(on_result)) {}

  absl::Status Send(const Frame& frame) override {
    auto bytes = Encode(frame);
    if (!bytes.ok()) return bytes.status();
    auto decoded = Decode(*bytes);
    if (!decoded.ok()) return decoded.status();
    sent_.push_back(*bytes);
    auto reply = endpoint_->Handle(session_, decoded->frame, clock_());
    for (Frame& f : reply.frames) inbox_.push_back(std::move(f));
    if (reply.result && on_result_) on_result_(*reply.result);
    return absl::OkStatus();
  }

  absl::StatusOr<Frame> Receive(Micros) override {
    if (inbox_.empty()) return absl::DeadlineExceededError("no frame");
    Frame f = std::move(inbox_.front());
    inbox_.pop_front();
    return f;
  }

  // Encoded frames this channel carried to the server, in order.
  const std::vector<Bytes>& sent() const { return sent_; }

 private:
  ServerEndpoint* endpoint_;
  Clock clock_;
  ResultSink on_result_;
  ServerEndpoint::Session session_;
  std::deque<Frame> inbox_;
  std::vector<Bytes> sent_;
};

// In-process channel to an attribute authority.
class DirectAuthorityChannel final : public FrameChannel {
 public:
  explicit DirectAuthorityChannel(KeyAuthority& aa) : aa_(&aa) {}

  absl::Status Send(const Frame& frame) override {
    auto bytes = Encode(frame);
    if (!bytes.ok()) return bytes.status();
    auto decoded = Decode(*bytes);
    if (!decoded.ok()) return decoded.status();
    inbox_.push_back(HandleAaRequest(*aa_, decoded->frame));
    return absl::OkStatus();
  }
  absl::StatusOr<Frame> Receive(Micros) override {
    if (inbox_.empty()) return absl::DeadlineExceededError("no frame");
    Frame f = std::move(inbox_.front());
    inbox_.pop_front();
    return f;
  }

 private:
  KeyAuthority* aa_;
  std::deque<Frame> inbox_;
};

inline ChannelFactory DirectAuthorityFactory(KeyAuthority& aa) {
  return [&aa]() -> absl::StatusOr<std::unique_ptr<FrameChannel>> {
    return std::make_unique<DirectAuthorityChannel>(aa);
  };
}

struct UserSessionResult {
  UserOutcome outcome;
  Bytes upload_payload;  // exact UPLOAD payload bytes sent
  UploadAck ack;
  std::optional<RoundResult> round_result;  // set if this upload closed it
};

// One user's complete exchange: CONNECT, SLOT_GRANT, key request, UPLOAD,
// acknowledgement. The channel must already be connected to the server.
template <RandomSource Rng>
absl::StatusOr<UserSessionResult> RunUserSession(
    FrameChannel& server, KeyAuthority& authority, const UserInput& input,
    const QuantizerConfig& cfg, const StalenessFunction& staleness, Rng& rng,
    Micros timeout = 30'000'000) {
  if (auto s = server.Send(Frame{MsgType::kConnect, 0, {}}); !s.ok()) return s;
  auto grant_frame = server.Receive(timeout);
  if (!grant_frame.ok()) return grant_frame.status();
  if (grant_frame->type == MsgType::kAbort) {
    return absl::UnavailableError(
        "server refused: " +
        std::string(grant_frame->payload.begin(), grant_frame->payload.end()));
  }
  if (grant_frame->type != MsgType::kSlotGrant) {
    return absl::InternalError("expected SLOT_GRANT");
  }
  auto grant = DecodeSlotGrant(grant_frame->payload);
  if (!grant.ok()) return grant.status();

  auto outcome = RunUser(input, *grant, authority, cfg, staleness, rng);
  if (!outcome.ok()) {
    (void)server.Send(EncodeAbort(grant->round_id, std::string(outcome.status().message())));
    return outcome.status();
  }
  UserSessionResult result;
  result.upload_payload = EncodeUpload(outcome->upload);
  result.outcome = *std::move(outcome);
  if (auto s = server.Send(
          Frame{MsgType::kUpload, grant->round_id, result.upload_payload});
      !s.ok()) {
    return s;
  }
  auto ack_frame = server.Receive(timeout);
  if (!ack_frame.ok()) return ack_frame.status();
  if (ack_frame->type == MsgType::kAbort) {
    return absl::AbortedError(
        "upload rejected: " +
        std::string(ack_frame->payload.begin(), ack_frame->payload.end()));
  }
  auto ack = DecodeModelPush(*ack_frame, cfg.modulus);
  if (!ack.ok()) return ack.status();
  if (!std::holds_alternative<UploadAck>(*ack)) {
    return absl::InternalError("expected upload acknowledgement");
  }
  result.ack = std::get<UploadAck>(*ack);
  if (result.ack.committed) {
    auto note = server.Receive(timeout);
    if (!note.ok()) return note.status();
    auto push = DecodeModelPush(*note, cfg.modulus);
    if (!push.ok()) return push.status();
    if (auto* rr = std::get_if<RoundResult>(&*push)) {
      result.round_result = std::move(*rr);
    }
  }
  return result;
}

}  // namespace basa

#endif  // BASA_SESSION_H_
