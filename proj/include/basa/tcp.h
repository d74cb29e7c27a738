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

// TCP backend: frames over stream sockets, one connection per user protocol
// run. POSIX only.

#ifndef BASA_TCP_H_
#define BASA_TCP_H_

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "basa/protocol.h"
#include "basa/session.h"
#include "basa/transport.h"

namespace basa {

inline Micros WallMicros() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Frames larger than this are refused on receive.
inline constexpr uint32_t kMaxReceivePayload = 1u << 30;

class TcpStream final : public FrameChannel {
 public:
  explicit TcpStream(int fd) : fd_(fd) {}
  TcpStream(TcpStream&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  TcpStream& operator=(TcpStream&& other) noexcept {
    if (this != &other) {
      Close();
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  ~TcpStream() override { Close(); }

  static absl::StatusOr<TcpStream> Connect(const std::string& host,
                                           uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return Errno("socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      return absl::InvalidArgumentError("bad IPv4 address: " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      auto s = Errno("connect");
      ::close(fd);
      return s;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
  }

  absl::Status Send(const Frame& frame) override {
    auto bytes = Encode(frame);
    if (!bytes.ok()) return bytes.status();
    size_t off = 0;
    while (off < bytes->size()) {
      ssize_t n = ::send(fd_, bytes->data() + off, bytes->size() - off,
                         MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return absl::UnavailableError("connection reset on send");
      off += static_cast<size_t>(n);
    }
    return absl::OkStatus();
  }

  absl::StatusOr<Frame> Receive(Micros timeout) override {
    const Micros deadline = WallMicros() + timeout;
    Bytes header(kFrameHeaderSize);
    if (auto s = ReadExactly(header, deadline); !s.ok()) return s;
    auto h = DecodeHeader(header);
    if (!h.ok()) return h.status();
    if (h->payload_len > kMaxReceivePayload) {
      return absl::ResourceExhaustedError("frame payload too large");
    }
    Frame f{h->type, h->round_id, Bytes(h->payload_len)};
    if (auto s = ReadExactly(f.payload, deadline); !s.ok()) return s;
    return f;
  }

  void Close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  static absl::Status Errno(const char* what) {
    return absl::UnavailableError(std::string(what) + ": " +
                                  std::strerror(errno));
  }

  absl::Status ReadExactly(std::span<uint8_t> out, Micros deadline) {
    size_t off = 0;
    while (off < out.size()) {
      Micros left = deadline - WallMicros();
      if (left <= 0) return absl::DeadlineExceededError("receive timed out");
      pollfd p{fd_, POLLIN, 0};
      int r = ::poll(&p, 1, static_cast<int>((left + 999) / 1000));
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) return Errno("poll");
      if (r == 0) return absl::DeadlineExceededError("receive timed out");
      ssize_t n = ::recv(fd_, out.data() + off, out.size() - off, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return absl::UnavailableError("connection reset");
      off += static_cast<size_t>(n);
    }
    return absl::OkStatus();
  }

  int fd_ = -1;
};

class TcpListener {
 public:
  TcpListener(TcpListener&& other) noexcept
      : fd_(std::exchange(other.fd_, -1)), port_(other.port_) {}
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  // Binds 127.0.0.1:port; port 0 picks an ephemeral port.
  static absl::StatusOr<TcpListener> Bind(uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return absl::UnavailableError("socket failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd, 64) != 0) {
      std::string err = std::strerror(errno);
      ::close(fd);
      return absl::UnavailableError("bind/listen on port " +
                                    std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    return TcpListener(fd, ntohs(addr.sin_port));
  }

  uint16_t port() const { return port_; }

  absl::StatusOr<TcpStream> Accept(Micros timeout) {
    pollfd p{fd_, POLLIN, 0};
    int r = ::poll(&p, 1, static_cast<int>(timeout / 1000));
    if (r == 0) return absl::DeadlineExceededError("accept timed out");
    if (r < 0) return absl::UnavailableError("poll failed");
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) return absl::UnavailableError("accept failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
  }

 private:
  TcpListener(int fd, uint16_t port) : fd_(fd), port_(port) {}
  int fd_;
  uint16_t port_;
};

inline ChannelFactory TcpFactory(std::string host, uint16_t port) {
  return [host = std::move(host),
          port]() -> absl::StatusOr<std::unique_ptr<FrameChannel>> {
    auto s = TcpStream::Connect(host, port);
    if (!s.ok()) return s.status();
    return std::make_unique<TcpStream>(*std::move(s));
  };
}

// Serves AA requests until `stop` is set. Requests on one connection are
// handled in order; connections are handled one at a time, which makes every
// registry update atomic.
inline void ServeAuthority(TcpListener& listener, KeyAuthority& aa,
                           const std::atomic<bool>& stop) {
  while (!stop.load()) {
    auto conn = listener.Accept(100'000);
    if (!conn.ok()) continue;
    while (true) {
      auto req = conn->Receive(5'000'000);
      if (!req.ok()) break;
      if (!conn->Send(HandleAaRequest(aa, *req)).ok()) break;
    }
  }
}

// Aggregation server over TCP. Connections are accepted concurrently, each on
// its own thread; admission to the engine is serialized so at most one grant
// is in flight. A session that misses its deadline or drops is aborted and the
// slot re-offered.
class TcpAggregationServer {
 public:
  using ResultSink = std::function<void(const RoundResult&)>;
  using UploadSink = std::function<void(uint32_t slot, const Bytes& payload)>;

  TcpAggregationServer(ServerEngine& engine, QuantizerConfig cfg)
      : engine_(&engine), endpoint_(engine, cfg) {}

  void set_result_sink(ResultSink sink) { on_result_ = std::move(sink); }
  void set_upload_sink(UploadSink sink) { on_upload_ = std::move(sink); }

  // Runs until `rounds` rounds have completed or `idle_limit` passes with no
  // new connection.
  absl::Status Run(TcpListener& listener, uint64_t rounds,
                   Micros idle_limit = 60'000'000) {
    std::vector<std::thread> workers;
    Micros last_activity = WallMicros();
    while (CompletedRounds() < rounds) {
      auto conn = listener.Accept(50'000);
      if (!conn.ok()) {
        if (WallMicros() - last_activity > idle_limit) break;
        continue;
      }
      last_activity = WallMicros();
      workers.emplace_back(
          [this, c = std::make_shared<TcpStream>(*std::move(conn))] {
            Serve(*c);
          });
    }
    for (auto& w : workers) w.join();
    if (CompletedRounds() < rounds) {
      return absl::DeadlineExceededError("server idle before rounds finished");
    }
    return absl::OkStatus();
  }

  uint64_t CompletedRounds() {
    std::lock_guard<std::mutex> lock(mu_);
    return completed_;
  }

 private:
  void Serve(TcpStream& conn) {
    ServerEndpoint::Session session;
    auto first = conn.Receive(10'000'000);
    if (!first.ok() || first->type != MsgType::kConnect) return;

    Micros deadline = 0;
    {
      // Admission queue: wait until no grant is in flight.
      std::unique_lock<std::mutex> lock(mu_);
      idle_.wait(lock, [&] { return !engine_->state().pending; });
      auto reply = endpoint_.Handle(session, *first, WallMicros());
      for (const Frame& f : reply.frames) (void)conn.Send(f);
      if (!session.token) return;
      deadline = engine_->state().pending->deadline;
    }

    auto upload = conn.Receive(std::max<Micros>(0, deadline - WallMicros()));
    std::unique_lock<std::mutex> lock(mu_);
    if (!upload.ok() || upload->type != MsgType::kUpload) {
      // Timeout or reset: abort and re-offer the slot.
      engine_->Abort(*session.token);
      idle_.notify_all();
      return;
    }
    const uint32_t slot = engine_->state().pending->slot;
    auto reply = endpoint_.Handle(session, *upload, WallMicros());
    bool accepted = !reply.frames.empty() &&
                    reply.frames.front().type == MsgType::kModelPush;
    if (accepted && on_upload_) on_upload_(slot, upload->payload);
    if (reply.result) {
      ++completed_;
      if (on_result_) on_result_(*reply.result);
    }
    idle_.notify_all();
    lock.unlock();
    for (const Frame& f : reply.frames) (void)conn.Send(f);
  }

  ServerEngine* engine_;
  ServerEndpoint endpoint_;
  ResultSink on_result_;
  UploadSink on_upload_;
  std::mutex mu_;
  std::condition_variable idle_;
  uint64_t completed_ = 0;
};

}  // namespace basa

#endif  // BASA_TCP_H_
