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

// Discrete-event simulator: concurrent users with exponential straggler
// delays, serial admission to the secure buffer, and a cost model for the
// protocol's compute and transfer time. Single-threaded and deterministic in
// the seed.

#ifndef BASA_SIMHARNESS_H_
#define BASA_SIMHARNESS_H_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "absl/status/status.h"
#include "basa/afl.h"
#include "basa/field.h"
#include "basa/prg.h"
#include "basa/protocol.h"
#include "basa/seedvault.h"
#include "basa/transport.h"

namespace basa {

enum class SimMode { kBasa, kNoSa, kSync };

inline std::string_view ModeName(SimMode m) {
  switch (m) {
    case SimMode::kBasa:
      return "basa-afl";
    case SimMode::kNoSa:
      return "nosa-afl";
    case SimMode::kSync:
      return "sync-fedavg";
  }
  return "?";
}

// Simulated durations of protocol work. Defaults are fixed so runs are
// reproducible across hosts; Calibrate() measures the compute terms on this
// machine instead.
struct CostModel {
  double prg_per_element_s = 5e-9;
  double cipher_op_s = 1e-4;
  double upload_per_byte_s = 1e-7;
  double download_per_byte_s = 5e-8;

  static CostModel Zero() { return {0, 0, 0, 0}; }

  bool IsValid() const {
    for (double v : {prg_per_element_s, cipher_op_s, upload_per_byte_s,
                     download_per_byte_s}) {
      if (!(v >= 0) || !std::isfinite(v)) return false;
    }
    return true;
  }

  // Times PRG expansion and one encrypt + decrypt pair with the real
  // implementation. Transfer rates are kept from `base`.
  static CostModel Calibrate(const CostModel& base, size_t dim = 100000,
                             int cipher_reps = 200) {
    using Clock = std::chrono::steady_clock;
    std::mt19937_64 rng(0xca11b);
    CostModel out = base;
    Seed seed = Seed::Generate(rng);
    auto t0 = Clock::now();
    FieldVector v = Expand(seed, dim, kDefaultModulus);
    auto t1 = Clock::now();
    if (v.dim() != dim) throw std::logic_error("calibration expansion failed");
    out.prg_per_element_s =
        std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(dim);

    auto [pp, mk] = Setup(rng);
    AttributeSecretKey sk = KeyGen(mk, {0, 1});
    AttributePublicKey pk = PublicKeyOf(sk);
    t0 = Clock::now();
    for (int i = 0; i < cipher_reps; ++i) {
      SealedSeed ct = Encrypt(pp, seed, pk, 0, rng);
      if (!Decrypt(pp, ct, sk).ok()) {
        throw std::logic_error("calibration round trip failed");
      }
    }
    t1 = Clock::now();
    // One ciphertext operation is one side of the pair.
    out.cipher_op_s = std::chrono::duration<double>(t1 - t0).count() /
                      (2.0 * cipher_reps);
    return out;
  }
};

inline constexpr size_t kSealedSeedWireSize = 8 + 4 + 4 + 12 + 4 + 80;

// Frame sizes as carried by the transport for slot `slot` of K.
inline size_t SlotGrantFrameBytes(uint32_t k, uint32_t slot) {
  return kFrameHeaderSize + (8 + 4 + size_t{k} * (4 + 32)) + 4 + 4 +
         size_t{slot} * kSealedSeedWireSize + 8 + 16 + 8;
}
inline size_t UploadFrameBytes(uint32_t k, uint32_t slot, size_t dim) {
  return kFrameHeaderSize + 8 + 4 + 4 * dim + 4 +
         size_t{k - slot - 1} * kSealedSeedWireSize;
}

struct SlotCost {
  double compute_s = 0;   // K-1 ciphertext operations and PRG expansions
  double download_s = 0;  // slot grant
  double upload_s = 0;    // masked update and outgoing ciphertexts
  double total() const { return compute_s + download_s + upload_s; }
};

// Protocol time of the user in slot `slot`: it opens `slot` incoming seeds
// and seals K - slot - 1 outgoing ones, expanding each to d elements.
inline SlotCost SlotProtocolCost(uint32_t k, uint32_t slot, size_t dim,
                                 const CostModel& cost) {
  if (k == 0 || slot >= k) throw std::invalid_argument("slot outside buffer");
  SlotCost c;
  const double pairs = k - 1.0;
  c.compute_s = pairs * (cost.cipher_op_s +
                         static_cast<double>(dim) * cost.prg_per_element_s);
  c.download_s = static_cast<double>(SlotGrantFrameBytes(k, slot)) *
                 cost.download_per_byte_s;
  c.upload_s = static_cast<double>(UploadFrameBytes(k, slot, dim)) *
               cost.upload_per_byte_s;
  return c;
}

// Mean protocol time of one user execution over the K slots. The total user
// count does not enter: a user only ever talks to the server and the AA.
inline double MeasureUserProtocolCost(uint32_t k, size_t dim,
                                      [[maybe_unused]] uint32_t users,
                                      const CostModel& cost) {
  double sum = 0;
  for (uint32_t s = 0; s < k; ++s) sum += SlotProtocolCost(k, s, dim, cost).total();
  return sum / k;
}

// Serial protocol time to fill one buffer of K.
inline double AggregateRoundCost(uint32_t k, size_t dim, const CostModel& cost) {
  double sum = 0;
  for (uint32_t s = 0; s < k; ++s) sum += SlotProtocolCost(k, s, dim, cost).total();
  return sum;
}

// ---------------------------------------------------------------------------

enum class EventKind {
  kTrainDone,
  kConnectAdmitted,
  kUploadComplete,
  kTimeout,
  kRoundCommit,
};

inline std::string_view EventName(EventKind k) {
  switch (k) {
    case EventKind::kTrainDone:
      return "train-done";
    case EventKind::kConnectAdmitted:
      return "connect-admitted";
    case EventKind::kUploadComplete:
      return "upload-complete";
    case EventKind::kTimeout:
      return "timeout";
    case EventKind::kRoundCommit:
      return "round-commit";
  }
  return "?";
}

struct TraceEvent {
  Micros time = 0;
  EventKind kind = EventKind::kTrainDone;
  uint32_t user = 0;
  uint64_t round = 0;
  int64_t slot = -1;  // -1 when not applicable

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

inline void WriteTraceJsonl(std::ostream& out,
                            std::span<const TraceEvent> trace) {
  for (const TraceEvent& e : trace) {
    out << "{\"t_us\":" << e.time << ",\"kind\":\"" << EventName(e.kind)
        << "\",\"user\":" << e.user << ",\"round\":" << e.round
        << ",\"slot\":" << e.slot << "}\n";
  }
}

struct SimConfig {
  SimMode mode = SimMode::kBasa;
  uint32_t users = 32;
  uint32_t concurrency = 32;  // users training at once; cohort size for sync
  uint32_t buffer = 10;
  DelayModel delay;
  CostModel cost;
  QuantizerConfig quantizer;
  double eta = 1.0;
  LocalTrainConfig train;
  StalenessFn staleness;
  double timeout_s = 30;
  double drop_probability = 0;
  double target_accuracy = 0.9;
  double max_time_s = 36000;
  uint64_t max_rounds = 0;  // 0 = until target or time limit
  double sa_overhead_s = 0;  // sync only
  bool record_weights = false;
  uint64_t seed = 1;

  absl::Status Validate() const {
    auto bad = [](const std::string& m) { return absl::InvalidArgumentError(m); };
    if (users == 0) return bad("users must be positive");
    if (concurrency == 0 || concurrency > users) {
      return bad("concurrency must be in [1, users]");
    }
    if (buffer == 0 || buffer > users) return bad("buffer must be in [1, users]");
    if (!(delay.beta >= 0) || !std::isfinite(delay.beta)) {
      return bad("beta must be non-negative");
    }
    if (!(delay.base_train_time_s >= 0)) return bad("base train time must be >= 0");
    if (!cost.IsValid()) return bad("cost model durations must be >= 0");
    if (!quantizer.IsValid()) return bad("quantizer needs scale*clip < q/2");
    if (!(eta > 0)) return bad("eta must be positive");
    if (!(train.lr >= 0)) return bad("local lr must be non-negative");
    if (!(timeout_s > 0)) return bad("timeout must be positive");
    if (!(drop_probability >= 0 && drop_probability < 1)) {
      return bad("drop probability must be in [0, 1)");
    }
    if (!(target_accuracy > 0)) return bad("target accuracy must be positive");
    if (!(max_time_s > 0)) return bad("max time must be positive");
    if (!(sa_overhead_s >= 0)) return bad("sa overhead must be >= 0");
    return absl::OkStatus();
  }
};

struct SimResult {
  TrainingRun run;
  std::vector<TraceEvent> trace;
  uint64_t uploads = 0;
  uint64_t timeouts = 0;
  uint64_t trainings = 0;
  // Staleness factor of every accepted update and the (round, tau) it was
  // computed from, in acceptance order.
  struct Contribution {
    uint32_t user;
    uint64_t round;
    uint64_t tau;
    double alpha;
  };
  std::vector<Contribution> contributions;
};

namespace internal {

// Event-driven run of the asynchronous modes.
class AsyncSimulation {
 public:
  AsyncSimulation(const SimConfig& cfg, const SyntheticTask& task)
      : cfg_(cfg),
        task_(task),
        dim_(task.train.features + 1),
        aa_rng_(StreamRng(cfg.seed, 21)),
        token_rng_(StreamRng(cfg.seed, 22)),
        drop_rng_(StreamRng(cfg.seed, 15)),
        aa_(AttributeAuthority::Create(aa_rng_, "loopback")) {
    if (task.shards.size() != cfg.users) {
      throw std::invalid_argument("task has a different number of users");
    }
    for (uint32_t u = 0; u < cfg.users; ++u) {
      train_rng_.push_back(StreamRng(cfg.seed, 12, u));
      delay_rng_.push_back(StreamRng(cfg.seed, 13, u));
      proto_rng_.push_back(StreamRng(cfg.seed, 14, u));
    }
    users_.resize(cfg.users);
    if (cfg.mode == SimMode::kBasa) {
      auto engine = ServerEngine::Create(
          {.buffer_size = cfg.buffer,
           .dim = dim_,
           .modulus = cfg.quantizer.modulus,
           .timeout = ToMicros(cfg.timeout_s)},
          aa_, [this] { return GrantToken::Generate(token_rng_); });
      if (!engine.ok()) throw std::runtime_error(engine.status().ToString());
      engine_.emplace(*std::move(engine));
      endpoint_.emplace(*engine_, cfg.quantizer);
    }
  }

  SimResult Run() {
    result_.run.model.weights.assign(dim_, 0.0);
    limit_ = ToMicros(cfg_.max_time_s);
    Record(0);
    if (done_) return Finish();
    for (uint32_t u = 0; u < cfg_.users; ++u) {
      if (u < cfg_.concurrency) {
        StartTraining(u, 0);
      } else {
        idle_.push_back(u);
      }
    }
    while (!queue_.empty() && !done_) {
      Event e = queue_.top();
      queue_.pop();
      if (e.time > limit_) break;
      switch (e.kind) {
        case kUpload:
          OnUpload(e.user, e.time);
          break;
        case kTimeoutEvent:
          OnTimeout(e.user, e.time);
          break;
        case kTrainDoneEvent:
          OnTrainDone(e.user, e.time);
          break;
      }
    }
    return Finish();
  }

 private:
  // Tie-break priority at equal times.
  enum Kind : int { kUpload = 0, kTimeoutEvent = 1, kTrainDoneEvent = 2 };
  struct Event {
    Micros time;
    int kind;
    uint32_t user;
    uint64_t seq;
    bool operator>(const Event& o) const {
      return std::tie(time, kind, user, seq) >
             std::tie(o.time, o.kind, o.user, o.seq);
    }
  };
  struct User {
    std::vector<double> delta;
    uint64_t tau = 0;
    ServerEndpoint::Session session;
  };
  static constexpr EndpointId kServer = 0;
  static EndpointId Id(uint32_t user) { return user + 1; }

  void Push(Micros t, Kind k, uint32_t user) {
    queue_.push(Event{t, k, user, seq_++});
  }
  void Trace(Micros t, EventKind k, uint32_t user, int64_t slot = -1) {
    result_.trace.push_back(
        {t, k, user, result_.run.model.timestamp, slot});
  }

  SimResult Finish() {
    result_.run.censored = !result_.run.time_to_target_s;
    return std::move(result_);
  }

  void Record(Micros now) {
    Evaluation e = Evaluate(result_.run.model.weights, task_.test);
    result_.run.rows.push_back({static_cast<double>(now) / 1e6,
                                result_.run.model.timestamp,
                                std::string(ModeName(cfg_.mode)), e.accuracy,
                                e.loss, result_.uploads});
    if (e.accuracy >= cfg_.target_accuracy) {
      result_.run.time_to_target_s = static_cast<double>(now) / 1e6;
      done_ = true;
    }
    if (cfg_.max_rounds && result_.run.rounds >= cfg_.max_rounds) done_ = true;
  }

  void StartTraining(uint32_t u, Micros now) {
    User& user = users_[u];
    user.tau = result_.run.model.timestamp;
    ClientTask t{.user = u,
                 .data = &task_.train,
                 .shard = task_.shards[u],
                 .train = cfg_.train,
                 .objective = task_.objective,
                 .tau = user.tau};
    user.delta = LocalTrain(t, result_.run.model.weights, train_rng_[u]);
    ++result_.trainings;
    Push(now + cfg_.delay.Sample(delay_rng_[u]), kTrainDoneEvent, u);
  }

  // The finishing user rejoins the idle pool and the longest-idle user
  // starts; with concurrency == users that is the same user.
  void Restart(uint32_t u, Micros now) {
    idle_.push_back(u);
    uint32_t next = idle_.front();
    idle_.pop_front();
    StartTraining(next, now);
  }

  void OnTrainDone(uint32_t u, Micros now) {
    Trace(now, EventKind::kTrainDone, u);
    if (cfg_.mode == SimMode::kBasa) {
      waiting_.push_back(u);
      TryAdmit(now);
      return;
    }
    Trace(now, EventKind::kConnectAdmitted, u);
    if (Dropped()) {
      pending_timeouts_[u] = true;
      Push(now + ToMicros(cfg_.timeout_s), kTimeoutEvent, u);
      return;
    }
    const size_t bytes = kFrameHeaderSize + 8 + 4 + 8 * dim_;
    Push(now + ToMicros(static_cast<double>(bytes) * cfg_.cost.upload_per_byte_s),
         kUpload, u);
  }

  bool Dropped() {
    return std::bernoulli_distribution(cfg_.drop_probability)(drop_rng_);
  }

  void TryAdmit(Micros now) {
    while (!engine_->state().pending && !waiting_.empty()) {
      uint32_t u = waiting_.front();
      waiting_.pop_front();
      Admit(u, now);
    }
  }

  void Admit(uint32_t u, Micros now) {
    User& user = users_[u];
    auto reply = endpoint_->Handle(user.session, Frame{MsgType::kConnect, 0, {}},
                                   now);
    if (reply.frames.size() != 1 ||
        reply.frames[0].type != MsgType::kSlotGrant) {
      throw std::logic_error("simulator: server refused an admitted user");
    }
    const uint32_t slot = engine_->state().pending->slot;
    Trace(now, EventKind::kConnectAdmitted, u, slot);
    const SlotCost cost =
        SlotProtocolCost(cfg_.buffer, slot, dim_, cfg_.cost);
    auto arrival = net_.Deliver(kServer, Id(u), reply.frames[0], now,
                                ToMicros(cost.download_s));
    auto delivered = net_.Receive(kServer, Id(u), *arrival);
    auto grant = DecodeSlotGrant(delivered->frame.payload);
    if (!grant.ok()) throw std::logic_error(grant.status().ToString());

    auto outcome = RunUser(UserInput{user.delta, user.tau}, *grant, aa_,
                           cfg_.quantizer, cfg_.staleness, proto_rng_[u]);
    if (!outcome.ok()) throw std::logic_error(outcome.status().ToString());
    Frame upload{MsgType::kUpload, grant->round_id,
                 EncodeUpload(outcome->upload)};
    const Micros send = *arrival + ToMicros(cost.compute_s);
    const Micros done = send + ToMicros(cost.upload_s);
    if (Dropped() || done > grant->deadline) {
      // Never uploads; the server gives up at the deadline.
      Push(grant->deadline, kTimeoutEvent, u);
      pending_timeouts_[u] = true;
      return;
    }
    auto up_arrival =
        net_.Deliver(Id(u), kServer, upload, send, ToMicros(cost.upload_s));
    pending_alpha_[u] = {grant->round_id, outcome->upload.staleness};
    Push(*up_arrival, kUpload, u);
  }

  void OnUpload(uint32_t u, Micros now) {
    User& user = users_[u];
    if (cfg_.mode == SimMode::kBasa) {
      auto delivered = net_.Receive(Id(u), kServer, now);
      if (!delivered) throw std::logic_error("simulator: upload not delivered");
      const uint32_t slot = engine_->state().pending->slot;
      auto reply = endpoint_->Handle(user.session, delivered->frame, now);
      if (reply.frames.empty() ||
          reply.frames[0].type != MsgType::kModelPush) {
        throw std::logic_error("simulator: upload rejected");
      }
      ++result_.uploads;
      auto [round, alpha] = pending_alpha_[u];
      result_.contributions.push_back({u, round, user.tau, alpha});
      Trace(now, EventKind::kUploadComplete, u, slot);
      if (reply.result) {
        Commit(ServerStep(result_.run.model, *reply.result, cfg_.quantizer,
                          cfg_.eta),
               now);
      }
    } else {
      const uint64_t t = result_.run.model.timestamp;
      const double alpha = cfg_.staleness(t - user.tau);
      ++result_.uploads;
      result_.contributions.push_back({u, t, user.tau, alpha});
      Trace(now, EventKind::kUploadComplete, u,
            static_cast<int64_t>(plain_updates_.size()));
      std::vector<double> scaled = user.delta;
      plain_updates_.push_back(std::move(scaled));
      plain_alphas_.push_back(alpha);
      if (plain_updates_.size() == cfg_.buffer) {
        auto mean = WeightedMean(plain_updates_, plain_alphas_);
        plain_updates_.clear();
        plain_alphas_.clear();
        Commit(ApplyUpdate(result_.run.model, mean, cfg_.eta), now);
      }
    }
    if (done_) return;
    Restart(u, now);
    if (cfg_.mode == SimMode::kBasa) TryAdmit(now);
  }

  void OnTimeout(uint32_t u, Micros now) {
    pending_timeouts_.erase(u);
    if (cfg_.mode == SimMode::kBasa) {
      if (!engine_->OnTimeout(now)) {
        throw std::logic_error("simulator: timeout without a pending grant");
      }
      users_[u].session = {};
    }
    ++result_.timeouts;
    Trace(now, EventKind::kTimeout, u);
    Restart(u, now);
    if (cfg_.mode == SimMode::kBasa) TryAdmit(now);
  }

  void Commit(GlobalModel next, Micros now) {
    Trace(now, EventKind::kRoundCommit, 0);
    result_.run.model = std::move(next);
    ++result_.run.rounds;
    result_.run.round_durations.push_back(now - last_commit_);
    last_commit_ = now;
    if (cfg_.record_weights) {
      result_.run.weight_history.push_back(result_.run.model.weights);
    }
    Record(now);
  }

  const SimConfig& cfg_;
  const SyntheticTask& task_;
  const size_t dim_;
  std::mt19937_64 aa_rng_;
  std::mt19937_64 token_rng_;
  std::mt19937_64 drop_rng_;
  std::vector<std::mt19937_64> train_rng_, delay_rng_, proto_rng_;
  AttributeAuthority aa_;
  std::optional<ServerEngine> engine_;
  std::optional<ServerEndpoint> endpoint_;
  LoopbackNetwork net_;
  std::vector<User> users_;
  std::deque<uint32_t> idle_;
  std::deque<uint32_t> waiting_;
  std::map<uint32_t, std::pair<uint64_t, double>> pending_alpha_;
  std::map<uint32_t, bool> pending_timeouts_;
  std::vector<std::vector<double>> plain_updates_;
  std::vector<double> plain_alphas_;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
  uint64_t seq_ = 0;
  Micros limit_ = 0;
  Micros last_commit_ = 0;
  bool done_ = false;
  SimResult result_;
};

}  // namespace internal

// Runs one training mode to the target accuracy, the time limit, or the
// round limit. A run that stops before the target is reported as censored.
inline SimResult RunSimulation(const SimConfig& cfg, const SyntheticTask& task) {
  if (auto s = cfg.Validate(); !s.ok()) {
    throw std::invalid_argument(std::string(s.message()));
  }
  if (cfg.mode != SimMode::kSync) {
    return internal::AsyncSimulation(cfg, task).Run();
  }
  SyncConfig sc{.cohort = cfg.concurrency,
                .delay = cfg.delay,
                .sa_overhead_s = cfg.sa_overhead_s,
                .eta = cfg.eta,
                .train = cfg.train,
                .target_accuracy = cfg.target_accuracy,
                .max_time_s = cfg.max_time_s,
                .max_rounds = cfg.max_rounds,
                .record_weights = cfg.record_weights,
                .seed = cfg.seed};
  SimResult out;
  std::vector<TraceEvent> round_events;
  out.run = RunSyncBaseline(
      sc, task, [&](Micros t, uint32_t user, uint64_t round, bool commit) {
        if (!commit) {
          round_events.push_back({t, EventKind::kTrainDone, user, round, -1});
          ++out.trainings;
          return;
        }
        std::stable_sort(round_events.begin(), round_events.end(),
                         [](const TraceEvent& a, const TraceEvent& b) {
                           return std::tie(a.time, a.user) < std::tie(b.time, b.user);
                         });
        for (const TraceEvent& e : round_events) {
          out.trace.push_back(e);
          out.trace.push_back({e.time, EventKind::kUploadComplete, e.user, round, -1});
        }
        out.uploads += round_events.size();
        round_events.clear();
        out.trace.push_back({t, EventKind::kRoundCommit, 0, round, -1});
      });
  return out;
}

}  // namespace basa

#endif  // BASA_SIMHARNESS_H_
