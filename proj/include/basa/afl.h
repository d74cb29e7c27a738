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

// Asynchronous federated learning on top of the secure buffer, the plaintext
// buffered baseline, and a synchronous FedAvg baseline, on a seeded
// two-class synthetic task.

#ifndef BASA_AFL_H_
#define BASA_AFL_H_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iterator>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "absl/status/statusor.h"
#include "basa/field.h"
#include "basa/protocol.h"
#include "basa/random.h"

namespace basa {

// Staleness weighting S(tau). Polynomial: (1 + tau)^-exponent.
struct StalenessFn {
  enum class Family { kPolynomial, kConstant };
  Family family = Family::kPolynomial;
  double exponent = 0.5;

  double operator()(uint64_t tau) const {
    if (family == Family::kConstant) return 1.0;
    return std::pow(1.0 + static_cast<double>(tau), -exponent);
  }
  // Checked entry point for signed staleness values.
  double At(int64_t tau) const {
    if (tau < 0) throw std::invalid_argument("staleness must be non-negative");
    return (*this)(static_cast<uint64_t>(tau));
  }

  // "poly", "poly:<exponent>" or "constant".
  static absl::StatusOr<StalenessFn> Parse(std::string_view text) {
    if (text == "constant") return StalenessFn{Family::kConstant, 0};
    if (text == "poly") return StalenessFn{};
    if (text.starts_with("poly:")) {
      std::string num(text.substr(5));
      char* end = nullptr;
      double e = std::strtod(num.c_str(), &end);
      if (end != num.c_str() && *end == '\0' && std::isfinite(e) && e >= 0) {
        return StalenessFn{Family::kPolynomial, e};
      }
    }
    return absl::InvalidArgumentError("unknown staleness function '" +
                                      std::string(text) +
                                      "' (expected poly, poly:<e>, constant)");
  }
  std::string Name() const {
    if (family == Family::kConstant) return "constant";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "poly:%g", exponent);
    return buf;
  }
};

struct GlobalModel {
  std::vector<double> weights;
  uint64_t timestamp = 0;
};

// ---------------------------------------------------------------------------
// Data and local objective. A model of dimension d has d - 1 feature weights
// followed by a bias.

enum class Objective { kLogistic, kLeastSquares };

struct Dataset {
  size_t features = 0;
  std::vector<double> x;  // row-major, size() x features
  std::vector<double> y;  // {0, 1} for logistic, real for least squares

  size_t size() const { return y.size(); }
  std::span<const double> Row(size_t i) const {
    return std::span<const double>(x).subspan(i * features, features);
  }
};

inline double Margin(std::span<const double> w, std::span<const double> row) {
  double z = w[row.size()];
  for (size_t j = 0; j < row.size(); ++j) z += w[j] * row[j];
  return z;
}

namespace internal {

inline void CheckModel(std::span<const double> w, const Dataset& data) {
  if (w.size() != data.features + 1) {
    throw std::invalid_argument("model dimension does not match data");
  }
}

inline double Sigmoid(double z) {
  return z >= 0 ? 1 / (1 + std::exp(-z)) : std::exp(z) / (1 + std::exp(z));
}

// log(1 + e^z) without overflow.
inline double Softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double PointLoss(Objective obj, double z, double y) {
  if (obj == Objective::kLogistic) return Softplus(z) - y * z;
  return 0.5 * (z - y) * (z - y);
}

inline double PointSlope(Objective obj, double z, double y) {
  if (obj == Objective::kLogistic) return Sigmoid(z) - y;
  return z - y;
}

}  // namespace internal

// Mean loss over `indices`.
inline double Loss(Objective obj, std::span<const double> w,
                   const Dataset& data, std::span<const uint32_t> indices) {
  internal::CheckModel(w, data);
  if (indices.empty()) return 0;
  double sum = 0;
  for (uint32_t i : indices) {
    sum += internal::PointLoss(obj, Margin(w, data.Row(i)), data.y[i]);
  }
  return sum / static_cast<double>(indices.size());
}

// Mean gradient over `indices`.
inline std::vector<double> Gradient(Objective obj, std::span<const double> w,
                                    const Dataset& data,
                                    std::span<const uint32_t> indices) {
  internal::CheckModel(w, data);
  std::vector<double> g(w.size(), 0.0);
  if (indices.empty()) return g;
  for (uint32_t i : indices) {
    auto row = data.Row(i);
    const double s = internal::PointSlope(obj, Margin(w, row), data.y[i]);
    for (size_t j = 0; j < row.size(); ++j) g[j] += s * row[j];
    g[row.size()] += s;
  }
  for (double& v : g) v /= static_cast<double>(indices.size());
  return g;
}

struct Evaluation {
  double accuracy = 0;
  double loss = 0;
};

// Held-out accuracy and mean logistic loss on the whole dataset.
inline Evaluation Evaluate(std::span<const double> w, const Dataset& data) {
  internal::CheckModel(w, data);
  Evaluation e;
  if (data.size() == 0) return e;
  size_t correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const double z = Margin(w, data.Row(i));
    correct += (z > 0) == (data.y[i] > 0.5);
    e.loss += internal::PointLoss(Objective::kLogistic, z, data.y[i]);
  }
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  e.loss /= static_cast<double>(data.size());
  return e;
}

struct TaskConfig {
  uint32_t users = 32;
  size_t dim = 32;  // model dimension, features + bias
  uint32_t samples_per_user = 60;
  uint32_t test_size = 2000;
  // Distance between the two class means in units of the noise deviation.
  double separation = 4.0;
  // Extra noise deviation along one direction at 45 degrees to the class
  // axis. The mean difference then points away from the best separator and
  // training has to correct for the correlated noise.
  double noise_spike = 4.0;
  double dirichlet_alpha = 0.5;
  uint64_t seed = 1;
};

struct SyntheticTask {
  Dataset train;
  Dataset test;
  std::vector<std::vector<uint32_t>> shards;  // train indices per user
  Objective objective = Objective::kLogistic;
};

// Label-skewed partition: for each class, user proportions are drawn from
// Dirichlet(alpha). Every user ends up with at least one sample.
template <typename Urbg>
std::vector<std::vector<uint32_t>> DirichletPartition(
    std::span<const double> labels, uint32_t users, double alpha, Urbg& rng) {
  if (users == 0 || !(alpha > 0)) {
    throw std::invalid_argument("partition needs users > 0 and alpha > 0");
  }
  if (labels.size() < users) {
    throw std::invalid_argument("fewer samples than users");
  }
  std::vector<std::vector<uint32_t>> shards(users);
  for (double cls : {0.0, 1.0}) {
    std::vector<uint32_t> idx;
    for (uint32_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(users);
    for (double& v : p) v = gamma(rng);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    double cum = 0;
    size_t begin = 0;
    for (uint32_t u = 0; u < users; ++u) {
      cum += p[u] / total;
      size_t end = u + 1 == users
                       ? idx.size()
                       : std::min(idx.size(), static_cast<size_t>(std::llround(
                                                  cum * idx.size())));
      end = std::max(end, begin);
      shards[u].insert(shards[u].end(), idx.begin() + begin, idx.begin() + end);
      begin = end;
    }
  }
  for (auto& shard : shards) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(
        shards.begin(), shards.end(),
        [](const auto& a, const auto& b) { return a.size() < b.size(); });
    shard.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& shard : shards) std::sort(shard.begin(), shard.end());
  return shards;
}

// Two Gaussian classes with means +-mu, |2 mu| = separation, unit noise plus
// the correlated spike.
inline SyntheticTask MakeSyntheticTask(const TaskConfig& cfg) {
  if (cfg.dim < 2) throw std::invalid_argument("model dimension must be >= 2");
  if (cfg.users == 0 || cfg.samples_per_user == 0) {
    throw std::invalid_argument("task needs users and samples");
  }
  std::mt19937_64 rng = StreamRng(cfg.seed, 0x7a5c);
  const size_t f = cfg.dim - 1;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> mu(f);
  for (double& v : mu) v = normal(rng);
  const double norm = std::sqrt(
      std::inner_product(mu.begin(), mu.end(), mu.begin(), 0.0));
  for (double& v : mu) v *= 0.5 * cfg.separation / norm;
  // Spike direction (u + e) / sqrt(2), e a random unit vector orthogonal to u.
  std::vector<double> spike(f, 0.0);
  if (f >= 2) {
    std::vector<double> e(f);
    for (double& v : e) v = normal(rng);
    double dot = 0, uu = 0;
    for (size_t j = 0; j < f; ++j) {
      dot += e[j] * mu[j];
      uu += mu[j] * mu[j];
    }
    for (size_t j = 0; j < f; ++j) e[j] -= dot / uu * mu[j];
    const double en = std::sqrt(
        std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
    const double un = std::sqrt(uu);
    for (size_t j = 0; j < f; ++j) {
      spike[j] = (mu[j] / un + e[j] / en) / std::sqrt(2.0);
    }
  }

  auto sample = [&](size_t n) {
    Dataset d;
    d.features = f;
    d.x.reserve(n * f);
    d.y.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      const double label = i % 2 == 0 ? 1.0 : 0.0;
      const double sign = label > 0 ? 1.0 : -1.0;
      const double g = cfg.noise_spike * normal(rng);
      for (size_t j = 0; j < f; ++j) {
        d.x.push_back(sign * mu[j] + g * spike[j] + normal(rng));
      }
      d.y.push_back(label);
    }
    return d;
  };
  SyntheticTask task;
  task.train = sample(size_t{cfg.users} * cfg.samples_per_user);
  task.test = sample(cfg.test_size);
  task.shards = DirichletPartition(std::span<const double>(task.train.y),
                                   cfg.users, cfg.dirichlet_alpha, rng);
  return task;
}

// ---------------------------------------------------------------------------
// Client and server steps.

struct LocalTrainConfig {
  double lr = 0.02;
  uint32_t steps = 5;
  uint32_t batch = 16;  // 0 = full shard per step
};

struct ClientTask {
  uint32_t user = 0;
  const Dataset* data = nullptr;
  std::span<const uint32_t> shard;
  LocalTrainConfig train;
  Objective objective = Objective::kLogistic;
  uint64_t tau = 0;  // timestamp of the pulled model
};

// SGD on the shard starting from `w`; returns w - w_after so the server can
// apply w <- w - eta * mean. Mini-batches walk a seeded reshuffle of the
// shard.
template <typename Urbg>
std::vector<double> LocalTrain(const ClientTask& task,
                               std::span<const double> w, Urbg& rng) {
  if (task.data == nullptr || task.shard.empty()) {
    throw std::invalid_argument("local training needs a non-empty shard");
  }
  std::vector<double> cur(w.begin(), w.end());
  const size_t n = task.shard.size();
  const bool full = task.train.batch == 0 || task.train.batch >= n;
  std::vector<uint32_t> order(task.shard.begin(), task.shard.end());
  size_t pos = n;
  std::vector<uint32_t> batch;
  for (uint32_t step = 0; step < task.train.steps; ++step) {
    std::span<const uint32_t> idx = task.shard;
    if (!full) {
      batch.clear();
      while (batch.size() < task.train.batch) {
        if (pos == n) {
          std::shuffle(order.begin(), order.end(), rng);
          pos = 0;
        }
        batch.push_back(order[pos++]);
      }
      idx = batch;
    }
    auto g = Gradient(task.objective, cur, *task.data, idx);
    for (size_t j = 0; j < cur.size(); ++j) cur[j] -= task.train.lr * g[j];
  }
  for (size_t j = 0; j < cur.size(); ++j) cur[j] = w[j] - cur[j];
  return cur;
}

inline GlobalModel ApplyUpdate(const GlobalModel& model,
                               std::span<const double> mean_delta,
                               double eta) {
  if (mean_delta.size() != model.weights.size()) {
    throw std::invalid_argument("update dimension does not match model");
  }
  GlobalModel next{model.weights, model.timestamp + 1};
  for (size_t j = 0; j < next.weights.size(); ++j) {
    next.weights[j] -= eta * mean_delta[j];
  }
  return next;
}

// w <- w - eta * unmask(result); the divisor is the staleness total, which is
// K when every alpha is 1.
inline GlobalModel ServerStep(const GlobalModel& model,
                              const RoundResult& result,
                              const QuantizerConfig& cfg, double eta) {
  if (result.round_id != model.timestamp) {
    throw std::logic_error("round result " + std::to_string(result.round_id) +
                           " applied to model at timestamp " +
                           std::to_string(model.timestamp));
  }
  return ApplyUpdate(model, UnmaskAggregate(result, cfg), eta);
}

// sum_k w_k x_k / sum_k w_k in the reals.
inline std::vector<double> WeightedMean(
    std::span<const std::vector<double>> updates,
    std::span<const double> weights) {
  if (updates.empty() || updates.size() != weights.size()) {
    throw std::invalid_argument("weighted mean needs matching inputs");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0)) throw std::invalid_argument("weights must sum above zero");
  std::vector<double> out(updates[0].size(), 0.0);
  for (size_t k = 0; k < updates.size(); ++k) {
    if (updates[k].size() != out.size()) {
      throw std::invalid_argument("update dimensions differ");
    }
    for (size_t j = 0; j < out.size(); ++j) out[j] += weights[k] * updates[k][j];
  }
  for (double& v : out) v /= total;
  return out;
}

// ---------------------------------------------------------------------------
// Timing and metrics shared by every training mode.

// Rounds a non-negative duration up to whole microseconds. Positive
// durations take at least 1 us; zero stays zero.
inline Micros ToMicros(double seconds) {
  if (!(seconds >= 0) || !std::isfinite(seconds)) {
    throw std::invalid_argument("duration must be finite and non-negative");
  }
  if (seconds == 0) return 0;
  return std::max<Micros>(1, static_cast<Micros>(std::ceil(seconds * 1e6)));
}

// Per-training delay: base time plus Exp(beta) straggling; beta = 0 means no
// straggling.
struct DelayModel {
  double beta = 0;
  double base_train_time_s = 1.0;

  template <typename Urbg>
  Micros Sample(Urbg& rng) const {
    double extra = 0;
    if (beta > 0) extra = std::exponential_distribution<double>(1.0 / beta)(rng);
    return ToMicros(base_train_time_s + extra);
  }
};

struct MetricsRow {
  double simulated_time_s = 0;
  uint64_t round = 0;
  std::string mode;
  double accuracy = 0;
  double loss = 0;
  uint64_t buffer_commits = 0;  // updates accepted so far
};

inline constexpr std::string_view kMetricsCsvHeader =
    "simulated_time_s,round,mode,accuracy,loss,buffer_commits";

inline void WriteMetricsCsv(std::ostream& out,
                            std::span<const MetricsRow> rows) {
  out << kMetricsCsvHeader << '\n';
  char buf[160];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f,%llu,%s,%.6f,%.6f,%llu\n",
                  r.simulated_time_s, static_cast<unsigned long long>(r.round),
                  r.mode.c_str(), r.accuracy, r.loss,
                  static_cast<unsigned long long>(r.buffer_commits));
    out << buf;
  }
}

struct TrainingRun {
  std::vector<MetricsRow> rows;
  std::optional<double> time_to_target_s;
  bool censored = false;
  uint64_t rounds = 0;
  GlobalModel model;
  std::vector<std::vector<double>> weight_history;  // after each round
  std::vector<Micros> round_durations;
};

// ---------------------------------------------------------------------------
// Synchronous FedAvg with a barrier: each round a uniformly drawn cohort
// trains from the current model, the round lasts as long as the slowest
// member plus a fixed aggregation overhead, and updates are averaged with
// shard-size weights.

struct SyncConfig {
  uint32_t cohort = 32;
  DelayModel delay;
  double sa_overhead_s = 0;
  double eta = 1.0;
  LocalTrainConfig train;
  double target_accuracy = 0.9;
  double max_time_s = 1e9;
  uint64_t max_rounds = 0;  // 0 = no limit
  bool record_weights = false;
  uint64_t seed = 1;
};

template <typename OnRound = std::nullptr_t>
TrainingRun RunSyncBaseline(const SyncConfig& cfg, const SyntheticTask& task,
                            OnRound on_round = nullptr) {
  const uint32_t users = static_cast<uint32_t>(task.shards.size());
  if (cfg.cohort == 0 || cfg.cohort > users) {
    throw std::invalid_argument("cohort size must be in [1, users]");
  }
  std::mt19937_64 cohort_rng = StreamRng(cfg.seed, 11);
  std::vector<std::mt19937_64> train_rng, delay_rng;
  for (uint32_t u = 0; u < users; ++u) {
    train_rng.push_back(StreamRng(cfg.seed, 12, u));
    delay_rng.push_back(StreamRng(cfg.seed, 13, u));
  }
  TrainingRun run;
  run.model.weights.assign(task.train.features + 1, 0.0);
  Micros now = 0;
  const Micros overhead = ToMicros(cfg.sa_overhead_s);
  const Micros limit = ToMicros(cfg.max_time_s);
  uint64_t commits = 0;
  auto record = [&] {
    Evaluation e = Evaluate(run.model.weights, task.test);
    run.rows.push_back({static_cast<double>(now) / 1e6, run.model.timestamp,
                        "sync-fedavg", e.accuracy, e.loss, commits});
    return e.accuracy;
  };
  if (record() >= cfg.target_accuracy) run.time_to_target_s = 0;

  std::vector<uint32_t> all(users);
  std::iota(all.begin(), all.end(), 0);
  while (!run.time_to_target_s) {
    if (cfg.max_rounds && run.rounds >= cfg.max_rounds) break;
    std::vector<uint32_t> cohort;
    std::sample(all.begin(), all.end(), std::back_inserter(cohort), cfg.cohort,
                cohort_rng);
    std::vector<std::vector<double>> updates;
    std::vector<double> weights;
    Micros slowest = 0;
    for (uint32_t u : cohort) {
      ClientTask t{.user = u,
                   .data = &task.train,
                   .shard = task.shards[u],
                   .train = cfg.train,
                   .objective = task.objective,
                   .tau = run.model.timestamp};
      updates.push_back(LocalTrain(t, run.model.weights, train_rng[u]));
      weights.push_back(static_cast<double>(task.shards[u].size()));
      const Micros d = cfg.delay.Sample(delay_rng[u]);
      slowest = std::max(slowest, d);
      if constexpr (!std::is_same_v<OnRound, std::nullptr_t>) {
        on_round(now + d, u, run.model.timestamp, false);
      }
    }
    const Micros duration = slowest + overhead;
    if (now + duration > limit) break;
    now += duration;
    run.round_durations.push_back(duration);
    run.model = ApplyUpdate(run.model, WeightedMean(updates, weights), cfg.eta);
    commits += cohort.size();
    ++run.rounds;
    if (cfg.record_weights) run.weight_history.push_back(run.model.weights);
    if constexpr (!std::is_same_v<OnRound, std::nullptr_t>) {
      on_round(now, 0, run.model.timestamp - 1, true);
    }
    if (record() >= cfg.target_accuracy) {
      run.time_to_target_s = static_cast<double>(now) / 1e6;
    }
  }
  run.censored = !run.time_to_target_s;
  return run;
}

}  // namespace basa

#endif  // BASA_AFL_H_
