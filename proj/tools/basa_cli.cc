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

// Command-line driver: training simulations, the per-user cost sweep, and a
// live multi-process round over localhost TCP.
//
//   basa_cli run --mode basa-afl --users 32 --buffer 10 --beta 6 --seed 1
//   basa_cli run --mode bench-user-cost --buffer 10..1000 --dim 100000
//   basa_cli run --mode demo-tcp --users 3 --buffer 3 --dim 100
//
// Every flag of `run` may also be given in a flat `key = value` file passed
// with --config; flags on the command line win. BASA_LOG_LEVEL sets stderr
// verbosity (0 quiet, 1 progress, 2 debug).

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "basa/afl.h"
#include "basa/session.h"
#include "basa/simharness.h"
#include "basa/tcp.h"
#include "json.hpp"

namespace basa::cli {
namespace {

using nlohmann::json;

// Thrown for invalid settings; main prints it as one line.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int LogLevel() {
  static const int level = [] {
    const char* v = std::getenv("BASA_LOG_LEVEL");
    return v ? std::atoi(v) : 1;
  }();
  return level;
}

void Log(int level, const std::string& msg) {
  if (LogLevel() >= level) std::cerr << "basa_cli: " << msg << '\n';
}

struct RunOptions {
  std::string mode;
  std::string users;  // sweepable in bench mode
  uint32_t concurrency = 0;  // 0 = min(32, users)
  std::string buffer = "10";
  double beta = 0;
  double base_time = 1.0;
  std::string dim;  // empty = mode default
  uint64_t modulus = kDefaultModulus;
  double scale = 65536.0;
  double clip = 100.0;
  double eta = 1.0;
  uint32_t local_steps = 5;
  double lr = 0.02;
  uint32_t batch = 16;
  std::string staleness = "poly";
  double timeout = 30;
  double drop = 0;
  uint64_t seed = 1;
  double target = 0.9;
  double max_time = 36000;
  uint64_t max_rounds = 0;
  double sa_overhead = 0;
  uint32_t samples_per_user = 60;
  uint32_t test_size = 2000;
  double separation = 4.0;
  double noise_spike = 4.0;
  double dirichlet_alpha = 0.5;
  double cost_prg = CostModel{}.prg_per_element_s;
  double cost_cipher = CostModel{}.cipher_op_s;
  double cost_upload = CostModel{}.upload_per_byte_s;
  double cost_download = CostModel{}.download_per_byte_s;
  bool calibrate = false;
  std::string metrics = "metrics.csv";
  std::string trace = "trace.jsonl";
  std::string summary = "summary.json";
};

uint64_t ParseCount(const std::string& text, const char* what) {
  size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || text.empty() || text[0] == '-' || v == 0) {
    throw UsageError(std::string(what) + " must be a positive integer, got '" +
                     text + "'");
  }
  return v;
}

// "n" is a single value; "a..b" expands geometrically to 5 rounded values.
std::vector<uint64_t> ParseSweep(const std::string& text, const char* what) {
  const size_t dots = text.find("..");
  if (dots == std::string::npos) return {ParseCount(text, what)};
  const uint64_t a = ParseCount(text.substr(0, dots), what);
  const uint64_t b = ParseCount(text.substr(dots + 2), what);
  if (b < a) throw UsageError(std::string(what) + " sweep must be ascending");
  std::vector<uint64_t> out;
  constexpr int kSteps = 5;
  for (int i = 0; i < kSteps; ++i) {
    const double v = static_cast<double>(a) *
                     std::pow(static_cast<double>(b) / a, i / (kSteps - 1.0));
    const uint64_t r = static_cast<uint64_t>(std::llround(v));
    if (out.empty() || out.back() != r) out.push_back(r);
  }
  return out;
}

uint64_t Single(const std::string& text, const char* what) {
  auto v = ParseSweep(text, what);
  if (v.size() != 1) {
    throw UsageError(std::string(what) + " sweeps are only valid in bench-user-cost");
  }
  return v[0];
}

CostModel MakeCost(const RunOptions& o) {
  CostModel c{o.cost_prg, o.cost_cipher, o.cost_upload, o.cost_download};
  if (!c.IsValid()) throw UsageError("cost model durations must be >= 0");
  if (o.calibrate) {
    c = CostModel::Calibrate(c);
    Log(1, "calibrated prg " + std::to_string(c.prg_per_element_s) +
               " s/elem, cipher " + std::to_string(c.cipher_op_s) + " s/op");
  }
  return c;
}

QuantizerConfig MakeQuantizer(const RunOptions& o) {
  QuantizerConfig q{o.modulus, o.scale, o.clip};
  if (!q.IsValid()) {
    throw UsageError("quantizer needs 3 <= q <= 2^32 and scale*clip < q/2");
  }
  return q;
}

void WriteJson(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::ofstream OpenOut(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  return out;
}

// ---------------------------------------------------------------------------
// Simulation modes.

int RunTraining(const RunOptions& o, SimMode mode) {
  SimConfig c;
  c.mode = mode;
  c.users = static_cast<uint32_t>(Single(o.users, "--users"));
  c.concurrency = o.concurrency ? o.concurrency : std::min<uint32_t>(32, c.users);
  c.buffer = static_cast<uint32_t>(Single(o.buffer, "--buffer"));
  c.delay = {o.beta, o.base_time};
  c.quantizer = MakeQuantizer(o);
  c.eta = o.eta;
  c.train = {o.lr, o.local_steps, o.batch};
  auto staleness = StalenessFn::Parse(o.staleness);
  if (!staleness.ok()) throw UsageError(std::string(staleness.status().message()));
  c.staleness = *staleness;
  c.timeout_s = o.timeout;
  c.drop_probability = o.drop;
  c.target_accuracy = o.target;
  c.max_time_s = o.max_time;
  c.max_rounds = o.max_rounds;
  c.sa_overhead_s = o.sa_overhead;
  c.seed = o.seed;
  const size_t dim = o.dim.empty() ? 32 : Single(o.dim, "--dim");
  if (dim < 2) throw UsageError("--dim must be at least 2 (features + bias)");
  if (auto s = c.Validate(); !s.ok()) throw UsageError(std::string(s.message()));
  c.cost = MakeCost(o);

  Log(1, "building synthetic task: " + std::to_string(c.users) + " users, d=" +
             std::to_string(dim));
  SyntheticTask task = MakeSyntheticTask({.users = c.users,
                                          .dim = dim,
                                          .samples_per_user = o.samples_per_user,
                                          .test_size = o.test_size,
                                          .separation = o.separation,
                                          .noise_spike = o.noise_spike,
                                          .dirichlet_alpha = o.dirichlet_alpha,
                                          .seed = o.seed});
  const auto t0 = std::chrono::steady_clock::now();
  SimResult r = RunSimulation(c, task);
  const double wall = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0).count();

  {
    std::ofstream out = OpenOut(o.metrics);
    WriteMetricsCsv(out, r.run.rows);
  }
  {
    std::ofstream out = OpenOut(o.trace);
    WriteTraceJsonl(out, r.trace);
  }
  const MetricsRow& last = r.run.rows.back();
  json s = {{"mode", std::string(ModeName(mode))},
            {"seed", o.seed},
            {"users", c.users},
            {"concurrency", c.concurrency},
            {"buffer", c.buffer},
            {"beta", c.delay.beta},
            {"dim", dim},
            {"target_accuracy", c.target_accuracy},
            {"time_to_target_s", nullptr},
            {"censored", r.run.censored},
            {"rounds", r.run.rounds},
            {"simulated_time_s", last.simulated_time_s},
            {"final_accuracy", last.accuracy},
            {"final_loss", last.loss},
            {"uploads", r.uploads},
            {"timeouts", r.timeouts},
            {"trainings", r.trainings}};
  if (r.run.time_to_target_s) s["time_to_target_s"] = *r.run.time_to_target_s;
  WriteJson(o.summary, s);
  Log(1, std::string(ModeName(mode)) + ": " +
             (r.run.censored ? std::string("censored")
                             : "target at " +
                                   std::to_string(*r.run.time_to_target_s) +
                                   " s") +
             " after " + std::to_string(r.run.rounds) + " rounds (" +
             std::to_string(wall) + " s wall)");
  return 0;
}

int RunBench(const RunOptions& o) {
  const auto ks = ParseSweep(o.buffer, "--buffer");
  const auto dims = ParseSweep(o.dim.empty() ? "100000" : o.dim, "--dim");
  const auto ns = ParseSweep(o.users.empty() ? "32" : o.users, "--users");
  const CostModel cost = MakeCost(o);
  std::ofstream out = OpenOut(o.metrics);
  out << "buffer,dim,users,per_user_cost_s,per_user_compute_s,round_cost_s\n";
  size_t points = 0;
  char buf[200];
  for (uint64_t n : ns) {
    for (uint64_t d : dims) {
      for (uint64_t k : ks) {
        if (k > UINT32_MAX || n > UINT32_MAX) throw UsageError("value too large");
        const auto kk = static_cast<uint32_t>(k);
        double compute = 0;
        for (uint32_t s = 0; s < kk; ++s) {
          compute += SlotProtocolCost(kk, s, d, cost).compute_s;
        }
        std::snprintf(buf, sizeof(buf), "%llu,%llu,%llu,%.9g,%.9g,%.9g\n",
                      static_cast<unsigned long long>(k),
                      static_cast<unsigned long long>(d),
                      static_cast<unsigned long long>(n),
                      MeasureUserProtocolCost(kk, d, static_cast<uint32_t>(n), cost),
                      compute / kk, AggregateRoundCost(kk, d, cost));
        out << buf;
        ++points;
      }
    }
  }
  WriteJson(o.summary, {{"mode", "bench-user-cost"},
                        {"points", points},
                        {"calibrated", o.calibrate}});
  Log(1, "wrote " + std::to_string(points) + " cost points to " + o.metrics);
  return 0;
}

// ---------------------------------------------------------------------------
// demo-tcp: an attribute authority, a server and one process per user, all
// coordinating over localhost sockets.

constexpr uint64_t kDemoInputStream = 31;
constexpr char kAuthorityName[] = "demo";

std::vector<double> DemoInput(uint64_t seed, uint32_t user, size_t dim) {
  std::mt19937_64 rng = StreamRng(seed, kDemoInputStream, user);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = coord(rng);
  return v;
}

AttributeAuthority DemoAuthority(uint64_t seed) {
  std::mt19937_64 rng = StreamRng(seed, 21);
  return AttributeAuthority::Create(rng, kAuthorityName);
}

json ResultJson(const RoundResult& r) {
  std::vector<uint32_t> elems(r.aggregate.elements().begin(),
                              r.aggregate.elements().end());
  return {{"round", r.round_id},
          {"contributors", r.contributor_count},
          {"staleness_total", r.staleness_total},
          {"aggregate", elems}};
}

struct Child {
  pid_t pid = -1;
  int out = -1;  // read end of the child's stdout
};

Child Spawn(const std::vector<std::string>& args) {
  int fds[2];
  if (::pipe(fds) != 0) throw std::runtime_error("pipe failed");
  std::vector<char*> argv;
  for (const std::string& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = ::fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    ::dup2(fds[1], STDOUT_FILENO);
    ::close(fds[0]);
    ::close(fds[1]);
    ::execv("/proc/self/exe", argv.data());
    std::_Exit(127);
  }
  ::close(fds[1]);
  return {pid, fds[0]};
}

// Reads the port number a child prints on its first stdout line.
uint16_t ReadPort(const Child& c) {
  std::string line;
  char ch;
  while (::read(c.out, &ch, 1) == 1 && ch != '\n') line += ch;
  if (line.empty()) throw std::runtime_error("child exited before listening");
  return static_cast<uint16_t>(std::stoul(line));
}

// Waits up to `limit` for the child; kills it after that. Returns the exit
// code, or -1 if it had to be killed or died by signal.
int Reap(const Child& c, std::chrono::seconds limit) {
  const auto until = std::chrono::steady_clock::now() + limit;
  int status = 0;
  while (true) {
    pid_t r = ::waitpid(c.pid, &status, WNOHANG);
    if (r == c.pid) break;
    if (std::chrono::steady_clock::now() > until) {
      ::kill(c.pid, SIGKILL);
      ::waitpid(c.pid, &status, 0);
      return -1;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (c.out >= 0) ::close(c.out);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void AnnouncePort(uint16_t port) {
  std::cout << port << std::endl;
}

std::atomic<bool> g_stop{false};
extern "C" void OnTerm(int) { g_stop.store(true); }

int ServeAuthorityProcess(uint64_t seed) {
  ::signal(SIGTERM, OnTerm);
  AttributeAuthority aa = DemoAuthority(seed);
  auto listener = TcpListener::Bind(0);
  if (!listener.ok()) throw std::runtime_error(listener.status().ToString());
  AnnouncePort(listener->port());
  ServeAuthority(*listener, aa, g_stop);
  return 0;
}

int ServeAggregatorProcess(const RunOptions& o, uint16_t aa_port,
                           const std::string& result_path) {
  RemoteKeyAuthority aa(TcpFactory("127.0.0.1", aa_port));
  const auto k = static_cast<uint32_t>(Single(o.buffer, "--buffer"));
  const size_t dim = Single(o.dim, "--dim");
  auto engine = ServerEngine::Create({.buffer_size = k,
                                      .dim = dim,
                                      .modulus = o.modulus,
                                      .timeout = ToMicros(o.timeout)},
                                     aa);
  if (!engine.ok()) throw std::runtime_error(engine.status().ToString());
  TcpAggregationServer server(*engine, MakeQuantizer(o));
  std::optional<RoundResult> result;
  server.set_result_sink([&](const RoundResult& r) { result = r; });
  auto listener = TcpListener::Bind(0);
  if (!listener.ok()) throw std::runtime_error(listener.status().ToString());
  AnnouncePort(listener->port());
  if (auto s = server.Run(*listener, 1, ToMicros(o.timeout)); !s.ok()) {
    Log(0, "server: " + s.ToString());
    return 1;
  }
  WriteJson(result_path, ResultJson(*result));
  return 0;
}

int UserProcess(const RunOptions& o, uint16_t server_port, uint16_t aa_port,
                uint32_t index) {
  RemoteKeyAuthority aa(TcpFactory("127.0.0.1", aa_port));
  auto conn = TcpStream::Connect("127.0.0.1", server_port);
  if (!conn.ok()) throw std::runtime_error(conn.status().ToString());
  auto staleness = StalenessFn::Parse(o.staleness);
  if (!staleness.ok()) throw UsageError(std::string(staleness.status().message()));
  std::mt19937_64 rng = StreamRng(o.seed, 14, index);
  const size_t dim = Single(o.dim, "--dim");
  auto out = RunUserSession(*conn, aa, {DemoInput(o.seed, index, dim), 0},
                            MakeQuantizer(o), *staleness, rng,
                            ToMicros(o.timeout));
  if (!out.ok()) {
    Log(0, "user " + std::to_string(index) + ": " + out.status().ToString());
    return 1;
  }
  Log(2, "user " + std::to_string(index) + " committed slot " +
             std::to_string(out->ack.slot));
  return 0;
}

// The same round through in-process channels: same authority seed, same
// user inputs and randomness, users in index order.
RoundResult LoopbackRound(const RunOptions& o, uint32_t users, uint32_t k,
                          size_t dim) {
  AttributeAuthority local = DemoAuthority(o.seed);
  RemoteKeyAuthority aa(DirectAuthorityFactory(local));
  auto engine = ServerEngine::Create(
      {.buffer_size = k, .dim = dim, .modulus = o.modulus}, aa);
  if (!engine.ok()) throw std::runtime_error(engine.status().ToString());
  const QuantizerConfig q = MakeQuantizer(o);
  ServerEndpoint ep(*engine, q);
  auto staleness = StalenessFn::Parse(o.staleness);
  std::optional<RoundResult> result;
  for (uint32_t u = 0; u < users; ++u) {
    std::mt19937_64 rng = StreamRng(o.seed, 14, u);
    DirectServerChannel ch(ep, [] { return Micros{0}; },
                           [&](const RoundResult& r) { result = r; });
    auto out = RunUserSession(ch, aa, {DemoInput(o.seed, u, dim), 0}, q,
                              *staleness, rng);
    if (!out.ok()) throw std::runtime_error(out.status().ToString());
  }
  if (!result) throw std::runtime_error("loopback round did not complete");
  return *result;
}

std::string Exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int RunDemo(const RunOptions& o) {
  const auto users = static_cast<uint32_t>(Single(o.users, "--users"));
  const auto k = static_cast<uint32_t>(Single(o.buffer, "--buffer"));
  const size_t dim = o.dim.empty() ? 100 : Single(o.dim, "--dim");
  if (users != k) {
    throw UsageError("demo-tcp runs one round: --users must equal --buffer");
  }
  if (!StalenessFn::Parse(o.staleness).ok()) throw UsageError("bad --staleness");
  MakeQuantizer(o);
  if (!(o.timeout > 0)) throw UsageError("--timeout must be positive");

  const std::string result_path = o.summary + ".tcp-result.json";
  std::vector<std::string> common = {
      "--seed",    std::to_string(o.seed),   "--dim",     std::to_string(dim),
      "--buffer",  std::to_string(k),        "--modulus", std::to_string(o.modulus),
      "--scale",   Exact(o.scale),           "--clip",    Exact(o.clip),
      "--timeout", Exact(o.timeout),         "--staleness", o.staleness};
  auto with = [&](std::vector<std::string> head) {
    head.insert(head.end(), common.begin(), common.end());
    return head;
  };

  const auto t0 = std::chrono::steady_clock::now();
  Child aa = Spawn(with({"basa_cli", "_authority"}));
  const uint16_t aa_port = ReadPort(aa);
  Child server = Spawn(with({"basa_cli", "_server", "--aa-port",
                             std::to_string(aa_port), "--result", result_path}));
  const uint16_t server_port = ReadPort(server);
  Log(1, "authority on port " + std::to_string(aa_port) + ", server on port " +
             std::to_string(server_port));
  std::vector<Child> children;
  for (uint32_t u = 0; u < users; ++u) {
    children.push_back(Spawn(with({"basa_cli", "_user", "--index",
                                   std::to_string(u), "--server-port",
                                   std::to_string(server_port), "--aa-port",
                                   std::to_string(aa_port)})));
  }
  const auto limit = std::chrono::seconds(
      static_cast<int64_t>(std::ceil(o.timeout)) * (users + 1) + 10);
  int failed_users = 0;
  for (const Child& c : children) failed_users += Reap(c, limit) != 0;
  const int server_code = Reap(server, limit);
  ::kill(aa.pid, SIGTERM);
  Reap(aa, std::chrono::seconds(10));
  const double wall = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0).count();
  if (failed_users || server_code != 0) {
    throw std::runtime_error("tcp round failed: " + std::to_string(failed_users) +
                             " user process(es) failed, server exit " +
                             std::to_string(server_code));
  }

  json tcp;
  {
    std::ifstream in(result_path);
    tcp = json::parse(in);
  }
  std::remove(result_path.c_str());
  RoundResult loop = LoopbackRound(o, users, k, dim);
  const json ref = ResultJson(loop);
  const bool identical = tcp["aggregate"] == ref["aggregate"] &&
                         tcp["staleness_total"].get<double>() ==
                             loop.staleness_total;

  // Unmasked mean against the plaintext mean of the inputs.
  std::vector<uint32_t> elems = tcp["aggregate"].get<std::vector<uint32_t>>();
  RoundResult tcp_result{FieldVector(std::move(elems), o.modulus),
                         tcp["staleness_total"].get<double>(),
                         tcp["round"].get<uint64_t>(),
                         tcp["contributors"].get<uint32_t>()};
  const QuantizerConfig q = MakeQuantizer(o);
  std::vector<double> mean = UnmaskAggregate(tcp_result, q);
  double err = 0;
  for (size_t j = 0; j < dim; ++j) {
    double plain = 0;
    for (uint32_t u = 0; u < users; ++u) plain += DemoInput(o.seed, u, dim)[j];
    err = std::max(err, std::abs(mean[j] - plain / users));
  }
  WriteJson(o.summary, {{"mode", "demo-tcp"},
                        {"seed", o.seed},
                        {"users", users},
                        {"buffer", k},
                        {"dim", dim},
                        {"rounds", 1},
                        {"byte_identical", identical},
                        {"max_abs_error_vs_plain_mean", err},
                        {"wall_time_s", wall}});
  Log(1, std::string("demo-tcp: round committed over TCP; aggregate ") +
             (identical ? "matches" : "DIFFERS FROM") + " the loopback run");
  return identical ? 0 : 1;
}

void AddRunOptions(CLI::App* run, RunOptions& o) {
  run->add_option("--mode", o.mode,
                  "basa-afl | nosa-afl | sync-fedavg | demo-tcp | bench-user-cost")
      ->required()
      ->check(CLI::IsMember({"basa-afl", "nosa-afl", "sync-fedavg", "demo-tcp",
                             "bench-user-cost"}));
  run->add_option("--users", o.users, "number of users N (a..b sweeps in bench)");
  run->add_option("--concurrency", o.concurrency,
                  "users training at once (default min(32, N))");
  run->add_option("--buffer", o.buffer, "buffer size K (a..b sweeps in bench)")
      ->capture_default_str();
  run->add_option("--beta", o.beta, "straggler delay scale in seconds")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  run->add_option("--base-time", o.base_time, "base local training time (s)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  run->add_option("--dim", o.dim, "model dimension d, features plus bias");
  run->add_option("--modulus", o.modulus, "field modulus q")->capture_default_str();
  run->add_option("--scale", o.scale, "quantization scale")->capture_default_str();
  run->add_option("--clip", o.clip, "quantization clip")->capture_default_str();
  run->add_option("--eta", o.eta, "server learning rate")->capture_default_str();
  run->add_option("--local-steps", o.local_steps, "local SGD steps")
      ->capture_default_str();
  run->add_option("--lr", o.lr, "local learning rate")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  run->add_option("--batch", o.batch, "local batch size, 0 = full shard")
      ->capture_default_str();
  run->add_option("--staleness", o.staleness, "poly | poly:<exponent> | constant")
      ->capture_default_str();
  run->add_option("--timeout", o.timeout, "grant timeout (s)")->capture_default_str();
  run->add_option("--drop", o.drop, "probability a granted user vanishes")
      ->capture_default_str();
  run->add_option("--seed", o.seed, "seed")->capture_default_str();
  run->add_option("--target", o.target, "target test accuracy")
      ->capture_default_str();
  run->add_option("--max-time", o.max_time, "simulated time limit (s)")
      ->capture_default_str();
  run->add_option("--max-rounds", o.max_rounds, "round limit, 0 = none")
      ->capture_default_str();
  run->add_option("--sa-overhead", o.sa_overhead,
                  "per-round aggregation overhead of the sync baseline (s)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  run->add_option("--samples-per-user", o.samples_per_user)->capture_default_str();
  run->add_option("--test-size", o.test_size)->capture_default_str();
  run->add_option("--separation", o.separation)->capture_default_str();
  run->add_option("--noise-spike", o.noise_spike)->capture_default_str();
  run->add_option("--dirichlet-alpha", o.dirichlet_alpha)->capture_default_str();
  run->add_option("--cost-prg", o.cost_prg, "s per PRG element")->capture_default_str();
  run->add_option("--cost-cipher", o.cost_cipher, "s per ciphertext op")
      ->capture_default_str();
  run->add_option("--cost-upload", o.cost_upload, "s per uploaded byte")
      ->capture_default_str();
  run->add_option("--cost-download", o.cost_download, "s per downloaded byte")
      ->capture_default_str();
  run->add_flag("--calibrate", o.calibrate,
                "measure PRG and ciphertext costs on this host");
  run->add_option("--metrics", o.metrics, "metrics CSV path")->capture_default_str();
  run->add_option("--trace", o.trace, "trace JSONL path")->capture_default_str();
  run->add_option("--summary", o.summary, "summary JSON path")->capture_default_str();
}

// Reads a flat `key = value` file as settings of the `run` subcommand.
class FlatRunConfig : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigINI::from_config(input);
    for (CLI::ConfigItem& item : items) {
      if (item.parents.empty()) item.parents = {"run"};
    }
    return items;
  }
};

// Options shared by the hidden demo processes.
void AddDemoOptions(CLI::App* sub, RunOptions& o) {
  sub->add_option("--seed", o.seed)->required();
  sub->add_option("--dim", o.dim);
  sub->add_option("--buffer", o.buffer);
  sub->add_option("--modulus", o.modulus);
  sub->add_option("--scale", o.scale);
  sub->add_option("--clip", o.clip);
  sub->add_option("--timeout", o.timeout);
  sub->add_option("--staleness", o.staleness);
}

int Main(int argc, char** argv) {
  CLI::App app{"Buffered asynchronous secure aggregation: simulations and demos"};
  app.require_subcommand(1);
  RunOptions o;
  CLI::App* run = app.add_subcommand("run", "run one mode");
  AddRunOptions(run, o);
  app.set_config("--config", "", "flat key = value file; flags override it");
  app.config_formatter(std::make_shared<FlatRunConfig>());
  app.allow_config_extras(CLI::config_extras_mode::error);
  run->allow_config_extras(CLI::config_extras_mode::error);
  run->fallthrough();

  uint16_t aa_port = 0, server_port = 0;
  uint32_t index = 0;
  std::string result_path;
  CLI::App* authority = app.add_subcommand("_authority")->group("");
  AddDemoOptions(authority, o);
  CLI::App* server = app.add_subcommand("_server")->group("");
  AddDemoOptions(server, o);
  server->add_option("--aa-port", aa_port)->required();
  server->add_option("--result", result_path)->required();
  CLI::App* user = app.add_subcommand("_user")->group("");
  AddDemoOptions(user, o);
  user->add_option("--aa-port", aa_port)->required();
  user->add_option("--server-port", server_port)->required();
  user->add_option("--index", index)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "basa_cli: error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*authority) return ServeAuthorityProcess(o.seed);
    if (*server) return ServeAggregatorProcess(o, aa_port, result_path);
    if (*user) return UserProcess(o, server_port, aa_port, index);

    if (o.mode == "bench-user-cost") return RunBench(o);
    if (run->count("--users") == 0 && o.users.empty()) {
      throw UsageError("--users is required for mode " + o.mode);
    }
    if (o.mode == "demo-tcp") return RunDemo(o);
    SimMode mode = o.mode == "basa-afl"   ? SimMode::kBasa
                   : o.mode == "nosa-afl" ? SimMode::kNoSa
                                          : SimMode::kSync;
    return RunTraining(o, mode);
  } catch (const UsageError& e) {
    std::cerr << "basa_cli: error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "basa_cli: error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "basa_cli: failed: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace
}  // namespace basa::cli

int main(int argc, char** argv) { return basa::cli::Main(argc, argv); }
