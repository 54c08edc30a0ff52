#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fedcada/data.hpp"
#include "fedcada/errors.hpp"
#include "fedcada/metrics.hpp"
#include "fedcada/nn.hpp"
#include "fedcada/optim.hpp"
#include "fedcada/rng.hpp"

namespace fedcada {

enum class StrategyKind { FedAvg, VanillaClientAdam, FedCAda, FedAdamServer, FedAMSServer };

struct Strategy {
  StrategyKind kind = StrategyKind::FedCAda;
  CorrectionMode mode = CorrectionMode::AddGeometric;  // consulted by the Adam clients only

  static Strategy fedavg() { return {StrategyKind::FedAvg, CorrectionMode::NoCorrection}; }
  static Strategy vanilla_client_adam() {
    return {StrategyKind::VanillaClientAdam, CorrectionMode::VanillaSubtract};
  }
  static Strategy fedcada(CorrectionMode mode) { return {StrategyKind::FedCAda, mode}; }
  static Strategy fedadam_server() { return {StrategyKind::FedAdamServer, CorrectionMode::NoCorrection}; }
  static Strategy fedams_server() { return {StrategyKind::FedAMSServer, CorrectionMode::NoCorrection}; }

  bool adam_client() const {
    return kind == StrategyKind::VanillaClientAdam || kind == StrategyKind::FedCAda;
  }
  bool broadcasts_moments() const { return kind == StrategyKind::FedCAda; }
  bool adaptive_server() const {
    return kind == StrategyKind::FedAdamServer || kind == StrategyKind::FedAMSServer;
  }
  bool operator==(const Strategy&) const = default;
};

inline std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FedAvg: return "fedavg";
    case StrategyKind::VanillaClientAdam: return "vanilla_adam";
    case StrategyKind::FedCAda: return "fedcada";
    case StrategyKind::FedAdamServer: return "fedadam";
    case StrategyKind::FedAMSServer: return "fedams";
  }
  return "?";
}

inline std::optional<StrategyKind> parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::FedAvg, StrategyKind::VanillaClientAdam, StrategyKind::FedCAda,
                 StrategyKind::FedAdamServer, StrategyKind::FedAMSServer})
    if (to_string(k) == name) return k;
  return std::nullopt;
}

/// Which counter drives b^t in the correction denominator.
enum class CorrectionClock { Round, CumulativeLocalStep };

struct ServerHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

struct FedConfig {
  int num_clients = 20;
  double select_ratio = 1.0;
  int rounds = 200;
  int local_epochs = 3;
  int batch_size = 32;
  double eta_l = 0.01;
  double eta_g = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  ServerHyper server;
  std::uint64_t seed = 0;
  CorrectionClock clock = CorrectionClock::Round;
  bool weighted_aggregation = false;
  int workers = 1;
  std::optional<int> cka_interval = 25;
  CkaNormalization cka_normalization = CkaNormalization::Standard;

  AdamHyper adam() const { return {eta_l, beta1, beta2, epsilon}; }

  void validate() const {
    if (num_clients < 1) throw ConfigError("fed.num_clients must be >= 1");
    if (!(select_ratio > 0.0 && select_ratio <= 1.0))
      throw ConfigError("fed.select_ratio must lie in (0,1]");
    if (rounds < 0) throw ConfigError("fed.rounds must be >= 0");
    if (local_epochs < 1) throw ConfigError("fed.local_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
    if (!(eta_l > 0.0)) throw ConfigError("fed.eta_l must be > 0");
    if (!(eta_g > 0.0)) throw ConfigError("fed.eta_g must be > 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (cka_interval && *cka_interval < 1) throw ConfigError("metrics.cka_interval must be >= 1");
    adam().validate();
    if (!(server.beta1 > 0.0 && server.beta1 < 1.0)) throw ConfigError("server.beta1 must lie in (0,1)");
    if (!(server.beta2 > 0.0 && server.beta2 < 1.0)) throw ConfigError("server.beta2 must lie in (0,1)");
    if (!(server.epsilon > 0.0)) throw ConfigError("server.epsilon must be > 0");
  }
};

struct ServerState {
  int round = 0;
  ParamVector x;
  MomentState global;  // FedCAda broadcast moments
  std::vector<double> server_m, server_v, server_vhat;

  static ServerState initial(const Strategy& s, ParamVector x0) {
    ServerState st;
    const std::size_t n = x0.size();
    st.x = std::move(x0);
    if (s.broadcasts_moments()) st.global = MomentState::zeros(n);
    if (s.adaptive_server()) {
      st.server_m.assign(n, 0.0);
      st.server_v.assign(n, 0.0);
    }
    if (s.kind == StrategyKind::FedAMSServer) st.server_vhat.assign(n, 0.0);
    return st;
  }
};

struct ClientUpdate {
  int client_id = 0;
  std::vector<double> delta;  // x_local - x_global
  MomentState final_moments;  // zeros for SGD clients
  std::size_t num_samples = 0;
  double mean_train_loss = 0.0;
  int local_steps = 0;
};

inline std::size_t num_selected(int num_clients, double select_ratio) {
  const auto k = std::size_t(std::ceil(select_ratio * double(num_clients) - 1e-9));
  return std::clamp<std::size_t>(k, 1, std::size_t(num_clients));
}

/// ceil(rho * N) distinct ids without replacement, sorted ascending.
inline std::vector<int> sample_clients(int num_clients, double select_ratio, Rng& rng) {
  const std::size_t k = num_selected(num_clients, select_ratio);
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  if (k < ids.size()) {
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

inline int local_steps_per_epoch(std::size_t n_train, int batch_size) {
  return int((n_train + std::size_t(batch_size) - 1) / std::size_t(batch_size));
}

/// Correction clock value for local step k (0-based) of round r (1-based).
inline int correction_time(CorrectionClock clock, int round, int steps_per_round, int k) {
  return clock == CorrectionClock::Round ? round : (round - 1) * steps_per_round + k + 1;
}

/// E epochs of shuffled mini-batch steps from the broadcast state. FedCAda
/// starts from the broadcast moments, VanillaClientAdam from zero moments,
/// SGD-based strategies ignore moments.
inline ClientUpdate run_client(const Strategy& strategy, const MlpSpec& spec, const Dataset& data,
                               const ClientShard& shard, const ParamVector& x_global,
                               const MomentState& broadcast, const FedConfig& cfg, int round,
                               Rng& rng) {
  if (shard.train_idx.empty())
    throw ConfigError("client " + std::to_string(shard.client_id) + " has an empty training split");

  ClientUpdate up;
  up.client_id = shard.client_id;
  up.num_samples = shard.train_idx.size();

  ParamVector x = x_global;
  MomentState moments = MomentState::zeros(x.size());
  if (strategy.kind == StrategyKind::FedCAda) {
    if (broadcast.size() != x.size()) throw ConfigError("run_client: broadcast moments have wrong length");
    moments = broadcast;
  }

  const AdamHyper hyper = cfg.adam();
  const int per_epoch = local_steps_per_epoch(shard.train_idx.size(), cfg.batch_size);
  const int steps = cfg.local_epochs * per_epoch;
  std::vector<std::size_t> order = shard.train_idx;
  double loss_sum = 0.0;
  int k = 0;
  for (int e = 0; e < cfg.local_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size), ++k) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
      const Batch batch = data.gather(std::span(order).subspan(begin, end - begin));
      const LossAndGrad lg = loss_and_grad(spec, x, batch);
      loss_sum += lg.loss;
      if (strategy.adam_client())
        adam_step(x.values, lg.grad.values, moments, hyper, strategy.mode,
                  correction_time(cfg.clock, round, steps, k));
      else
        sgd_step(x.values, lg.grad.values, cfg.eta_l);
    }
  }
  up.local_steps = k;
  up.mean_train_loss = loss_sum / double(k);
  up.delta.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) up.delta[i] = x.values[i] - x_global.values[i];
  up.final_moments = std::move(moments);
  return up;
}

namespace detail {

/// Pairwise (cascade) sum of terms [lo, hi) produced by `term(i)`.
template <typename Term>
std::vector<double> pairwise_sum(std::size_t lo, std::size_t hi, const Term& term) {
  if (hi - lo == 1) return term(lo);
  const std::size_t mid = lo + (hi - lo) / 2;
  std::vector<double> left = pairwise_sum(lo, mid, term);
  const std::vector<double> right = pairwise_sum(mid, hi, term);
  for (std::size_t i = 0; i < left.size(); ++i) left[i] += right[i];
  return left;
}

}  // namespace detail

struct Aggregate {
  std::vector<double> delta;
  MomentState moments;
};

/// Mean of deltas and final moments in the given (ascending-id) order.
/// Uniform by default; sample-count weighted when requested.
inline Aggregate aggregate(std::span<const ClientUpdate> updates, bool weighted = false) {
  if (updates.empty()) throw ConfigError("aggregate: no client updates");
  const std::size_t n = updates.front().delta.size();
  for (const auto& u : updates)
    if (u.delta.size() != n || u.final_moments.m.size() != n || u.final_moments.v.size() != n)
      throw ConfigError("aggregate: client " + std::to_string(u.client_id) +
                        " update has mismatched length");

  std::vector<double> w(updates.size(), 1.0);
  if (weighted) {
    double total = 0.0;
    for (const auto& u : updates) total += double(u.num_samples);
    for (std::size_t i = 0; i < updates.size(); ++i) w[i] = double(updates[i].num_samples) / total;
  }
  auto mean_of = [&](auto field) {
    std::vector<double> out = detail::pairwise_sum(0, updates.size(), [&](std::size_t i) {
      std::vector<double> t = field(updates[i]);
      if (weighted)
        for (double& x : t) x *= w[i];
      return t;
    });
    if (!weighted)
      for (double& x : out) x /= double(updates.size());
    return out;
  };

  Aggregate agg;
  agg.delta = mean_of([](const ClientUpdate& u) { return u.delta; });
  agg.moments.m = mean_of([](const ClientUpdate& u) { return u.final_moments.m; });
  agg.moments.v = mean_of([](const ClientUpdate& u) { return u.final_moments.v; });
  return agg;
}

/// Applies the averaged pseudo-gradient. The sign convention adds eta_g * delta
/// since delta is already a descent direction. Adaptive servers use no bias
/// correction; FedAMS keeps a running maximum of the second moment.
inline void server_update(const Strategy& strategy, ServerState& state, std::span<const double> delta_bar,
                          double eta_g, const ServerHyper& hyper = {}) {
  if (delta_bar.size() != state.x.size())
    throw ConfigError("server_update: delta length " + std::to_string(delta_bar.size()) +
                      " does not match model length " + std::to_string(state.x.size()));
  auto& x = state.x.values;
  if (!strategy.adaptive_server()) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += eta_g * delta_bar[i];
  } else {
    const bool ams = strategy.kind == StrategyKind::FedAMSServer;
    if (state.server_m.size() != x.size() || state.server_v.size() != x.size() ||
        (ams && state.server_vhat.size() != x.size()))
      throw ConfigError("server_update: server moment state has wrong length");
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = delta_bar[i];
      state.server_m[i] = hyper.beta1 * state.server_m[i] + (1.0 - hyper.beta1) * d;
      state.server_v[i] = hyper.beta2 * state.server_v[i] + (1.0 - hyper.beta2) * (d * d);
      double denom = state.server_v[i];
      if (ams) denom = state.server_vhat[i] = std::max(state.server_vhat[i], state.server_v[i]);
      x[i] += eta_g * state.server_m[i] / (std::sqrt(denom) + hyper.epsilon);
    }
  }
  ++state.round;
}

/// Bytes sent server -> clients in a round: the model, plus (m, v) for FedCAda.
inline std::uint64_t broadcast_bytes(const Strategy& s, std::size_t model_size, std::size_t selected) {
  const std::uint64_t vectors = s.broadcasts_moments() ? 3 : 1;
  return vectors * std::uint64_t(model_size) * sizeof(double) * std::uint64_t(selected);
}

struct TrainingResult {
  std::vector<RoundLog> logs;
  ServerState final_state;
  std::vector<int> last_selected;
  std::vector<MomentState> last_client_moments;  // final local moments of the last round
  std::optional<MomentCka> last_cka_m;
  std::optional<MomentCka> last_cka_v;
  bool diverged = false;
  std::string divergence_message;
};

using RoundCallback = std::function<void(const RoundLog&)>;

/// Runs the clients of one round, optionally on several threads. Results are
/// stored by position so the outcome is independent of scheduling.
inline std::vector<ClientUpdate> run_round_clients(const Strategy& strategy, const MlpSpec& spec,
                                                   const Dataset& data,
                                                   std::span<const ClientShard> shards,
                                                   const ServerState& state, const FedConfig& cfg,
                                                   int round, std::span<const int> selected) {
  std::vector<ClientUpdate> updates(selected.size());
  std::vector<std::exception_ptr> errors(selected.size());
  auto work = [&](std::size_t slot) {
    try {
      const int id = selected[slot];
      Rng rng = make_rng(cfg.seed, "client", {std::uint64_t(round), std::uint64_t(id)});
      updates[slot] = run_client(strategy, spec, data, shards[std::size_t(id)], state.x, state.global,
                                 cfg, round, rng);
    } catch (...) {
      errors[slot] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(std::size_t(cfg.workers), selected.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < selected.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < selected.size();) work(i);
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return updates;
}

/// Sample -> local training -> aggregate -> server update, for cfg.rounds
/// rounds, evaluating the global model on the union of client eval splits
/// after each round. Shards must already be split into train/eval.
inline TrainingResult run_training(const Strategy& strategy, const FedConfig& cfg, const Dataset& data,
                                   std::span<const ClientShard> shards, const MlpSpec& spec,
                                   const RoundCallback& on_round = {}) {
  cfg.validate();
  if (shards.size() != std::size_t(cfg.num_clients))
    throw ConfigError("run_training: " + std::to_string(shards.size()) + " shards for " +
                      std::to_string(cfg.num_clients) + " clients");
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (shards[i].client_id != int(i)) throw ConfigError("run_training: shards must be ordered by client id");
    if (shards[i].train_idx.empty())
      throw ConfigError("client " + std::to_string(i) + " has an empty training split");
  }
  if (spec.input_dim() != data.dim() || spec.num_classes() < data.num_classes)
    throw ConfigError("run_training: model dimensions do not match the dataset");

  const std::vector<std::size_t> test_idx = build_global_test(shards);
  const Batch test_batch = test_idx.empty() ? data.all() : data.gather(test_idx);

  TrainingResult result;
  result.final_state = ServerState::initial(strategy, init_params(spec, derive_seed(cfg.seed, "init")));
  ServerState& state = result.final_state;

  try {
    for (int r = 1; r <= cfg.rounds; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      Rng sampler = make_rng(cfg.seed, "sample", {std::uint64_t(r)});
      const std::vector<int> selected = sample_clients(cfg.num_clients, cfg.select_ratio, sampler);

      std::vector<ClientUpdate> updates =
          run_round_clients(strategy, spec, data, shards, state, cfg, r, selected);
      Aggregate agg = aggregate(updates, cfg.weighted_aggregation);
      server_update(strategy, state, agg.delta, cfg.eta_g, cfg.server);
      if (strategy.broadcasts_moments()) state.global = std::move(agg.moments);

      for (double xi : state.x.values)
        if (!std::isfinite(xi)) throw NumericError("non-finite global model after round " + std::to_string(r));

      double train_loss = 0.0;
      for (const auto& u : updates) train_loss += u.mean_train_loss;
      train_loss /= double(updates.size());

      result.last_selected = selected;
      result.last_client_moments.clear();
      for (auto& u : updates) result.last_client_moments.push_back(std::move(u.final_moments));

      const bool track_cka = strategy.adam_client() && cfg.cka_interval && selected.size() >= 2 &&
                             (r % *cfg.cka_interval == 0 || r == cfg.rounds);
      std::optional<MomentCka> cka_m, cka_v;
      if (track_cka) {
        cka_m = moment_cka_matrix(result.last_client_moments, state.x.manifest, MomentKind::First,
                                  cfg.cka_normalization);
        cka_v = moment_cka_matrix(result.last_client_moments, state.x.manifest, MomentKind::Second,
                                  cfg.cka_normalization);
      }

      const Evaluation ev = evaluate(spec, state.x, test_batch);
      if (!std::isfinite(ev.loss) || !std::isfinite(train_loss))
        throw NumericError("non-finite loss in round " + std::to_string(r));
      const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - t0).count();
      RoundLog log = summarize_round(r, train_loss, ev, cka_m ? &*cka_m : nullptr,
                                     cka_v ? &*cka_v : nullptr,
                                     broadcast_bytes(strategy, state.x.size(), selected.size()), wall);
      if (cka_m) result.last_cka_m = std::move(cka_m);
      if (cka_v) result.last_cka_v = std::move(cka_v);
      result.logs.push_back(log);
      if (on_round) on_round(log);
    }
  } catch (const NumericError& e) {
    result.diverged = true;
    result.divergence_message = e.what();
  }
  return result;
}

}  // namespace fedcada
