#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedcada/data.hpp"
#include "fedcada/errors.hpp"
#include "fedcada/federation.hpp"
#include "fedcada/optim.hpp"

namespace fedcada {

enum class DataSource { Synthetic, Idx };

struct SyntheticParams {
  int classes = 10;
  int dim = 32;
  int per_class = 200;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  StrategyKind strategy = StrategyKind::FedCAda;
  CorrectionMode correction = CorrectionMode::AddGeometric;
  FedConfig fed;
  PartitionSpec partition;
  int hidden1 = 200;
  int hidden2 = 200;
  DataSource source = DataSource::Synthetic;
  SyntheticParams synthetic;
  std::filesystem::path idx_images;
  std::filesystem::path idx_labels;
  double train_fraction = 0.75;
  std::optional<std::filesystem::path> output_dir;

  Strategy strategy_value() const {
    switch (strategy) {
      case StrategyKind::FedAvg: return Strategy::fedavg();
      case StrategyKind::VanillaClientAdam: return Strategy::vanilla_client_adam();
      case StrategyKind::FedCAda: return Strategy::fedcada(correction);
      case StrategyKind::FedAdamServer: return Strategy::fedadam_server();
      case StrategyKind::FedAMSServer: return Strategy::fedams_server();
    }
    return Strategy::fedcada(correction);
  }

  /// Seeds for the partitioner and train/eval split, derived from the root seed.
  std::uint64_t partition_seed() const { return derive_seed(fed.seed, "partition"); }
  std::uint64_t split_seed() const { return derive_seed(fed.seed, "split"); }

  void validate() const {
    fed.validate();
    if (hidden1 < 1) throw ConfigError("model.hidden1 must be >= 1");
    if (hidden2 < 1) throw ConfigError("model.hidden2 must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("data.train_fraction must lie in (0,1)");
    if (partition.num_clients != fed.num_clients)
      throw ConfigError("partition.num_clients must equal fed.num_clients");
    if (!(partition.alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
    if (partition.min_shard_size < 1) throw ConfigError("partition.min_shard_size must be >= 1");
    if (source == DataSource::Synthetic) {
      if (synthetic.classes < 1) throw ConfigError("data.classes must be >= 1");
      if (synthetic.dim < 1) throw ConfigError("data.dim must be >= 1");
      if (synthetic.per_class < 1) throw ConfigError("data.per_class must be >= 1");
      if (!(synthetic.spread >= 0.0)) throw ConfigError("data.spread must be >= 0");
    } else {
      if (idx_images.empty() || !std::filesystem::exists(idx_images))
        throw ConfigError("data.images: file not found: " + idx_images.string());
      if (idx_labels.empty() || !std::filesystem::exists(idx_labels))
        throw ConfigError("data.labels: file not found: " + idx_labels.string());
    }
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "' as a number");
  return value;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(text) + "'");
}

inline void require_open_unit(std::string_view key, double v) {
  if (!(v > 0.0 && v < 1.0))
    throw ConfigError(std::string(key) + " = " + std::to_string(v) + " is outside the open interval (0,1)");
}

inline void require_positive(std::string_view key, double v) {
  if (!(v > 0.0)) throw ConfigError(std::string(key) + " must be > 0");
}

}  // namespace detail

/// Applies one `key = value` assignment. Unknown keys are rejected.
inline void apply_setting(ExperimentConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_number;
  auto as_int = [&] { return parse_number<int>(key, value); };
  auto as_double = [&] { return parse_number<double>(key, value); };
  auto as_u64 = [&] { return parse_number<std::uint64_t>(key, value); };
  auto open_unit = [&] {
    const double v = as_double();
    detail::require_open_unit(key, v);
    return v;
  };
  auto positive = [&] {
    const double v = as_double();
    detail::require_positive(key, v);
    return v;
  };

  if (key == "strategy") {
    const auto k = parse_strategy_kind(value);
    if (!k) throw ConfigError("strategy: unknown strategy '" + std::string(value) +
                              "' (fedavg, vanilla_adam, fedcada, fedadam, fedams)");
    c.strategy = *k;
  } else if (key == "correction") {
    const auto m = parse_correction_mode(value);
    if (!m) throw ConfigError("correction: unknown mode '" + std::string(value) +
                              "' (vanilla, add_geometric, add_square, add_sine, add_sqrt, none)");
    c.correction = *m;
  } else if (key == "fed.num_clients") {
    c.fed.num_clients = c.partition.num_clients = as_int();
    if (c.fed.num_clients < 1) throw ConfigError("fed.num_clients must be >= 1");
  } else if (key == "fed.select_ratio") {
    c.fed.select_ratio = as_double();
    if (!(c.fed.select_ratio > 0.0 && c.fed.select_ratio <= 1.0))
      throw ConfigError("fed.select_ratio must lie in (0,1]");
  } else if (key == "fed.rounds") {
    c.fed.rounds = as_int();
    if (c.fed.rounds < 0) throw ConfigError("fed.rounds must be >= 0");
  } else if (key == "fed.local_epochs") {
    c.fed.local_epochs = as_int();
    if (c.fed.local_epochs < 1) throw ConfigError("fed.local_epochs must be >= 1");
  } else if (key == "fed.batch_size") {
    c.fed.batch_size = as_int();
    if (c.fed.batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
  } else if (key == "fed.eta_l") {
    c.fed.eta_l = positive();
  } else if (key == "fed.eta_g") {
    c.fed.eta_g = positive();
  } else if (key == "fed.seed") {
    c.fed.seed = as_u64();
  } else if (key == "fed.correction_clock") {
    if (value == "round") c.fed.clock = CorrectionClock::Round;
    else if (value == "cumulative_local_step") c.fed.clock = CorrectionClock::CumulativeLocalStep;
    else throw ConfigError("fed.correction_clock: expected round or cumulative_local_step");
  } else if (key == "fed.weighted_aggregation") {
    c.fed.weighted_aggregation = detail::parse_bool(key, value);
  } else if (key == "fed.workers") {
    c.fed.workers = as_int();
    if (c.fed.workers < 1) throw ConfigError("fed.workers must be >= 1");
  } else if (key == "optim.beta1") {
    c.fed.beta1 = open_unit();
  } else if (key == "optim.beta2") {
    c.fed.beta2 = open_unit();
  } else if (key == "optim.epsilon") {
    c.fed.epsilon = positive();
  } else if (key == "server.beta1") {
    c.fed.server.beta1 = open_unit();
  } else if (key == "server.beta2") {
    c.fed.server.beta2 = open_unit();
  } else if (key == "server.epsilon") {
    c.fed.server.epsilon = positive();
  } else if (key == "model.hidden1") {
    c.hidden1 = as_int();
    if (c.hidden1 < 1) throw ConfigError("model.hidden1 must be >= 1");
  } else if (key == "model.hidden2") {
    c.hidden2 = as_int();
    if (c.hidden2 < 1) throw ConfigError("model.hidden2 must be >= 1");
  } else if (key == "data.source") {
    if (value == "synthetic") c.source = DataSource::Synthetic;
    else if (value == "idx") c.source = DataSource::Idx;
    else throw ConfigError("data.source: expected synthetic or idx");
  } else if (key == "data.classes") {
    c.synthetic.classes = as_int();
  } else if (key == "data.dim") {
    c.synthetic.dim = as_int();
  } else if (key == "data.per_class") {
    c.synthetic.per_class = as_int();
  } else if (key == "data.spread") {
    c.synthetic.spread = as_double();
    if (!(c.synthetic.spread >= 0.0)) throw ConfigError("data.spread must be >= 0");
  } else if (key == "data.seed") {
    c.synthetic.seed = as_u64();
  } else if (key == "data.images") {
    c.idx_images = std::string(value);
  } else if (key == "data.labels") {
    c.idx_labels = std::string(value);
  } else if (key == "data.train_fraction") {
    c.train_fraction = open_unit();
  } else if (key == "partition.mode") {
    if (value == "iid") c.partition.mode = PartitionMode::IID;
    else if (value == "dirichlet") c.partition.mode = PartitionMode::Dirichlet;
    else throw ConfigError("partition.mode: expected iid or dirichlet");
  } else if (key == "partition.alpha") {
    c.partition.alpha = positive();
  } else if (key == "partition.min_shard_size") {
    c.partition.min_shard_size = as_int();
    if (c.partition.min_shard_size < 1) throw ConfigError("partition.min_shard_size must be >= 1");
  } else if (key == "metrics.cka_interval") {
    if (value == "none") {
      c.fed.cka_interval.reset();
    } else {
      c.fed.cka_interval = as_int();
      if (*c.fed.cka_interval < 1) throw ConfigError("metrics.cka_interval must be >= 1 or none");
    }
  } else if (key == "metrics.cka_normalization") {
    if (value == "standard") c.fed.cka_normalization = CkaNormalization::Standard;
    else if (value == "printed") c.fed.cka_normalization = CkaNormalization::PrintedSquared;
    else throw ConfigError("metrics.cka_normalization: expected standard or printed");
  } else if (key == "output.dir") {
    c.output_dir = std::string(value);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

namespace detail {

inline ExperimentConfig parse_settings(std::string_view text) {
  ExperimentConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  for (int line_no = 1; std::getline(in, raw); ++line_no) {
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": missing key");
    if (value.empty()) throw ConfigError(std::string(key) + ": missing value");
    if (!seen.emplace(key).second) throw ConfigError(std::string(key) + ": duplicate key");
    apply_setting(cfg, key, value);
  }
  return cfg;
}

}  // namespace detail

/// Parses line-oriented `key = value` text with `#` comments.
inline ExperimentConfig parse_config_text(std::string_view text) {
  ExperimentConfig cfg = detail::parse_settings(text);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = detail::parse_settings(ss.str());
  // Relative data paths resolve against the config file's directory.
  const auto base = path.parent_path();
  if (cfg.source == DataSource::Idx) {
    if (!cfg.idx_images.empty() && cfg.idx_images.is_relative()) cfg.idx_images = base / cfg.idx_images;
    if (!cfg.idx_labels.empty() && cfg.idx_labels.is_relative()) cfg.idx_labels = base / cfg.idx_labels;
  }
  cfg.validate();
  return cfg;
}

/// Effective settings as key -> value strings, in key order.
inline std::map<std::string, std::string> config_echo(const ExperimentConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  std::map<std::string, std::string> m;
  m["strategy"] = std::string(to_string(c.strategy));
  m["correction"] = std::string(to_string(c.correction));
  m["fed.num_clients"] = std::to_string(c.fed.num_clients);
  m["fed.select_ratio"] = num(c.fed.select_ratio);
  m["fed.rounds"] = std::to_string(c.fed.rounds);
  m["fed.local_epochs"] = std::to_string(c.fed.local_epochs);
  m["fed.batch_size"] = std::to_string(c.fed.batch_size);
  m["fed.eta_l"] = num(c.fed.eta_l);
  m["fed.eta_g"] = num(c.fed.eta_g);
  m["fed.seed"] = std::to_string(c.fed.seed);
  m["fed.correction_clock"] = c.fed.clock == CorrectionClock::Round ? "round" : "cumulative_local_step";
  m["fed.weighted_aggregation"] = c.fed.weighted_aggregation ? "true" : "false";
  m["optim.beta1"] = num(c.fed.beta1);
  m["optim.beta2"] = num(c.fed.beta2);
  m["optim.epsilon"] = num(c.fed.epsilon);
  m["server.beta1"] = num(c.fed.server.beta1);
  m["server.beta2"] = num(c.fed.server.beta2);
  m["server.epsilon"] = num(c.fed.server.epsilon);
  m["model.hidden1"] = std::to_string(c.hidden1);
  m["model.hidden2"] = std::to_string(c.hidden2);
  m["data.source"] = c.source == DataSource::Synthetic ? "synthetic" : "idx";
  if (c.source == DataSource::Synthetic) {
    m["data.classes"] = std::to_string(c.synthetic.classes);
    m["data.dim"] = std::to_string(c.synthetic.dim);
    m["data.per_class"] = std::to_string(c.synthetic.per_class);
    m["data.spread"] = num(c.synthetic.spread);
    m["data.seed"] = std::to_string(c.synthetic.seed);
  } else {
    m["data.images"] = c.idx_images.string();
    m["data.labels"] = c.idx_labels.string();
  }
  m["data.train_fraction"] = num(c.train_fraction);
  m["partition.mode"] = c.partition.mode == PartitionMode::IID ? "iid" : "dirichlet";
  m["partition.alpha"] = num(c.partition.alpha);
  m["partition.min_shard_size"] = std::to_string(c.partition.min_shard_size);
  m["metrics.cka_interval"] = c.fed.cka_interval ? std::to_string(*c.fed.cka_interval) : "none";
  m["metrics.cka_normalization"] =
      c.fed.cka_normalization == CkaNormalization::Standard ? "standard" : "printed";
  return m;
}

}  // namespace fedcada
