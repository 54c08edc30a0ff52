#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcada/config.hpp"
#include "fedcada/data.hpp"
#include "fedcada/federation.hpp"
#include "fedcada/io.hpp"
#include "fedcada/optim.hpp"

namespace fedcada {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;

/// Dataset, split shards and model spec for a config.
struct Prepared {
  Dataset data;
  std::vector<ClientShard> shards;  // split into train/eval
  MlpSpec spec;
};

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.source == DataSource::Idx) return load_idx(cfg.idx_images, cfg.idx_labels);
  const auto& s = cfg.synthetic;
  return make_synthetic_blobs(s.classes, s.dim, s.per_class, s.spread, s.seed);
}

inline std::vector<ClientShard> make_shards(const ExperimentConfig& cfg, const Dataset& data) {
  PartitionSpec ps = cfg.partition;
  ps.num_clients = cfg.fed.num_clients;
  ps.seed = cfg.partition_seed();
  return partition(data, ps);
}

inline Prepared prepare(const ExperimentConfig& cfg) {
  Dataset data = load_dataset(cfg);
  std::vector<ClientShard> shards = make_shards(cfg, data);
  for (auto& s : shards) s = split_train_eval(s, cfg.train_fraction, cfg.split_seed());
  MlpSpec spec(data.dim(), cfg.hidden1, cfg.hidden2, data.num_classes);
  return {std::move(data), std::move(shards), spec};
}

inline std::string rounds_csv(const std::vector<RoundLog>& logs) {
  std::ostringstream os;
  os << "round,train_loss,test_loss,test_acc\n";
  for (const auto& l : logs)
    os << l.round << ',' << format_real(l.mean_client_train_loss) << ','
       << format_real(l.global_test_loss) << ',' << format_real(l.global_test_acc) << '\n';
  return os.str();
}

/// Trains per the config and writes rounds.csv, summary.json and, when CKA
/// tracking produced matrices, cka_m.csv / cka_v.csv plus per-layer files.
/// Returns kExitOk, or kExitDiverged after flushing logs. Configuration and
/// load problems propagate as exceptions.
inline int cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                   std::ostream& progress = std::cerr) {
  const auto t0 = std::chrono::steady_clock::now();
  const Prepared prep = prepare(cfg);
  const Strategy strategy = cfg.strategy_value();

  const TrainingResult res =
      run_training(strategy, cfg.fed, prep.data, prep.shards, prep.spec, [&](const RoundLog& l) {
        progress << "round " << l.round << "/" << cfg.fed.rounds << " train_loss "
                 << l.mean_client_train_loss << " test_loss " << l.global_test_loss << " test_acc "
                 << l.global_test_acc << '\n';
      });
  const auto total_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();

  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir / "rounds.csv", rounds_csv(res.logs));

  auto write_cka = [&](const std::optional<MomentCka>& cka, const std::string& stem) {
    if (!cka) return;
    write_file_atomic(out_dir / (stem + ".csv"), cka_matrix_csv(cka->mean));
    for (std::size_t l = 0; l < cka->per_layer.size(); ++l)
      write_file_atomic(out_dir / (stem + "_layer" + std::to_string(l) + ".csv"),
                        cka_matrix_csv(cka->per_layer[l]));
  };
  write_cka(res.last_cka_m, "cka_m");
  write_cka(res.last_cka_v, "cka_v");

  nlohmann::ordered_json summary;
  summary["strategy"] = std::string(to_string(cfg.strategy));
  if (strategy.adam_client()) summary["correction"] = std::string(to_string(strategy.mode));
  summary["seed"] = cfg.fed.seed;
  summary["rounds_completed"] = res.logs.size();
  summary["diverged"] = res.diverged;
  if (res.diverged) summary["divergence"] = res.divergence_message;
  if (!res.logs.empty()) {
    const auto best = std::max_element(res.logs.begin(), res.logs.end(), [](const RoundLog& a, const RoundLog& b) {
      return a.global_test_acc < b.global_test_acc;
    });
    summary["final_acc"] = res.logs.back().global_test_acc;
    summary["final_test_loss"] = res.logs.back().global_test_loss;
    summary["best_acc"] = best->global_test_acc;
    summary["best_round"] = best->round;
    if (res.last_cka_m) summary["cka_mean_offdiag_m"] = res.last_cka_m->mean.mean_offdiag().value_or(std::nan(""));
    if (res.last_cka_v) summary["cka_mean_offdiag_v"] = res.last_cka_v->mean.mean_offdiag().value_or(std::nan(""));
  } else {
    summary["final_acc"] = nullptr;
    summary["best_acc"] = nullptr;
  }
  summary["model_parameters"] = prep.spec.param_count();
  summary["total_wall_ms"] = total_ms;
  summary["config"] = config_echo(cfg);
  write_file_atomic(out_dir / "summary.json", summary.dump(2) + "\n");

  if (res.diverged) {
    progress << "diverged: " << res.divergence_message << '\n';
    return kExitDiverged;
  }
  return kExitOk;
}

/// Writes partition.csv (`client,class,count`) for the config's partition.
inline int cmd_partition(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const Dataset data = load_dataset(cfg);
  const auto shards = make_shards(cfg, data);
  std::ostringstream os;
  os << "client,class,count\n";
  for (const auto& s : shards) {
    const auto hist = class_histogram(data, s.train_idx);
    for (std::size_t c = 0; c < hist.size(); ++c) os << s.client_id << ',' << c << ',' << hist[c] << '\n';
  }
  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir / "partition.csv", os.str());
  return kExitOk;
}

inline std::string curves_csv(double beta, int rounds) {
  const CorrectionMode cols[] = {CorrectionMode::VanillaSubtract, CorrectionMode::AddGeometric,
                                 CorrectionMode::AddSquare, CorrectionMode::AddSine, CorrectionMode::AddSqrt};
  std::vector<std::vector<double>> curves;
  for (CorrectionMode m : cols) curves.push_back(denominator_curve(m, beta, rounds));
  std::ostringstream os;
  os << "t";
  for (CorrectionMode m : cols) os << ',' << to_string(m);
  os << '\n';
  for (int t = 0; t < rounds; ++t) {
    os << t + 1;
    for (const auto& c : curves) os << ',' << format_real(c[std::size_t(t)]);
    os << '\n';
  }
  return os.str();
}

/// Writes curves.csv with the first-moment denominators for t = 1..rounds.
inline int cmd_curves(double beta, int rounds, const std::filesystem::path& out_dir) {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("--beta must lie in (0,1)");
  if (rounds < 1) throw ConfigError("--rounds must be >= 1");
  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir / "curves.csv", curves_csv(beta, rounds));
  return kExitOk;
}

}  // namespace fedcada
