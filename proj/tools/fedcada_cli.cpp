// Command-line front end: run experiments, inspect partitions, export the
// correction-denominator curves.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fedcada/fedcada.hpp"

namespace {

std::filesystem::path resolve_out(const std::string& flag, const fedcada::ExperimentConfig* cfg) {
  if (!flag.empty()) return flag;
  if (cfg && cfg->output_dir) return *cfg->output_dir;
  if (const char* env = std::getenv("FEDCADA_OUT"); env && *env) return env;
  return "out";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with client-side adaptive optimization"};
  app.require_subcommand(1);

  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  int workers = 0;
  auto* run = app.add_subcommand("run", "train per a config file");
  run->add_option("--config", config_path, "config file (key = value)")->required();
  run->add_option("--seed", seed, "override fed.seed");
  run->add_option("--out", out, "output directory");
  run->add_option("--workers", workers, "client worker threads per round");

  auto* part = app.add_subcommand("partition", "write per-client class histograms");
  part->add_option("--config", config_path, "config file (key = value)")->required();
  part->add_option("--out", out, "output directory");

  double beta = 0.9;
  int rounds = 200;
  auto* curves = app.add_subcommand("curves", "export correction denominators per round");
  curves->add_option("--beta", beta, "beta in (0,1)");
  curves->add_option("--rounds", rounds, "number of rounds T >= 1");
  curves->add_option("--out", out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return fedcada::kExitConfig;
  }

  try {
    if (*curves) return fedcada::cmd_curves(beta, rounds, resolve_out(out, nullptr));

    fedcada::ExperimentConfig cfg = fedcada::parse_config(config_path);
    if (seed) cfg.fed.seed = *seed;
    if (workers != 0) cfg.fed.workers = workers;
    cfg.validate();
    const auto out_dir = resolve_out(out, &cfg);
    if (*part) return fedcada::cmd_partition(cfg, out_dir);
    return fedcada::cmd_run(cfg, out_dir, std::cerr);
  } catch (const fedcada::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return fedcada::kExitConfig;
  } catch (const fedcada::LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return fedcada::kExitConfig;
  } catch (const fedcada::NumericError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return fedcada::kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
