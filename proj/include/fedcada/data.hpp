#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedcada/errors.hpp"
#include "fedcada/nn.hpp"
#include "fedcada/rng.hpp"

namespace fedcada {

struct Dataset {
  RowMatrix features;  // n x d
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int dim() const { return int(features.cols()); }

  Batch gather(std::span<const std::size_t> idx) const {
    Batch b;
    b.features.resize(Eigen::Index(idx.size()), features.cols());
    b.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      b.features.row(Eigen::Index(i)) = features.row(Eigen::Index(idx[i]));
      b.labels[i] = labels[idx[i]];
    }
    return b;
  }

  Batch all() const { return Batch{features, labels}; }
};

struct ClientShard {
  int client_id = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> eval_idx;

  std::size_t size() const { return train_idx.size() + eval_idx.size(); }
};

enum class PartitionMode { IID, Dirichlet };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::Dirichlet;
  double alpha = 0.1;
  int num_clients = 20;
  int min_shard_size = 8;
  std::uint64_t seed = 0;
};

inline constexpr int kDirichletMaxAttempts = 1000;

/// Gaussian blobs: class c is centred on a seeded unit direction scaled by
/// 3, with isotropic noise of standard deviation `spread`. Rows are grouped
/// by class.
inline Dataset make_synthetic_blobs(int num_classes, int dim, int per_class, double spread,
                                    std::uint64_t seed) {
  if (num_classes < 1 || dim < 1 || per_class < 1 || spread < 0.0)
    throw ConfigError("synthetic blobs: classes, dim and per_class must be positive, spread >= 0");
  Dataset ds;
  ds.num_classes = num_classes;
  ds.features.resize(Eigen::Index(num_classes) * per_class, dim);
  ds.labels.resize(std::size_t(num_classes) * std::size_t(per_class));

  Rng center_rng = make_rng(seed, "blob-centers");
  Rng noise_rng = make_rng(seed, "blob-noise");
  std::normal_distribution<double> unit(0.0, 1.0);
  Eigen::Index row = 0;
  for (int c = 0; c < num_classes; ++c) {
    Eigen::RowVectorXd center(dim);
    for (int j = 0; j < dim; ++j) center(j) = unit(center_rng);
    center *= 3.0 / center.norm();
    for (int k = 0; k < per_class; ++k, ++row) {
      ds.features.row(row) = center;
      if (spread > 0.0)
        for (int j = 0; j < dim; ++j) ds.features(row, j) += spread * unit(noise_rng);
      ds.labels[std::size_t(row)] = c;
    }
  }
  return ds;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const char* field) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4))
    throw LoadError(std::string("truncated header: ") + field);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline std::vector<unsigned char> read_bytes(std::istream& in, std::size_t n, const char* field) {
  std::vector<unsigned char> buf(n);
  if (n > 0 && !in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n)))
    throw LoadError(std::string("truncated ") + field);
  return buf;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;  // 2051
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;  // 2049

/// Loads an IDX image/label pair (MNIST, FashionMNIST). Pixels map to
/// [0,1] by division by 255; images are flattened row-major.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw LoadError("cannot open image file " + images_path.string());
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw LoadError("cannot open label file " + labels_path.string());

  if (detail::read_be32(img, "image magic") != kIdxImageMagic) throw LoadError("bad image magic");
  const std::uint32_t n_img = detail::read_be32(img, "image count");
  const std::uint32_t rows = detail::read_be32(img, "image rows");
  const std::uint32_t cols = detail::read_be32(img, "image cols");

  if (detail::read_be32(lab, "label magic") != kIdxLabelMagic) throw LoadError("bad label magic");
  const std::uint32_t n_lab = detail::read_be32(lab, "label count");
  if (n_img != n_lab)
    throw LoadError("count mismatch: image count " + std::to_string(n_img) + " vs label count " +
                    std::to_string(n_lab));
  if (n_img == 0) throw LoadError("image count is zero");

  const std::size_t d = std::size_t(rows) * cols;
  const auto pixels = detail::read_bytes(img, std::size_t(n_img) * d, "image data");
  const auto labels = detail::read_bytes(lab, n_lab, "label data");

  Dataset ds;
  ds.features.resize(Eigen::Index(n_img), Eigen::Index(d));
  for (std::size_t i = 0; i < pixels.size(); ++i)
    ds.features.data()[i] = double(pixels[i]) / 255.0;
  ds.labels.assign(labels.begin(), labels.end());
  ds.num_classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

/// Writes `label,f0,...,f{d-1}` rows.
inline void write_dataset_csv(const Dataset& ds, std::ostream& out) {
  out << "label";
  for (int j = 0; j < ds.dim(); ++j) out << ",f" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (int j = 0; j < ds.dim(); ++j) out << ',' << ds.features(Eigen::Index(i), j);
    out << '\n';
  }
}

/// Seeded shuffle dealt round-robin. Shards hold every index in train_idx
/// until split_train_eval is applied.
inline std::vector<ClientShard> partition_iid(const Dataset& ds, int num_clients, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigError("partition: num_clients must be >= 1");
  if (ds.size() < std::size_t(num_clients))
    throw ConfigError("partition: dataset has fewer samples than clients");
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed, "partition-iid");
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<ClientShard> shards(static_cast<std::size_t>(num_clients));
  for (int c = 0; c < num_clients; ++c) shards[std::size_t(c)].client_id = c;
  for (std::size_t k = 0; k < perm.size(); ++k)
    shards[k % std::size_t(num_clients)].train_idx.push_back(perm[k]);
  for (auto& s : shards) std::sort(s.train_idx.begin(), s.train_idx.end());
  return shards;
}

/// Per-class Dirichlet(alpha) proportions over clients, split by cumulative
/// shares. The whole draw is rejected until every client holds at least
/// min_shard_size samples.
inline std::vector<ClientShard> partition_dirichlet(const Dataset& ds, int num_clients, double alpha,
                                                    int min_shard_size, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigError("partition: num_clients must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("partition: alpha must be > 0");
  if (min_shard_size < 1) throw ConfigError("partition: min_shard_size must be >= 1");

  std::vector<std::vector<std::size_t>> by_class(std::size_t(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[std::size_t(ds.labels[i])].push_back(i);

  const auto n_clients = std::size_t(num_clients);
  Rng rng = make_rng(seed, "partition-dirichlet");
  std::gamma_distribution<double> gamma(alpha, 1.0);

  for (int attempt = 0; attempt < kDirichletMaxAttempts; ++attempt) {
    std::vector<ClientShard> shards(n_clients);
    for (std::size_t c = 0; c < n_clients; ++c) shards[c].client_id = int(c);

    for (auto members : by_class) {
      std::shuffle(members.begin(), members.end(), rng);
      std::vector<double> p(n_clients);
      double total = 0.0;
      for (double& x : p) total += (x = gamma(rng));
      if (!(total > 0.0)) {  // every draw underflowed; fall back to one client
        std::fill(p.begin(), p.end(), 0.0);
        p[std::uniform_int_distribution<std::size_t>(0, n_clients - 1)(rng)] = total = 1.0;
      }
      double cum = 0.0;
      std::size_t begin = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        cum += p[c] / total;
        std::size_t end = c + 1 == n_clients
                              ? members.size()
                              : std::min(members.size(), std::size_t(cum * double(members.size())));
        end = std::max(end, begin);
        shards[c].train_idx.insert(shards[c].train_idx.end(), members.begin() + std::ptrdiff_t(begin),
                                   members.begin() + std::ptrdiff_t(end));
        begin = end;
      }
    }

    const bool feasible = std::all_of(shards.begin(), shards.end(), [&](const ClientShard& s) {
      return s.train_idx.size() >= std::size_t(min_shard_size);
    });
    if (feasible) {
      for (auto& s : shards) std::sort(s.train_idx.begin(), s.train_idx.end());
      return shards;
    }
  }
  throw ConfigError("partition: Dirichlet draw left a client below min_shard_size after " +
                    std::to_string(kDirichletMaxAttempts) +
                    " attempts; reduce min_shard_size or num_clients, or raise alpha");
}

inline std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  return spec.mode == PartitionMode::IID
             ? partition_iid(ds, spec.num_clients, spec.seed)
             : partition_dirichlet(ds, spec.num_clients, spec.alpha, spec.min_shard_size, spec.seed);
}

/// Seeded shuffle of all the shard's indices, then the first
/// ceil(fraction * size) become training data and the rest evaluation data.
inline ClientShard split_train_eval(const ClientShard& shard, double train_fraction,
                                    std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("split: train_fraction must lie in (0,1)");
  std::vector<std::size_t> all = shard.train_idx;
  all.insert(all.end(), shard.eval_idx.begin(), shard.eval_idx.end());
  std::sort(all.begin(), all.end());
  const std::size_t n_train = std::size_t(std::ceil(train_fraction * double(all.size()) - 1e-9));
  if (all.size() < 2 || n_train == 0 || n_train >= all.size())
    throw ConfigError("split: client " + std::to_string(shard.client_id) + " has " +
                      std::to_string(all.size()) +
                      " samples, too few for a non-empty train and eval split");
  Rng rng = make_rng(seed, "split", {std::uint64_t(shard.client_id)});
  std::shuffle(all.begin(), all.end(), rng);

  ClientShard out;
  out.client_id = shard.client_id;
  out.train_idx.assign(all.begin(), all.begin() + std::ptrdiff_t(n_train));
  out.eval_idx.assign(all.begin() + std::ptrdiff_t(n_train), all.end());
  std::sort(out.train_idx.begin(), out.train_idx.end());
  std::sort(out.eval_idx.begin(), out.eval_idx.end());
  return out;
}

/// Union of every client's evaluation split, sorted and deduplicated.
inline std::vector<std::size_t> build_global_test(std::span<const ClientShard> shards) {
  std::vector<std::size_t> out;
  for (const auto& s : shards) out.insert(out.end(), s.eval_idx.begin(), s.eval_idx.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Per-class counts over the given indices.
inline std::vector<std::size_t> class_histogram(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<std::size_t> h(std::size_t(ds.num_classes), 0);
  for (std::size_t i : idx) ++h[std::size_t(ds.labels[i])];
  return h;
}

/// Shannon entropy (nats) of a count histogram; 0 for an empty histogram.
inline double histogram_entropy(std::span<const std::size_t> counts) {
  const double total = double(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t c : counts)
    if (c > 0) {
      const double p = double(c) / total;
      h -= p * std::log(p);
    }
  return h;
}

/// Mean over shards of the entropy of each shard's class distribution.
inline double mean_shard_entropy(const Dataset& ds, std::span<const ClientShard> shards) {
  double sum = 0.0;
  for (const auto& s : shards) {
    std::vector<std::size_t> all = s.train_idx;
    all.insert(all.end(), s.eval_idx.begin(), s.eval_idx.end());
    const auto h = class_histogram(ds, all);
    sum += histogram_entropy(h);
  }
  return shards.empty() ? 0.0 : sum / double(shards.size());
}

}  // namespace fedcada
