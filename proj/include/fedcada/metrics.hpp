#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedcada/errors.hpp"
#include "fedcada/nn.hpp"
#include "fedcada/optim.hpp"

namespace fedcada {

/// Standard divides by the product of the Gram Frobenius norms; PrintedSquared
/// squares both of them (kept only for comparison, it is not bounded by 1).
enum class CkaNormalization { Standard, PrintedSquared };

/// Linear CKA between two representations with the same number of rows.
inline double linear_cka(const RowMatrix& z1, const RowMatrix& z2,
                         CkaNormalization norm = CkaNormalization::Standard) {
  if (z1.rows() != z2.rows())
    throw ConfigError("linear_cka: row counts differ (" + std::to_string(z1.rows()) + " vs " +
                      std::to_string(z2.rows()) + ")");
  if (z1.rows() < 2) throw ConfigError("linear_cka: need at least two rows");
  const RowMatrix a = z1.rowwise() - z1.colwise().mean();
  const RowMatrix b = z2.rowwise() - z2.colwise().mean();
  if (a.squaredNorm() == 0.0 || b.squaredNorm() == 0.0)
    throw UndefinedSimilarity("linear_cka: centered representation is identically zero");

  const double cross = (a.transpose() * b).squaredNorm();
  const double self_a = (a.transpose() * a).norm();
  const double self_b = (b.transpose() * b).norm();
  if (norm == CkaNormalization::PrintedSquared) return cross / (self_a * self_a * self_b * self_b);
  return cross / (self_a * self_b);
}

enum class MomentKind { First, Second };

/// K x K similarity table with optional cells; an empty cell means the
/// similarity was undefined.
struct CkaMatrix {
  std::size_t k = 0;
  std::vector<std::optional<double>> cells;

  std::optional<double>& at(std::size_t i, std::size_t j) { return cells[i * k + j]; }
  const std::optional<double>& at(std::size_t i, std::size_t j) const { return cells[i * k + j]; }

  /// Mean over defined off-diagonal cells, empty when none are defined.
  std::optional<double> mean_offdiag() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        if (i != j && at(i, j)) {
          sum += *at(i, j);
          ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / double(n);
  }
};

struct MomentCka {
  CkaMatrix mean;                   // unweighted mean over weight layers
  std::vector<CkaMatrix> per_layer; // one per weight layer, in manifest order
};

/// Pairwise layer-wise CKA between clients' moments. Each weight segment is
/// viewed as its fan_in x fan_out matrix; bias segments are skipped. A pair
/// whose CKA is undefined in any layer has an undefined mean cell.
inline MomentCka moment_cka_matrix(std::span<const MomentState> states, const Manifest& manifest,
                                   MomentKind kind = MomentKind::First,
                                   CkaNormalization norm = CkaNormalization::Standard) {
  const std::size_t k = states.size();
  if (k < 2) throw ConfigError("moment_cka_matrix: need at least two clients");
  std::size_t extent = 0;
  for (const auto& s : manifest) extent += s.size();
  for (const auto& st : states)
    if (st.m.size() != extent || st.v.size() != extent)
      throw ConfigError("moment_cka_matrix: moment length does not match manifest");

  std::vector<Segment> layers;
  for (const auto& s : manifest)
    if (s.kind == SegmentKind::Weight) layers.push_back(s);

  auto view = [&](const MomentState& st, const Segment& s) {
    const std::vector<double>& src = kind == MomentKind::First ? st.m : st.v;
    return RowMatrix(Eigen::Map<const RowMatrix>(src.data() + s.offset, Eigen::Index(s.rows),
                                                 Eigen::Index(s.cols)));
  };

  MomentCka out;
  out.mean = {k, std::vector<std::optional<double>>(k * k)};
  out.per_layer.assign(layers.size(), out.mean);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<RowMatrix> mats;
    mats.reserve(k);
    for (const auto& st : states) mats.push_back(view(st, layers[l]));
    for (std::size_t i = 0; i < k; ++i) {
      out.per_layer[l].at(i, i) = 1.0;
      for (std::size_t j = i + 1; j < k; ++j) {
        std::optional<double> c;
        try {
          c = linear_cka(mats[i], mats[j], norm);
        } catch (const UndefinedSimilarity&) {
        }
        out.per_layer[l].at(i, j) = c;
        out.per_layer[l].at(j, i) = c;
      }
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    out.mean.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < k; ++j) {
      std::optional<double> mean = 0.0;
      for (const auto& layer : out.per_layer) {
        if (!layer.at(i, j)) {
          mean.reset();
          break;
        }
        *mean += *layer.at(i, j);
      }
      if (mean) *mean /= double(layers.size());
      out.mean.at(i, j) = mean;
      out.mean.at(j, i) = mean;
    }
  }
  return out;
}

struct RoundLog {
  int round = 0;
  double mean_client_train_loss = 0.0;
  double global_test_loss = 0.0;
  double global_test_acc = 0.0;
  std::optional<double> cka_mean_offdiag_m;
  std::optional<double> cka_mean_offdiag_v;
  std::uint64_t broadcast_bytes = 0;
  std::int64_t wall_ms = 0;
};

inline RoundLog summarize_round(int round, double mean_client_train_loss, const Evaluation& global,
                                const MomentCka* cka_m, const MomentCka* cka_v,
                                std::uint64_t broadcast_bytes, std::int64_t wall_ms) {
  RoundLog log;
  log.round = round;
  log.mean_client_train_loss = mean_client_train_loss;
  log.global_test_loss = global.loss;
  log.global_test_acc = global.accuracy;
  if (cka_m) log.cka_mean_offdiag_m = cka_m->mean.mean_offdiag();
  if (cka_v) log.cka_mean_offdiag_v = cka_v->mean.mean_offdiag();
  log.broadcast_bytes = broadcast_bytes;
  log.wall_ms = wall_ms;
  return log;
}

}  // namespace fedcada
