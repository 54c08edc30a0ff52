#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedcada/errors.hpp"

namespace fedcada {

struct AdamHyper {
  double eta_l = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;

  void validate() const {
    if (!(eta_l > 0.0)) throw ConfigError("adam: eta_l must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must lie in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must lie in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be > 0");
  }
};

struct MomentState {
  std::vector<double> m;
  std::vector<double> v;

  static MomentState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
  std::size_t size() const { return m.size(); }
  bool empty() const { return m.empty(); }
  bool operator==(const MomentState&) const = default;
};

/// Bias-correction denominator family. VanillaSubtract is standard Adam
/// (1 - b^t); the Add* modes divide by 1 + f(b^t) for a shrinking f.
enum class CorrectionMode { VanillaSubtract, AddGeometric, AddSquare, AddSine, AddSqrt, NoCorrection };

inline constexpr CorrectionMode kAllCorrectionModes[] = {
    CorrectionMode::VanillaSubtract, CorrectionMode::AddGeometric, CorrectionMode::AddSquare,
    CorrectionMode::AddSine,         CorrectionMode::AddSqrt,      CorrectionMode::NoCorrection};

inline constexpr CorrectionMode kAddModes[] = {CorrectionMode::AddGeometric, CorrectionMode::AddSquare,
                                               CorrectionMode::AddSine, CorrectionMode::AddSqrt};

inline std::string_view to_string(CorrectionMode mode) {
  switch (mode) {
    case CorrectionMode::VanillaSubtract: return "vanilla";
    case CorrectionMode::AddGeometric: return "add_geometric";
    case CorrectionMode::AddSquare: return "add_square";
    case CorrectionMode::AddSine: return "add_sine";
    case CorrectionMode::AddSqrt: return "add_sqrt";
    case CorrectionMode::NoCorrection: return "none";
  }
  return "?";
}

inline std::optional<CorrectionMode> parse_correction_mode(std::string_view name) {
  for (CorrectionMode m : kAllCorrectionModes)
    if (to_string(m) == name) return m;
  return std::nullopt;
}

/// The amount the denominator departs from 1 for a given b^t: the
/// denominator is 1 - excess for VanillaSubtract, 1 + excess for Add*,
/// and exactly 1 for NoCorrection (excess 0).
inline double correction_excess(CorrectionMode mode, double beta, int t) {
  const double bt = std::pow(beta, t);
  switch (mode) {
    case CorrectionMode::VanillaSubtract:
    case CorrectionMode::AddGeometric: return bt;
    case CorrectionMode::AddSquare: return bt * bt;
    case CorrectionMode::AddSine: return std::sin(bt);
    case CorrectionMode::AddSqrt: return std::sqrt(bt);
    case CorrectionMode::NoCorrection: return 0.0;
  }
  return 0.0;
}

inline double correction_denominator(CorrectionMode mode, double beta, int t) {
  const double e = correction_excess(mode, beta, t);
  return mode == CorrectionMode::VanillaSubtract ? 1.0 - e : 1.0 + e;
}

/// (d1, d2) dividing the first and second moments at correction clock t >= 1.
inline std::pair<double, double> correction_denominators(CorrectionMode mode, double beta1,
                                                         double beta2, int t) {
  return {correction_denominator(mode, beta1, t), correction_denominator(mode, beta2, t)};
}

/// d1 for t = 1..T.
inline std::vector<double> denominator_curve(CorrectionMode mode, double beta, int rounds) {
  std::vector<double> out;
  out.reserve(std::size_t(rounds > 0 ? rounds : 0));
  for (int t = 1; t <= rounds; ++t) out.push_back(correction_denominator(mode, beta, t));
  return out;
}

/// One Adam step in place. Epsilon is added outside the square root.
inline void adam_step(std::span<double> params, std::span<const double> grad, MomentState& state,
                      const AdamHyper& hyper, CorrectionMode mode, int t) {
  if (grad.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw ConfigError("adam_step: length mismatch (params " + std::to_string(params.size()) +
                      ", grad " + std::to_string(grad.size()) + ", moments " +
                      std::to_string(state.m.size()) + "/" + std::to_string(state.v.size()) + ")");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw NumericError("adam_step: non-finite gradient at coordinate " + std::to_string(i));

  const auto [d1, d2] = correction_denominators(mode, hyper.beta1, hyper.beta2, t);
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g);
    const double m_hat = state.m[i] / d1;
    const double v_hat = state.v[i] / d2;
    params[i] -= hyper.eta_l * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
  }
}

inline void sgd_step(std::span<double> params, std::span<const double> grad, double eta) {
  if (grad.size() != params.size())
    throw ConfigError("sgd_step: length mismatch (params " + std::to_string(params.size()) +
                      ", grad " + std::to_string(grad.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= eta * grad[i];
}

}  // namespace fedcada
