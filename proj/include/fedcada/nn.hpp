#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedcada/errors.hpp"

namespace fedcada {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class SegmentKind { Weight, Bias };

/// One contiguous slice of a flat parameter vector. Weights are stored
/// row-major as fan_in x fan_out, biases as 1 x fan_out.
struct Segment {
  int layer = 0;
  SegmentKind kind = SegmentKind::Weight;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

using Manifest = std::vector<Segment>;

/// Three weight layers, ReLU hidden activations, softmax output.
class MlpSpec {
public:
  MlpSpec(int d_in, int h1, int h2, int d_out) : dims_{d_in, h1, h2, d_out} {
    for (int d : dims_)
      if (d < 1) throw ConfigError("MlpSpec: every layer dimension must be >= 1");
  }

  const std::array<int, 4>& dims() const { return dims_; }
  int input_dim() const { return dims_[0]; }
  int num_classes() const { return dims_[3]; }
  static constexpr int num_layers() { return 3; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (int l = 0; l < num_layers(); ++l)
      n += std::size_t(dims_[l]) * dims_[l + 1] + dims_[l + 1];
    return n;
  }

  /// Layer order: W0, b0, W1, b1, W2, b2.
  Manifest manifest() const {
    Manifest out;
    std::size_t off = 0;
    for (int l = 0; l < num_layers(); ++l) {
      const auto fan_in = std::size_t(dims_[l]), fan_out = std::size_t(dims_[l + 1]);
      out.push_back({l, SegmentKind::Weight, fan_in, fan_out, off});
      off += fan_in * fan_out;
      out.push_back({l, SegmentKind::Bias, 1, fan_out, off});
      off += fan_out;
    }
    return out;
  }

  bool operator==(const MlpSpec&) const = default;

private:
  std::array<int, 4> dims_;
};

struct ParamVector {
  std::vector<double> values;
  Manifest manifest;

  std::size_t size() const { return values.size(); }

  static ParamVector zeros(const MlpSpec& spec) {
    return {std::vector<double>(spec.param_count(), 0.0), spec.manifest()};
  }
  static ParamVector zeros_like(const ParamVector& p) {
    return {std::vector<double>(p.size(), 0.0), p.manifest};
  }

  std::span<double> segment(const Segment& s) { return {values.data() + s.offset, s.size()}; }
  std::span<const double> segment(const Segment& s) const {
    return {values.data() + s.offset, s.size()};
  }
};

struct Batch {
  RowMatrix features;       // B x d_in
  std::vector<int> labels;  // B entries in [0, d_out)

  std::size_t size() const { return labels.size(); }
};

/// He-style normal weights (std = sqrt(2 / fan_in)) and zero biases.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  ParamVector p = ParamVector::zeros(spec);
  std::mt19937_64 gen(seed);
  for (const Segment& s : p.manifest) {
    if (s.kind != SegmentKind::Weight) continue;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(s.rows)));
    for (double& w : p.segment(s)) w = dist(gen);
  }
  return p;
}

namespace detail {

inline void check_conformance(const MlpSpec& spec, const ParamVector& params) {
  if (params.size() != spec.param_count() || params.manifest != spec.manifest())
    throw ConfigError("parameter vector does not match model spec (expected " +
                      std::to_string(spec.param_count()) + " values, got " +
                      std::to_string(params.size()) + ")");
}

inline void check_batch(const MlpSpec& spec, const Batch& batch) {
  if (batch.size() == 0) throw ConfigError("empty batch");
  if (std::size_t(batch.features.rows()) != batch.size())
    throw ConfigError("batch feature rows do not match label count");
  if (batch.features.cols() != spec.input_dim())
    throw ConfigError("batch feature width " + std::to_string(batch.features.cols()) +
                      " does not match model input " + std::to_string(spec.input_dim()));
  for (int y : batch.labels)
    if (y < 0 || y >= spec.num_classes())
      throw ConfigError("label " + std::to_string(y) + " out of range");
}

inline Eigen::Map<const RowMatrix> weight(const ParamVector& p, int layer) {
  const Segment& s = p.manifest[2 * layer];
  return {p.values.data() + s.offset, Eigen::Index(s.rows), Eigen::Index(s.cols)};
}

inline Eigen::Map<const Eigen::RowVectorXd> bias(const ParamVector& p, int layer) {
  const Segment& s = p.manifest[2 * layer + 1];
  return {p.values.data() + s.offset, Eigen::Index(s.cols)};
}

struct ForwardTrace {
  std::array<RowMatrix, 3> pre;  // pre-activations per layer
  std::array<RowMatrix, 3> act;  // ReLU(pre) for hidden layers; act[2] unused
};

inline ForwardTrace forward(const ParamVector& p, const RowMatrix& x) {
  ForwardTrace t;
  const RowMatrix* in = &x;
  for (int l = 0; l < 3; ++l) {
    t.pre[l] = (*in) * weight(p, l);
    t.pre[l].rowwise() += bias(p, l);
    if (l < 2) {
      t.act[l] = t.pre[l].cwiseMax(0.0);
      in = &t.act[l];
    }
  }
  return t;
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline RowMatrix softmax(const RowMatrix& logits) {
  RowMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline RowMatrix logits(const MlpSpec& spec, const ParamVector& params, const RowMatrix& x) {
  detail::check_conformance(spec, params);
  return detail::forward(params, x).pre[2];
}

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean softmax cross-entropy over the batch and its exact gradient.
inline LossAndGrad loss_and_grad(const MlpSpec& spec, const ParamVector& params,
                                 const Batch& batch) {
  detail::check_conformance(spec, params);
  detail::check_batch(spec, batch);

  const auto n = Eigen::Index(batch.size());
  const detail::ForwardTrace t = detail::forward(params, batch.features);
  const RowMatrix& z = t.pre[2];

  LossAndGrad out{0.0, ParamVector::zeros_like(params)};
  RowMatrix delta(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    const int y = batch.labels[std::size_t(i)];
    out.loss += lse - z(i, y);
    delta.row(i) = (z.row(i).array() - lse).exp();
    delta(i, y) -= 1.0;
  }
  out.loss /= double(n);
  delta /= double(n);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite training loss");

  for (int l = 2; l >= 0; --l) {
    const RowMatrix& input = l == 0 ? batch.features : t.act[l - 1];
    const Segment& ws = out.grad.manifest[2 * l];
    const Segment& bs = out.grad.manifest[2 * l + 1];
    Eigen::Map<RowMatrix>(out.grad.values.data() + ws.offset, Eigen::Index(ws.rows),
                          Eigen::Index(ws.cols)) = input.transpose() * delta;
    Eigen::Map<Eigen::RowVectorXd>(out.grad.values.data() + bs.offset, Eigen::Index(bs.cols)) =
        delta.colwise().sum();
    if (l > 0) {
      RowMatrix back = delta * detail::weight(params, l).transpose();
      delta = back.array() * (t.pre[l - 1].array() > 0.0).cast<double>();
    }
  }
  return out;
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean loss and accuracy; argmax ties resolve to the lowest class index.
inline Evaluation evaluate(const MlpSpec& spec, const ParamVector& params, const Batch& batch) {
  detail::check_conformance(spec, params);
  detail::check_batch(spec, batch);
  const RowMatrix z = detail::forward(params, batch.features).pre[2];
  Evaluation ev;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < z.cols(); ++c)
      if (z(i, c) > z(i, best)) best = c;
    const int y = batch.labels[std::size_t(i)];
    if (best == y) ++correct;
    const double mx = z.row(i).maxCoeff();
    ev.loss += mx + std::log((z.row(i).array() - mx).exp().sum()) - z(i, y);
  }
  ev.loss /= double(z.rows());
  ev.accuracy = double(correct) / double(z.rows());
  return ev;
}

}  // namespace fedcada
