#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "common.hpp"
#include "dataset.hpp"

namespace cflag {

enum class ModelKind { LinearMse, MultinomialLogistic, MlpOneHidden };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::LinearMse: return "linear-mse";
    case ModelKind::MultinomialLogistic: return "multinomial-logistic";
    case ModelKind::MlpOneHidden: return "mlp-1hidden";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "linear-mse") return ModelKind::LinearMse;
  if (s == "multinomial-logistic") return ModelKind::MultinomialLogistic;
  if (s == "mlp-1hidden") return ModelKind::MlpOneHidden;
  throw ConfigError("unknown model kind '" + s + "'");
}

/// Differentiable loss family with exact per-sample gradients.
///
/// Flat parameter layouts:
///   linear-mse            w[p], prediction w.x against the label as a real
///                         target; d = p
///   multinomial-logistic  W[K][p] row-major, logit_k = W_k.x; d = K*p
///   mlp-1hidden           W1[H][p], b1[H], W2[K][H], b2[K], tanh hidden;
///                         d = H*(p+1) + K*(H+1)
///
/// The objective is the mean per-sample loss plus l2_coeff/2 * ||w||^2. A
/// per-sample component carries the full l2 gradient so that the mean of
/// components reproduces the full-batch gradient.
struct LossModel {
  ModelKind kind = ModelKind::MultinomialLogistic;
  int input_dim = 0;
  int num_classes = 0;
  int hidden_dim = 0;  // mlp only
  double l2_coeff = 0.0;

  int param_dim() const {
    switch (kind) {
      case ModelKind::LinearMse: return input_dim;
      case ModelKind::MultinomialLogistic: return num_classes * input_dim;
      case ModelKind::MlpOneHidden:
        return hidden_dim * (input_dim + 1) + num_classes * (hidden_dim + 1);
    }
    return 0;
  }

  bool is_classifier() const { return kind != ModelKind::LinearMse; }
};

namespace detail {

inline void check_shapes(const LossModel& m, const Vec& params, const Dataset& data) {
  if (static_cast<int>(params.size()) != m.param_dim())
    throw ConfigError("parameter vector has dimension " + std::to_string(params.size()) +
                      ", model expects " + std::to_string(m.param_dim()));
  if (data.feature_dim != m.input_dim)
    throw ConfigError("dataset feature_dim " + std::to_string(data.feature_dim) +
                      " does not match model input_dim " + std::to_string(m.input_dim));
  if (data.empty()) throw DataError("empty dataset");
}

inline void check_label(const LossModel& m, int y) {
  if (y < 0 || y >= m.num_classes)
    throw DataError("label " + std::to_string(y) + " outside [0, " +
                    std::to_string(m.num_classes) + ")");
}

// Stable log-sum-exp pieces shared by loss and gradient paths.
inline double log_sum_exp(const Vec& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline void logits_of(const LossModel& m, const Vec& w, std::span<const double> x, Vec& z) {
  const int p = m.input_dim;
  const int K = m.num_classes;
  z.assign(K, 0.0);
  if (m.kind == ModelKind::MultinomialLogistic) {
    for (int k = 0; k < K; ++k) {
      double s = 0.0;
      for (int i = 0; i < p; ++i) s += w[k * p + i] * x[i];
      z[k] = s;
    }
    return;
  }
  // mlp-1hidden
  const int H = m.hidden_dim;
  const double* W1 = w.data();
  const double* b1 = W1 + H * p;
  const double* W2 = b1 + H;
  const double* b2 = W2 + K * H;
  Vec h(H);
  for (int j = 0; j < H; ++j) {
    double a = b1[j];
    for (int i = 0; i < p; ++i) a += W1[j * p + i] * x[i];
    h[j] = std::tanh(a);
  }
  for (int k = 0; k < K; ++k) {
    double s = b2[k];
    for (int j = 0; j < H; ++j) s += W2[k * H + j] * h[j];
    z[k] = s;
  }
}

inline double sample_loss(const LossModel& m, const Vec& w, std::span<const double> x, int y) {
  if (m.kind == ModelKind::LinearMse) {
    double r = 0.0;
    for (int i = 0; i < m.input_dim; ++i) r += w[i] * x[i];
    r -= static_cast<double>(y);
    return 0.5 * r * r;
  }
  check_label(m, y);
  Vec z;
  logits_of(m, w, x, z);
  return log_sum_exp(z) - z[y];
}

// Accumulates the data part of the row gradient into g (no l2 term).
inline void add_sample_grad(const LossModel& m, const Vec& w, std::span<const double> x, int y,
                            Vec& g) {
  const int p = m.input_dim;
  if (m.kind == ModelKind::LinearMse) {
    double r = 0.0;
    for (int i = 0; i < p; ++i) r += w[i] * x[i];
    r -= static_cast<double>(y);
    for (int i = 0; i < p; ++i) g[i] += r * x[i];
    return;
  }
  check_label(m, y);
  const int K = m.num_classes;
  Vec z;
  logits_of(m, w, x, z);
  double lse = log_sum_exp(z);
  Vec dz(K);
  for (int k = 0; k < K; ++k) dz[k] = std::exp(z[k] - lse) - (k == y ? 1.0 : 0.0);
  if (m.kind == ModelKind::MultinomialLogistic) {
    for (int k = 0; k < K; ++k)
      for (int i = 0; i < p; ++i) g[k * p + i] += dz[k] * x[i];
    return;
  }
  const int H = m.hidden_dim;
  const double* W1 = w.data();
  const double* b1 = W1 + H * p;
  const double* W2 = b1 + H;
  double* gW1 = g.data();
  double* gb1 = gW1 + H * p;
  double* gW2 = gb1 + H;
  double* gb2 = gW2 + K * H;
  Vec h(H);
  for (int j = 0; j < H; ++j) {
    double a = b1[j];
    for (int i = 0; i < p; ++i) a += W1[j * p + i] * x[i];
    h[j] = std::tanh(a);
  }
  for (int k = 0; k < K; ++k) {
    for (int j = 0; j < H; ++j) gW2[k * H + j] += dz[k] * h[j];
    gb2[k] += dz[k];
  }
  for (int j = 0; j < H; ++j) {
    double dh = 0.0;
    for (int k = 0; k < K; ++k) dh += dz[k] * W2[k * H + j];
    double da = dh * (1.0 - h[j] * h[j]);
    for (int i = 0; i < p; ++i) gW1[j * p + i] += da * x[i];
    gb1[j] += da;
  }
}

}  // namespace detail

inline double loss(const LossModel& m, const Vec& params, const Dataset& data) {
  detail::check_shapes(m, params, data);
  double s = 0.0;
  for (int r = 0; r < data.rows(); ++r)
    s += detail::sample_loss(m, params, data.row(r), data.labels[r]);
  double out = s / data.rows() + 0.5 * m.l2_coeff * norm_sq(params);
  if (!std::isfinite(out)) throw DataError("non-finite loss");
  return out;
}

// Exact full-batch mean gradient, accumulated in row order.
inline Vec grad(const LossModel& m, const Vec& params, const Dataset& data) {
  detail::check_shapes(m, params, data);
  Vec g = zeros(params.size());
  for (int r = 0; r < data.rows(); ++r)
    detail::add_sample_grad(m, params, data.row(r), data.labels[r], g);
  const double inv_n = 1.0 / data.rows();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] * inv_n + m.l2_coeff * params[i];
  check_finite(g, "gradient");
  return g;
}

// Gradient of the j-th per-sample loss; carries the full l2 term so the mean
// of components over all rows equals grad().
inline Vec grad_component(const LossModel& m, const Vec& params, const Dataset& data, int j) {
  detail::check_shapes(m, params, data);
  if (j < 0 || j >= data.rows())
    throw DataError("sample index " + std::to_string(j) + " out of range");
  Vec g = zeros(params.size());
  detail::add_sample_grad(m, params, data.row(j), data.labels[j], g);
  axpy(m.l2_coeff, params, g);
  check_finite(g, "component gradient");
  return g;
}

// Fraction of argmax-correct rows; ties break toward the smallest class id.
inline double accuracy(const LossModel& m, const Vec& params, const Dataset& data) {
  if (!m.is_classifier()) throw ConfigError("accuracy is undefined for linear-mse models");
  detail::check_shapes(m, params, data);
  int correct = 0;
  Vec z;
  for (int r = 0; r < data.rows(); ++r) {
    detail::check_label(m, data.labels[r]);
    detail::logits_of(m, params, data.row(r), z);
    int arg = 0;
    for (int k = 1; k < m.num_classes; ++k)
      if (z[k] > z[arg]) arg = k;
    if (arg == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / data.rows();
}

namespace detail {

// Largest eigenvalue of X^T X by power iteration (relative tolerance 1e-8,
// at most 10000 iterations).
inline double largest_eig_gram(const Dataset& data) {
  const int p = data.feature_dim;
  const int n = data.rows();
  Vec a(static_cast<std::size_t>(p) * p, 0.0);
  for (int r = 0; r < n; ++r) {
    auto x = data.row(r);
    for (int i = 0; i < p; ++i)
      for (int k = 0; k < p; ++k) a[static_cast<std::size_t>(i) * p + k] += x[i] * x[k];
  }
  Vec v(p);
  for (int i = 0; i < p; ++i) v[i] = 1.0 + 1e-3 * i;  // deterministic, symmetry-breaking
  double nv = norm(v);
  for (int i = 0; i < p; ++i) v[i] /= nv;
  double lambda = 0.0;
  bool have_prev = false;
  Vec w(p);
  for (int iter = 0; iter < 10000; ++iter) {
    for (int i = 0; i < p; ++i) {
      double s = 0.0;
      for (int k = 0; k < p; ++k) s += a[static_cast<std::size_t>(i) * p + k] * v[k];
      w[i] = s;
    }
    double next = dot(v, w);
    double nw = norm(w);
    if (nw == 0.0) return 0.0;
    for (int i = 0; i < p; ++i) v[i] = w[i] / nw;
    if (have_prev && std::abs(next - lambda) <= 1e-8 * std::max(std::abs(next), 1e-300))
      return next;
    lambda = next;
    have_prev = true;
  }
  throw ConfigError("power iteration did not converge estimating L");
}

}  // namespace detail

// Smoothness constant of the mean loss: exact for linear-mse, an upper bound
// for multinomial-logistic. MLP smoothness must be configured by the caller.
inline double estimate_L(const LossModel& m, const Dataset& data) {
  if (data.empty()) throw DataError("empty dataset");
  if (data.feature_dim != m.input_dim)
    throw ConfigError("dataset feature_dim does not match model input_dim");
  switch (m.kind) {
    case ModelKind::LinearMse:
      return detail::largest_eig_gram(data) / data.rows() + m.l2_coeff;
    case ModelKind::MultinomialLogistic:
      return 0.5 * detail::largest_eig_gram(data) / data.rows() + m.l2_coeff;
    case ModelKind::MlpOneHidden:
      throw ConfigError("estimate_L is unavailable for mlp-1hidden; configure L explicitly");
  }
  return 0.0;
}

}  // namespace cflag
