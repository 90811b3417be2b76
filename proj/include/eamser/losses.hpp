#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eamser/error.hpp"
#include "eamser/nn.hpp"

namespace eamser {

/// Lower clip applied to predicted probabilities inside logarithms.
inline constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double kl = 1.0;
  double focal = 1.0;
  double center = 0.1;
  double supcon = 0.1;
};

struct LossConfig {
  double gamma = 2.0;
  double tau = 0.07;
  LossWeights lambdas;
  int proj_dim = 64;
  bool cb_enabled = true;
  bool normalize_embeddings = true;

  void validate() const {
    if (!(gamma >= 0.0)) throw Error(Errc::invalid_argument, "gamma must be >= 0");
    if (!(tau > 0.0)) throw Error(Errc::invalid_argument, "tau must be > 0");
    const LossWeights& l = lambdas;
    if (!(l.kl >= 0 && l.focal >= 0 && l.center >= 0 && l.supcon >= 0))
      throw Error(Errc::invalid_argument, "loss weights must be >= 0");
    if (l.kl + l.focal + l.center + l.supcon <= 0.0)
      throw Error(Errc::invalid_argument, "at least one loss weight must be positive");
    if (proj_dim < 1) throw Error(Errc::invalid_argument, "proj_dim must be positive");
  }
};

template <typename Scalar, typename Grad>
struct LossValue {
  Scalar value;
  Grad grad;
};

namespace detail {

template <typename Scalar>
void check_distributions(const Vector<Scalar>& y, const Vector<Scalar>& y_hat) {
  require_shape(y.size() == y_hat.size() && y.size() > 0,
                "target has " + std::to_string(y.size()) + " classes, prediction " +
                    std::to_string(y_hat.size()));
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] > 0 && !(y_hat[i] > 0))
      throw Error(Errc::domain_error,
                  "predicted probability " + std::to_string(static_cast<double>(y_hat[i])) +
                      " for class " + std::to_string(i) + " with positive target mass");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// sum_i y_i log(y_i / y_hat_i); terms with y_i = 0 vanish. Gradient is with
// respect to y_hat.

template <typename Scalar>
LossValue<Scalar, Vector<Scalar>> kl_div(const Vector<Scalar>& y, const Vector<Scalar>& y_hat) {
  detail::check_distributions(y, y_hat);
  LossValue<Scalar, Vector<Scalar>> out{Scalar(0), Vector<Scalar>::Zero(y.size())};
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] == Scalar(0)) continue;
    const Scalar p = std::max(y_hat[i], Scalar(kProbFloor));
    out.value += y[i] * (std::log(y[i]) - std::log(p));
    out.grad[i] = -y[i] / p;
  }
  return out;
}

// ---------------------------------------------------------------------------
// -sum_i (1 - y_hat_i)^gamma log(y_hat_i) y_i. Gradient is with respect to y_hat.

template <typename Scalar>
LossValue<Scalar, Vector<Scalar>> focal(const Vector<Scalar>& y, const Vector<Scalar>& y_hat,
                                        Scalar gamma) {
  detail::check_distributions(y, y_hat);
  if (!(gamma >= 0)) throw Error(Errc::invalid_argument, "gamma must be >= 0");
  LossValue<Scalar, Vector<Scalar>> out{Scalar(0), Vector<Scalar>::Zero(y.size())};
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] == Scalar(0)) continue;
    const Scalar p = std::max(y_hat[i], Scalar(kProbFloor));
    const Scalar q = std::max(Scalar(1) - p, Scalar(0));
    const Scalar log_p = std::log(p);
    const Scalar mod = gamma == Scalar(0) ? Scalar(1) : std::pow(q, gamma);
    out.value -= y[i] * mod * log_p;
    // d/dp of the modulating factor; its product with log p tends to 0 as q -> 0.
    const Scalar dmod = (gamma == Scalar(0) || q == Scalar(0))
                            ? Scalar(0)
                            : -gamma * std::pow(q, gamma - Scalar(1));
    out.grad[i] = -y[i] * (dmod * log_p + mod / p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Center loss: (1/B) sum_i ||f_i - c_{label_i}||^2 over the rows of `features`.

template <typename Scalar>
struct CenterLoss {
  Scalar value;
  Matrix<Scalar> grad_features;  // B x P
  Matrix<Scalar> grad_centers;   // K x P
};

namespace detail {

inline void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index classes) {
  require_shape(static_cast<Eigen::Index>(labels.size()) == rows,
                std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw Error(Errc::invalid_class, "label " + std::to_string(l) + " not in [0, " +
                                           std::to_string(classes) + ")");
}

}  // namespace detail

template <typename Scalar>
CenterLoss<Scalar> center_loss(const Matrix<Scalar>& features, std::span<const int> labels,
                               const Matrix<Scalar>& centers) {
  detail::require_shape(features.rows() >= 1, "center_loss: empty batch");
  detail::require_shape(features.cols() == centers.cols(),
                        "center_loss: feature and center dimensions differ");
  detail::check_labels(labels, features.rows(), centers.rows());

  const auto b = static_cast<Scalar>(features.rows());
  CenterLoss<Scalar> out{Scalar(0), Matrix<Scalar>(features.rows(), features.cols()),
                         Matrix<Scalar>::Zero(centers.rows(), centers.cols())};
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const auto diff = (features.row(i) - centers.row(labels[i])).eval();
    out.value += diff.squaredNorm();
    out.grad_features.row(i) = (Scalar(2) / b) * diff;
    out.grad_centers.row(labels[i]) -= (Scalar(2) / b) * diff;
  }
  out.value /= b;
  return out;
}

/// c_k += lr * mean_{i: label_i = k}(f_i - c_k); classes absent from the batch
/// keep their center.
template <typename Scalar>
Matrix<Scalar> update_centers(const Matrix<Scalar>& centers, const Matrix<Scalar>& features,
                              std::span<const int> labels, Scalar lr) {
  detail::require_shape(features.cols() == centers.cols(),
                        "update_centers: feature and center dimensions differ");
  detail::check_labels(labels, features.rows(), centers.rows());
  Matrix<Scalar> delta = Matrix<Scalar>::Zero(centers.rows(), centers.cols());
  std::vector<int> counts(static_cast<std::size_t>(centers.rows()), 0);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    delta.row(labels[i]) += features.row(i) - centers.row(labels[i]);
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  Matrix<Scalar> out = centers;
  for (Eigen::Index k = 0; k < centers.rows(); ++k) {
    const int n = counts[static_cast<std::size_t>(k)];
    if (n > 0) out.row(k) += (lr / static_cast<Scalar>(n)) * delta.row(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context broadcasting: every frame becomes (frame + frame mean) / 2. The map
// is symmetric, so the backward pass is the same operation.

template <typename Scalar>
Matrix<Scalar> context_broadcast(const Matrix<Scalar>& x) {
  detail::require_shape(x.rows() >= 1, "context_broadcast: no frames");
  Matrix<Scalar> y = x;
  y.rowwise() += x.colwise().mean();
  return y * Scalar(0.5);
}

template <typename Scalar>
Matrix<Scalar> context_broadcast_backward(const Matrix<Scalar>& dy) {
  return context_broadcast(dy);
}

// ---------------------------------------------------------------------------
// Supervised contrastive loss over N anchors (rows of z). For anchor i with
// positives P(i) (same label, not i) and candidates A(i) (everyone but i):
//   l_i = -1/|P(i)| sum_{p in P(i)} log softmax_{A(i)}(z_i . z / tau)_p
// The sum of l_i is divided by `denominator` (N when left at 0). Anchors
// without positives contribute nothing.

template <typename Scalar>
LossValue<Scalar, Matrix<Scalar>> supcon(const Matrix<Scalar>& z, std::span<const int> labels,
                                         Scalar tau, bool normalize, Scalar denominator = 0) {
  const Eigen::Index n = z.rows();
  if (n < 2) throw Error(Errc::degenerate_batch, "supcon needs at least two anchors");
  detail::require_shape(static_cast<Eigen::Index>(labels.size()) == n,
                        "supcon: one label per anchor required");
  if (!(tau > 0)) throw Error(Errc::invalid_argument, "tau must be > 0");
  if (denominator == Scalar(0)) denominator = static_cast<Scalar>(n);

  Vector<Scalar> norms = z.rowwise().norm();
  Matrix<Scalar> zn = z;
  if (normalize) {
    if ((norms.array() == Scalar(0)).any())
      throw Error(Errc::domain_error, "cannot normalize a zero embedding");
    zn = norms.cwiseInverse().asDiagonal() * z;
  }
  const Matrix<Scalar> sim = (zn * zn.transpose()) / tau;

  Scalar total = 0;
  Matrix<Scalar> g = Matrix<Scalar>::Zero(n, n);  // dloss / dsim
  for (Eigen::Index i = 0; i < n; ++i) {
    int positives = 0;
    Scalar row_max = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == i) continue;
      if (labels[k] == labels[i]) ++positives;
      row_max = std::max(row_max, sim(i, k));
    }
    if (positives == 0) continue;

    Scalar sum_exp = 0;
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) sum_exp += std::exp(sim(i, k) - row_max);
    const Scalar lse = row_max + std::log(sum_exp);

    Scalar pos_sum = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == i) continue;
      const bool pos = labels[k] == labels[i];
      if (pos) pos_sum += sim(i, k);
      g(i, k) = std::exp(sim(i, k) - lse) - (pos ? Scalar(1) / positives : Scalar(0));
    }
    total += lse - pos_sum / positives;
  }
  g /= denominator;

  Matrix<Scalar> d_zn = ((g + g.transpose()) * zn) / tau;
  Matrix<Scalar> d_z = d_zn;
  if (normalize) {
    for (Eigen::Index r = 0; r < n; ++r)
      d_z.row(r) = (d_zn.row(r) - zn.row(r) * zn.row(r).dot(d_zn.row(r))) / norms[r];
  }
  return {total / denominator, std::move(d_z)};
}

/// Frame-level form: every frame of utterance b is an anchor labelled
/// labels[b]; the total is divided by the overall frame count (B x T).
template <typename Scalar>
LossValue<Scalar, std::vector<Matrix<Scalar>>> supcon_frames(
    const std::vector<Matrix<Scalar>>& frames, std::span<const int> labels, Scalar tau,
    bool normalize) {
  detail::require_shape(frames.size() == labels.size(), "supcon_frames: one label per utterance");
  if (frames.empty()) throw Error(Errc::degenerate_batch, "empty batch");
  const Eigen::Index dim = frames.front().cols();
  Eigen::Index total_rows = 0;
  for (const auto& f : frames) {
    detail::require_shape(f.cols() == dim, "supcon_frames: embedding widths differ");
    total_rows += f.rows();
  }

  Matrix<Scalar> z(total_rows, dim);
  std::vector<int> anchor_labels;
  anchor_labels.reserve(static_cast<std::size_t>(total_rows));
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < frames.size(); ++b) {
    z.middleRows(row, frames[b].rows()) = frames[b];
    anchor_labels.insert(anchor_labels.end(), static_cast<std::size_t>(frames[b].rows()),
                         labels[b]);
    row += frames[b].rows();
  }

  auto flat = supcon<Scalar>(z, anchor_labels, tau, normalize);
  LossValue<Scalar, std::vector<Matrix<Scalar>>> out{flat.value, {}};
  row = 0;
  for (const auto& f : frames) {
    out.grad.push_back(flat.grad.middleRows(row, f.rows()));
    row += f.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------

struct LossReport {
  double kl = 0.0;
  double focal = 0.0;
  double center = 0.0;
  double supcon = 0.0;
  double total = 0.0;
};

/// Weighted sum of already-computed terms. The per-term fields are copied
/// through unchanged.
inline LossReport combined_loss(const LossReport& parts, const LossWeights& w) {
  LossReport r = parts;
  r.total = w.kl * parts.kl + w.focal * parts.focal + w.center * parts.center +
            w.supcon * parts.supcon;
  return r;
}

}  // namespace eamser
