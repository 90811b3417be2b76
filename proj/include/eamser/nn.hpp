#pragma once

// Dense forward/backward kernels. Row convention throughout: a sequence is a
// T x D matrix with one frame per row, and linear layers compute x * W + b.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eamser/error.hpp"

namespace eamser {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

namespace detail {

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::shape_mismatch, what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear layer

template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;  // in x out
  Vector<Scalar> bias;    // out

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }

  static Linear zero(Eigen::Index in, Eigen::Index out) {
    return {Matrix<Scalar>::Zero(in, out), Vector<Scalar>::Zero(out)};
  }
};

template <typename Scalar>
struct LinearGrad {
  Linear<Scalar> params;
  Matrix<Scalar> input;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename Scalar, typename Gen>
Matrix<Scalar> glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Gen& gen) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<Scalar> w(fan_in, fan_out);
  // Fill in row-major order so the draw sequence doesn't depend on storage.
  for (Eigen::Index r = 0; r < fan_in; ++r)
    for (Eigen::Index c = 0; c < fan_out; ++c) w(r, c) = static_cast<Scalar>(dist(gen));
  return w;
}

template <typename Scalar, typename Gen>
Linear<Scalar> init_linear(Eigen::Index in, Eigen::Index out, Gen& gen) {
  return {glorot_uniform<Scalar>(in, out, gen), Vector<Scalar>::Zero(out)};
}

template <typename Scalar>
Matrix<Scalar> linear_forward(const Matrix<Scalar>& x, const Linear<Scalar>& p) {
  detail::require_shape(x.cols() == p.weight.rows() && p.bias.size() == p.weight.cols(),
                        "linear_forward: input has " + std::to_string(x.cols()) +
                            " columns, weight expects " + std::to_string(p.weight.rows()));
  Matrix<Scalar> y = x * p.weight;
  y.rowwise() += p.bias.transpose();
  return y;
}

/// Single-vector form: y = W^T x + b.
template <typename Scalar>
Vector<Scalar> linear_forward(const Vector<Scalar>& x, const Linear<Scalar>& p) {
  detail::require_shape(x.size() == p.weight.rows() && p.bias.size() == p.weight.cols(),
                        "linear_forward: vector length mismatch");
  return p.weight.transpose() * x + p.bias;
}

template <typename Scalar>
LinearGrad<Scalar> linear_backward(const Matrix<Scalar>& x, const Linear<Scalar>& p,
                                   const Matrix<Scalar>& dy) {
  detail::require_shape(dy.rows() == x.rows() && dy.cols() == p.weight.cols() &&
                            x.cols() == p.weight.rows(),
                        "linear_backward: gradient shape mismatch");
  return {{x.transpose() * dy, dy.colwise().sum().transpose()}, dy * p.weight.transpose()};
}

template <typename Scalar>
struct LinearVecGrad {
  Linear<Scalar> params;
  Vector<Scalar> input;
};

template <typename Scalar>
LinearVecGrad<Scalar> linear_backward(const Vector<Scalar>& x, const Linear<Scalar>& p,
                                      const Vector<Scalar>& dy) {
  detail::require_shape(dy.size() == p.weight.cols() && x.size() == p.weight.rows(),
                        "linear_backward: gradient shape mismatch");
  return {{x * dy.transpose(), dy}, p.weight * dy};
}

// ---------------------------------------------------------------------------
// Softmax

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& x) {
  Vector<Scalar> e = (x.array() - x.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    y.row(r) = e / e.sum();
  }
  return y;
}

/// Vector-Jacobian product of softmax given its output y.
template <typename Scalar>
Vector<Scalar> softmax_backward(const Vector<Scalar>& y, const Vector<Scalar>& dy) {
  return (y.array() * (dy.array() - y.dot(dy))).matrix();
}

template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& y, const Matrix<Scalar>& dy) {
  Vector<Scalar> dots = (y.array() * dy.array()).rowwise().sum().matrix();
  return (y.array() * (dy.colwise() - dots).array()).matrix();
}

// ---------------------------------------------------------------------------
// Multi-head self-attention with residual: X' = X + (concat_h A_h V_h) Wo + bo
// where A_h = softmax(Q_h K_h^T / sqrt(D/H)).
//
// Heads own contiguous column blocks of the D x D projections. There is no
// key bias: it shifts each score row by a constant and cancels in softmax.

template <typename Scalar>
struct MsaParams {
  int heads = 16;
  Matrix<Scalar> wq, wk, wv, wo;  // D x D
  Vector<Scalar> bq, bv, bo;      // D

  Eigen::Index dim() const { return wq.rows(); }
  Eigen::Index head_dim() const { return dim() / heads; }

  static MsaParams zero(Eigen::Index d, int heads) {
    MsaParams p;
    p.heads = heads;
    p.wq = p.wk = p.wv = p.wo = Matrix<Scalar>::Zero(d, d);
    p.bq = p.bv = p.bo = Vector<Scalar>::Zero(d);
    return p;
  }

  void validate() const {
    const Eigen::Index d = dim();
    detail::require_shape(heads > 0 && d > 0 && d % heads == 0,
                          "MSA feature dimension " + std::to_string(d) +
                              " not divisible by " + std::to_string(heads) + " heads");
    detail::require_shape(wq.cols() == d && wk.rows() == d && wk.cols() == d && wv.rows() == d &&
                              wv.cols() == d && wo.rows() == d && wo.cols() == d &&
                              bq.size() == d && bv.size() == d && bo.size() == d,
                          "MSA parameter shapes inconsistent");
  }
};

template <typename Scalar, typename Gen>
MsaParams<Scalar> init_msa(Eigen::Index d, int heads, Gen& gen) {
  MsaParams<Scalar> p = MsaParams<Scalar>::zero(d, heads);
  p.validate();
  p.wq = glorot_uniform<Scalar>(d, d, gen);
  p.wk = glorot_uniform<Scalar>(d, d, gen);
  p.wv = glorot_uniform<Scalar>(d, d, gen);
  p.wo = glorot_uniform<Scalar>(d, d, gen);
  return p;
}

template <typename Scalar>
struct MsaCache {
  Matrix<Scalar> x, q, k, v;
  std::vector<Matrix<Scalar>> attn;  // per head, T x T
  Matrix<Scalar> context;            // T x D, heads concatenated
};

template <typename Scalar>
struct MsaGrad {
  MsaParams<Scalar> params;
  Matrix<Scalar> input;
};

template <typename Scalar>
Matrix<Scalar> msa_forward(const Matrix<Scalar>& x, const MsaParams<Scalar>& p,
                           MsaCache<Scalar>* cache = nullptr) {
  p.validate();
  detail::require_shape(x.cols() == p.dim() && x.rows() >= 1,
                        "msa_forward: input has " + std::to_string(x.cols()) +
                            " features, parameters expect " + std::to_string(p.dim()));
  const Eigen::Index t = x.rows();
  const Eigen::Index dh = p.head_dim();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Matrix<Scalar> q = x * p.wq;
  q.rowwise() += p.bq.transpose();
  Matrix<Scalar> k = x * p.wk;
  Matrix<Scalar> v = x * p.wv;
  v.rowwise() += p.bv.transpose();

  Matrix<Scalar> context(t, p.dim());
  std::vector<Matrix<Scalar>> attn;
  attn.reserve(static_cast<std::size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    const Eigen::Index c0 = h * dh;
    Matrix<Scalar> scores = (q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose()) * inv_sqrt;
    Matrix<Scalar> a = softmax_rows(scores);
    context.middleCols(c0, dh).noalias() = a * v.middleCols(c0, dh);
    attn.push_back(std::move(a));
  }

  Matrix<Scalar> out = x + context * p.wo;
  out.rowwise() += p.bo.transpose();

  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->context = std::move(context);
  }
  return out;
}

template <typename Scalar>
MsaGrad<Scalar> msa_backward(const MsaCache<Scalar>& cache, const MsaParams<Scalar>& p,
                             const Matrix<Scalar>& d_out) {
  detail::require_shape(d_out.rows() == cache.x.rows() && d_out.cols() == p.dim(),
                        "msa_backward: gradient shape mismatch");
  const Eigen::Index dh = p.head_dim();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  MsaGrad<Scalar> g;
  g.params.heads = p.heads;
  g.params.wo = cache.context.transpose() * d_out;
  g.params.bo = d_out.colwise().sum().transpose();
  const Matrix<Scalar> d_context = d_out * p.wo.transpose();

  Matrix<Scalar> dq(cache.q.rows(), cache.q.cols());
  Matrix<Scalar> dk(dq.rows(), dq.cols());
  Matrix<Scalar> dv(dq.rows(), dq.cols());
  for (int h = 0; h < p.heads; ++h) {
    const Eigen::Index c0 = h * dh;
    const Matrix<Scalar>& a = cache.attn[static_cast<std::size_t>(h)];
    const auto dctx_h = d_context.middleCols(c0, dh);
    dv.middleCols(c0, dh).noalias() = a.transpose() * dctx_h;
    const Matrix<Scalar> da = dctx_h * cache.v.middleCols(c0, dh).transpose();
    const Matrix<Scalar> ds = softmax_rows_backward(a, da) * inv_sqrt;
    dq.middleCols(c0, dh).noalias() = ds * cache.k.middleCols(c0, dh);
    dk.middleCols(c0, dh).noalias() = ds.transpose() * cache.q.middleCols(c0, dh);
  }

  g.params.wq = cache.x.transpose() * dq;
  g.params.bq = dq.colwise().sum().transpose();
  g.params.wk = cache.x.transpose() * dk;
  g.params.wv = cache.x.transpose() * dv;
  g.params.bv = dv.colwise().sum().transpose();
  g.input = d_out + dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Frame-attention pooling: a = X' w + b (one score per frame), f = X'^T a.
// With `normalize` the scores go through a softmax over frames first.

template <typename Scalar>
struct PoolParams {
  Vector<Scalar> weight;  // D
  Scalar bias = Scalar(0);

  static PoolParams zero(Eigen::Index d) { return {Vector<Scalar>::Zero(d), Scalar(0)}; }
};

template <typename Scalar, typename Gen>
PoolParams<Scalar> init_pool(Eigen::Index d, Gen& gen) {
  return {glorot_uniform<Scalar>(d, 1, gen).col(0), Scalar(0)};
}

template <typename Scalar>
struct PoolGrad {
  PoolParams<Scalar> params;
  Matrix<Scalar> input;
};

/// Per-frame weights actually applied in the pooling sum.
template <typename Scalar>
Vector<Scalar> frame_attention_weights(const Matrix<Scalar>& xp, const PoolParams<Scalar>& p,
                                       bool normalize) {
  detail::require_shape(xp.cols() == p.weight.size() && xp.rows() >= 1,
                        "frame_attention_pool: input has " + std::to_string(xp.cols()) +
                            " features, FC expects " + std::to_string(p.weight.size()));
  Vector<Scalar> a = xp * p.weight;
  a.array() += p.bias;
  return normalize ? softmax(a) : a;
}

template <typename Scalar>
Vector<Scalar> frame_attention_pool(const Matrix<Scalar>& xp, const PoolParams<Scalar>& p,
                                    bool normalize = false) {
  return xp.transpose() * frame_attention_weights(xp, p, normalize);
}

template <typename Scalar>
PoolGrad<Scalar> frame_attention_pool_backward(const Matrix<Scalar>& xp,
                                               const PoolParams<Scalar>& p, bool normalize,
                                               const Vector<Scalar>& df) {
  detail::require_shape(df.size() == xp.cols(), "frame_attention_pool_backward: bad gradient");
  const Vector<Scalar> weights = frame_attention_weights(xp, p, normalize);
  const Vector<Scalar> d_weights = xp * df;
  const Vector<Scalar> d_scores = normalize ? softmax_backward(weights, d_weights) : d_weights;

  PoolGrad<Scalar> g;
  g.params.weight = xp.transpose() * d_scores;
  // Softmax ignores a shared shift of the scores, so the bias has no effect.
  g.params.bias = normalize ? Scalar(0) : d_scores.sum();
  g.input = weights * df.transpose() + d_scores * p.weight.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Baseline poolers

template <typename Scalar>
Vector<Scalar> max_pool(const Matrix<Scalar>& x) {
  detail::require_shape(x.rows() >= 1, "max_pool: no frames");
  return x.colwise().maxCoeff().transpose();
}

/// Routes each column's gradient to the first frame attaining the max.
template <typename Scalar>
Matrix<Scalar> max_pool_backward(const Matrix<Scalar>& x, const Vector<Scalar>& df) {
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index r;
    x.col(c).maxCoeff(&r);
    dx(r, c) = df[c];
  }
  return dx;
}

template <typename Scalar>
Vector<Scalar> mean_pool(const Matrix<Scalar>& x) {
  detail::require_shape(x.rows() >= 1, "mean_pool: no frames");
  return x.colwise().mean().transpose();
}

template <typename Scalar>
Matrix<Scalar> mean_pool_backward(const Matrix<Scalar>& x, const Vector<Scalar>& df) {
  return Matrix<Scalar>::Ones(x.rows(), 1) * (df.transpose() / static_cast<Scalar>(x.rows()));
}

}  // namespace eamser
