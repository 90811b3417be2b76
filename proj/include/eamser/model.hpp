#pragma once

// Utterance classifier: residual MSA -> frame aggregation -> classifier, with
// a low-dimensional projection of the pooled feature (center loss) and of
// every frame (context broadcast + SupCon).

#include <span>
#include <string>
#include <vector>

#include "eamser/error.hpp"
#include "eamser/losses.hpp"
#include "eamser/nn.hpp"

namespace eamser {

enum class Aggregation { flam, maxpool, meanpool };

const char* to_string(Aggregation a) noexcept;
Aggregation parse_aggregation(const std::string& s);

struct ModelConfig {
  int feature_dim = 0;
  int heads = 16;
  int proj_dim = 64;
  int n_classes = 0;
  Aggregation aggregation = Aggregation::flam;
  bool pool_softmax = false;
  bool context_broadcast = true;
  bool shared_frame_projection = false;

  void validate() const;
};

template <typename Scalar>
struct ModelParams {
  MsaParams<Scalar> msa;
  PoolParams<Scalar> pool;
  Linear<Scalar> projection;        // D -> proj_dim, pooled feature
  Linear<Scalar> frame_projection;  // D -> proj_dim, frames; empty when shared
  Linear<Scalar> classifier;        // D -> n_classes
  Matrix<Scalar> centers;           // n_classes x proj_dim

  /// Same shapes as `cfg`, all zero.
  static ModelParams zero(const ModelConfig& cfg) {
    ModelParams p;
    p.msa = MsaParams<Scalar>::zero(cfg.feature_dim, cfg.heads);
    p.pool = PoolParams<Scalar>::zero(cfg.feature_dim);
    p.projection = Linear<Scalar>::zero(cfg.feature_dim, cfg.proj_dim);
    p.frame_projection = cfg.shared_frame_projection
                             ? Linear<Scalar>::zero(0, 0)
                             : Linear<Scalar>::zero(cfg.feature_dim, cfg.proj_dim);
    p.classifier = Linear<Scalar>::zero(cfg.feature_dim, cfg.n_classes);
    p.centers = Matrix<Scalar>::Zero(cfg.n_classes, cfg.proj_dim);
    return p;
  }

  const Linear<Scalar>& frame_head() const {
    return frame_projection.weight.size() == 0 ? projection : frame_projection;
  }
};

/// Glorot-uniform weights, zero biases, zero centers.
template <typename Scalar, typename Gen>
ModelParams<Scalar> init_model(const ModelConfig& cfg, Gen& gen) {
  cfg.validate();
  ModelParams<Scalar> p = ModelParams<Scalar>::zero(cfg);
  p.msa = init_msa<Scalar>(cfg.feature_dim, cfg.heads, gen);
  p.pool = init_pool<Scalar>(cfg.feature_dim, gen);
  p.projection = init_linear<Scalar>(cfg.feature_dim, cfg.proj_dim, gen);
  if (!cfg.shared_frame_projection)
    p.frame_projection = init_linear<Scalar>(cfg.feature_dim, cfg.proj_dim, gen);
  p.classifier = init_linear<Scalar>(cfg.feature_dim, cfg.n_classes, gen);
  return p;
}

// Visits every Adam-trained tensor as a flat span, in declaration order.
// Several parameter sets of identical shape can be walked in lockstep.
template <typename F, typename... P>
void for_each_trainable(F&& fn, P&... params) {
  auto flat = [](auto& m) { return std::span(m.data(), static_cast<std::size_t>(m.size())); };
  fn(flat(params.msa.wq)...);
  fn(flat(params.msa.bq)...);
  fn(flat(params.msa.wk)...);
  fn(flat(params.msa.wv)...);
  fn(flat(params.msa.bv)...);
  fn(flat(params.msa.wo)...);
  fn(flat(params.msa.bo)...);
  fn(flat(params.pool.weight)...);
  fn(std::span(&params.pool.bias, 1)...);
  fn(flat(params.projection.weight)...);
  fn(flat(params.projection.bias)...);
  fn(flat(params.frame_projection.weight)...);
  fn(flat(params.frame_projection.bias)...);
  fn(flat(params.classifier.weight)...);
  fn(flat(params.classifier.bias)...);
}

/// Trainable tensors followed by the class centers.
template <typename F, typename... P>
void for_each_tensor(F&& fn, P&... params) {
  for_each_trainable(fn, params...);
  fn(std::span(params.centers.data(), static_cast<std::size_t>(params.centers.size()))...);
}

template <typename Scalar>
struct ForwardState {
  MsaCache<Scalar> msa;
  Matrix<Scalar> xp;         // T x D after the residual MSA
  Vector<Scalar> pooled;     // f, D
  Vector<Scalar> f_low;      // proj_dim
  Vector<Scalar> logits;     // n_classes
  Vector<Scalar> probs;      // softmax(logits)
  Matrix<Scalar> frame_low;  // T x proj_dim before context broadcast
  Matrix<Scalar> z;          // SupCon embeddings
};

template <typename Scalar>
ForwardState<Scalar> forward_pass(const Matrix<Scalar>& x, const ModelParams<Scalar>& p,
                                  const ModelConfig& cfg) {
  detail::require_shape(x.cols() == cfg.feature_dim,
                        "input has " + std::to_string(x.cols()) + " features, model expects " +
                            std::to_string(cfg.feature_dim));
  ForwardState<Scalar> s;
  s.xp = msa_forward(x, p.msa, &s.msa);
  switch (cfg.aggregation) {
    case Aggregation::flam:
      s.pooled = frame_attention_pool(s.xp, p.pool, cfg.pool_softmax);
      break;
    case Aggregation::maxpool:
      s.pooled = max_pool(s.xp);
      break;
    case Aggregation::meanpool:
      s.pooled = mean_pool(s.xp);
      break;
  }
  s.f_low = linear_forward(s.pooled, p.projection);
  s.logits = linear_forward(s.pooled, p.classifier);
  s.probs = softmax(s.logits);
  s.frame_low = linear_forward(s.xp, p.frame_head());
  s.z = cfg.context_broadcast ? context_broadcast(s.frame_low) : s.frame_low;
  return s;
}

template <typename Scalar>
struct ModelGrad {
  ModelParams<Scalar> params;  // centers entry is always zero
  Matrix<Scalar> input;
};

/// Backpropagates upstream gradients on logits, f_low and (optionally) z.
template <typename Scalar>
ModelGrad<Scalar> backward_pass(const ForwardState<Scalar>& s, const ModelParams<Scalar>& p,
                                const ModelConfig& cfg, const Vector<Scalar>& d_logits,
                                const Vector<Scalar>& d_f_low, const Matrix<Scalar>* d_z) {
  ModelGrad<Scalar> g;
  g.params = ModelParams<Scalar>::zero(cfg);

  auto cls = linear_backward(s.pooled, p.classifier, d_logits);
  auto proj = linear_backward(s.pooled, p.projection, d_f_low);
  g.params.classifier = std::move(cls.params);
  g.params.projection = std::move(proj.params);
  const Vector<Scalar> d_pooled = cls.input + proj.input;

  Matrix<Scalar> d_xp;
  switch (cfg.aggregation) {
    case Aggregation::flam: {
      auto pool = frame_attention_pool_backward(s.xp, p.pool, cfg.pool_softmax, d_pooled);
      g.params.pool = std::move(pool.params);
      d_xp = std::move(pool.input);
      break;
    }
    case Aggregation::maxpool:
      d_xp = max_pool_backward(s.xp, d_pooled);
      break;
    case Aggregation::meanpool:
      d_xp = mean_pool_backward(s.xp, d_pooled);
      break;
  }

  if (d_z != nullptr) {
    const Matrix<Scalar> d_frame_low = cfg.context_broadcast ? context_broadcast_backward(*d_z) : *d_z;
    auto fp = linear_backward(s.xp, p.frame_head(), d_frame_low);
    if (cfg.shared_frame_projection) {
      g.params.projection.weight += fp.params.weight;
      g.params.projection.bias += fp.params.bias;
    } else {
      g.params.frame_projection = std::move(fp.params);
    }
    d_xp += fp.input;
  }

  auto msa = msa_backward(s.msa, p.msa, d_xp);
  g.params.msa = std::move(msa.params);
  g.input = std::move(msa.input);
  return g;
}

template <typename Scalar>
struct BatchLoss {
  LossReport report;
  std::vector<Vector<Scalar>> d_logits;
  std::vector<Vector<Scalar>> d_f_low;
  std::vector<Matrix<Scalar>> d_z;  // empty when the SupCon term is off
  Matrix<Scalar> d_centers;
};

/// Weighted multi-loss over a batch. KL and focal average over utterances;
/// center and SupCon use the dominant class of each target. Terms whose
/// weight is zero are skipped and reported as 0.
template <typename Scalar>
BatchLoss<Scalar> batch_loss(const std::vector<ForwardState<Scalar>>& states,
                             std::span<const Vector<Scalar>> targets,
                             const Matrix<Scalar>& centers, const LossConfig& cfg) {
  const std::size_t b = states.size();
  if (b == 0 || targets.size() != b)
    throw Error(Errc::degenerate_batch, "batch must be nonempty with one target per item");
  const LossWeights& w = cfg.lambdas;
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);

  std::vector<int> hard(b);
  for (std::size_t i = 0; i < b; ++i) {
    Eigen::Index idx;
    targets[i].maxCoeff(&idx);
    hard[i] = static_cast<int>(idx);
  }

  BatchLoss<Scalar> out;
  LossReport parts;
  const Eigen::Index proj = states.front().f_low.size();
  for (std::size_t i = 0; i < b; ++i) {
    const Vector<Scalar> probs = states[i].probs.cwiseMax(Scalar(kProbFloor));
    Vector<Scalar> d_probs = Vector<Scalar>::Zero(probs.size());
    if (w.kl > 0) {
      auto kl = kl_div(targets[i], probs);
      parts.kl += static_cast<double>(kl.value * inv_b);
      d_probs += static_cast<Scalar>(w.kl) * inv_b * kl.grad;
    }
    if (w.focal > 0) {
      auto fl = focal(targets[i], probs, static_cast<Scalar>(cfg.gamma));
      parts.focal += static_cast<double>(fl.value * inv_b);
      d_probs += static_cast<Scalar>(w.focal) * inv_b * fl.grad;
    }
    out.d_logits.push_back(softmax_backward(states[i].probs, d_probs));
    out.d_f_low.push_back(Vector<Scalar>::Zero(proj));
  }

  out.d_centers = Matrix<Scalar>::Zero(centers.rows(), centers.cols());
  if (w.center > 0) {
    Matrix<Scalar> f_low(static_cast<Eigen::Index>(b), proj);
    for (std::size_t i = 0; i < b; ++i) f_low.row(static_cast<Eigen::Index>(i)) = states[i].f_low.transpose();
    auto cl = center_loss<Scalar>(f_low, hard, centers);
    parts.center = static_cast<double>(cl.value);
    for (std::size_t i = 0; i < b; ++i)
      out.d_f_low[i] = static_cast<Scalar>(w.center) *
                       cl.grad_features.row(static_cast<Eigen::Index>(i)).transpose();
    out.d_centers = static_cast<Scalar>(w.center) * cl.grad_centers;
  }

  if (w.supcon > 0) {
    std::vector<Matrix<Scalar>> frames;
    frames.reserve(b);
    for (const auto& s : states) frames.push_back(s.z);
    auto sc = supcon_frames<Scalar>(frames, hard, static_cast<Scalar>(cfg.tau),
                                    cfg.normalize_embeddings);
    parts.supcon = static_cast<double>(sc.value);
    for (auto& g : sc.grad) out.d_z.push_back(static_cast<Scalar>(w.supcon) * g);
  }

  out.report = combined_loss(parts, w);
  return out;
}

/// Scalar objective of a batch; used by gradient checks.
template <typename Scalar>
Scalar total_loss(const std::vector<Matrix<Scalar>>& inputs,
                  std::span<const Vector<Scalar>> targets, const ModelParams<Scalar>& p,
                  const ModelConfig& cfg, const LossConfig& loss_cfg) {
  std::vector<ForwardState<Scalar>> states;
  for (const auto& x : inputs) states.push_back(forward_pass(x, p, cfg));
  return static_cast<Scalar>(batch_loss(states, targets, p.centers, loss_cfg).report.total);
}

/// Gradient of total_loss with respect to every parameter, centers included.
template <typename Scalar>
ModelParams<Scalar> total_loss_gradient(const std::vector<Matrix<Scalar>>& inputs,
                                        std::span<const Vector<Scalar>> targets,
                                        const ModelParams<Scalar>& p, const ModelConfig& cfg,
                                        const LossConfig& loss_cfg, LossReport* report = nullptr) {
  std::vector<ForwardState<Scalar>> states;
  for (const auto& x : inputs) states.push_back(forward_pass(x, p, cfg));
  BatchLoss<Scalar> bl = batch_loss(states, targets, p.centers, loss_cfg);
  ModelParams<Scalar> sum = ModelParams<Scalar>::zero(cfg);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const Matrix<Scalar>* dz = bl.d_z.empty() ? nullptr : &bl.d_z[i];
    ModelGrad<Scalar> g = backward_pass(states[i], p, cfg, bl.d_logits[i], bl.d_f_low[i], dz);
    for_each_trainable([](auto acc, auto part) {
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += part[k];
    }, sum, g.params);
  }
  sum.centers = bl.d_centers;
  if (report) *report = bl.report;
  return sum;
}

}  // namespace eamser
