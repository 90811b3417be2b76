#include "eamser/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "eamser/error.hpp"

namespace eamser {

const char* to_string(MixupMode m) noexcept {
  switch (m) {
    case MixupMode::eam: return "eam";
    case MixupMode::lam: return "lam";
    case MixupMode::none: return "none";
  }
  return "none";
}

MixupMode parse_mixup(const std::string& s) {
  if (s == "eam") return MixupMode::eam;
  if (s == "lam") return MixupMode::lam;
  if (s == "none") return MixupMode::none;
  throw Error(Errc::invalid_argument, "unknown mixup mode '" + s + "'");
}

Example make_example(std::string id, Eigen::MatrixXd features, int label, int n_classes) {
  if (label < 0 || label >= n_classes)
    throw Error(Errc::invalid_class, "label " + std::to_string(label) + " out of range");
  Example e;
  e.id = std::move(id);
  e.features = std::move(features);
  e.target = Eigen::VectorXd::Zero(n_classes);
  e.target[label] = 1.0;
  e.label = label;
  return e;
}

void TrainConfig::validate() const {
  if (!(model_lr >= 0.0) || !(center_lr >= 0.0))
    throw Error(Errc::invalid_argument, "learning rates must be >= 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw Error(Errc::invalid_argument, "decay must be in (0, 1]");
  if (decay_until_epoch < 0) throw Error(Errc::invalid_argument, "decay_until_epoch must be >= 0");
  if (batch_size < 2) throw Error(Errc::invalid_argument, "batch_size must be >= 2");
  if (epochs < 0) throw Error(Errc::invalid_argument, "epochs must be >= 0");
  if (threads < 1) throw Error(Errc::invalid_argument, "threads must be >= 1");
  loss.validate();
  mix.validate();
}

ModelConfig TrainConfig::model_config(int feature_dim, int n_classes) const {
  ModelConfig m;
  m.feature_dim = feature_dim;
  m.heads = heads;
  m.proj_dim = loss.proj_dim;
  m.n_classes = n_classes;
  m.aggregation = aggregation;
  m.pool_softmax = pool_softmax;
  m.context_broadcast = loss.cb_enabled;
  m.shared_frame_projection = shared_frame_projection;
  m.validate();
  return m;
}

double lr_at_epoch(double lr0, int epoch, double decay, int until) {
  if (epoch < 1) throw Error(Errc::invalid_argument, "epochs are 1-based");
  return lr0 * std::pow(decay, std::min(epoch - 1, until));
}

void adam_step(ModelParams<double>& params, const ModelParams<double>& grads, AdamState& state,
               double lr) {
  std::size_t total = 0;
  for_each_trainable([&](auto p, auto g) {
    if (p.size() != g.size()) throw Error(Errc::shape_mismatch, "adam_step: gradient shape mismatch");
    total += p.size();
  }, params, grads);
  if (state.m.empty()) {
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  }
  if (state.m.size() != total || state.v.size() != total)
    throw Error(Errc::shape_mismatch, "adam_step: optimizer state does not match parameters");

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::size_t k = 0;
  for_each_trainable([&](auto p, auto g) {
    for (std::size_t i = 0; i < p.size(); ++i, ++k) {
      state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g[i];
      state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = state.m[k] / c1;
      const double v_hat = state.v[k] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }, params, grads);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < n; i += bs)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + bs)));
  // A lone trailing utterance has nothing to contrast with.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

}  // namespace

LossReport train_epoch(const Dataset& data, ModelParams<double>& params, AdamState& adam,
                       const ModelConfig& model_cfg, const TrainConfig& cfg, int epoch, Rng& rng) {
  if (data.empty()) throw Error(Errc::empty_dataset, "training set is empty");
  const double lr = lr_at_epoch(cfg.model_lr, epoch, cfg.decay, cfg.decay_until_epoch);
  const double center_lr = lr_at_epoch(cfg.center_lr, epoch, cfg.decay, cfg.decay_until_epoch);

  LossReport sum;
  const auto batches = make_batches(data.size(), cfg.batch_size, rng);
  for (const auto& batch : batches) {
    const std::size_t b = batch.size();
    std::vector<ForwardState<double>> states(b);
    std::vector<Eigen::VectorXd> targets(b);
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
      targets[i] = data[batch[i]].target;
      labels[i] = data[batch[i]].label;
    }
    parallel_for(b, cfg.threads, [&](std::size_t i) {
      states[i] = forward_pass(data[batch[i]].features, params, model_cfg);
    });

    BatchLoss<double> loss = batch_loss<double>(states, targets, params.centers, cfg.loss);

    std::vector<ModelParams<double>> grads(b);
    parallel_for(b, cfg.threads, [&](std::size_t i) {
      const Eigen::MatrixXd* dz = loss.d_z.empty() ? nullptr : &loss.d_z[i];
      grads[i] = backward_pass(states[i], params, model_cfg, loss.d_logits[i], loss.d_f_low[i], dz)
                     .params;
    });
    // Reduce in batch order so the result doesn't depend on thread count.
    ModelParams<double> total = std::move(grads[0]);
    for (std::size_t i = 1; i < b; ++i)
      for_each_trainable([](auto acc, auto part) {
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += part[k];
      }, total, grads[i]);

    adam_step(params, total, adam, lr);

    Eigen::MatrixXd f_low(static_cast<Eigen::Index>(b), model_cfg.proj_dim);
    for (std::size_t i = 0; i < b; ++i) f_low.row(static_cast<Eigen::Index>(i)) = states[i].f_low.transpose();
    params.centers = update_centers<double>(params.centers, f_low, labels, center_lr);

    sum.kl += loss.report.kl;
    sum.focal += loss.report.focal;
    sum.center += loss.report.center;
    sum.supcon += loss.report.supcon;
    sum.total += loss.report.total;
  }
  const double n = static_cast<double>(batches.size());
  return LossReport{sum.kl / n, sum.focal / n, sum.center / n, sum.supcon / n, sum.total / n};
}

Metrics compute_metrics(std::span<const int> labels, std::span<const int> predictions,
                        int n_classes) {
  if (labels.empty()) throw Error(Errc::empty_dataset, "no predictions to score");
  if (labels.size() != predictions.size())
    throw Error(Errc::shape_mismatch, "labels and predictions differ in length");
  Metrics m;
  m.confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || predictions[i] < 0 ||
        predictions[i] >= n_classes)
      throw Error(Errc::invalid_class, "class index out of range");
    ++m.confusion(labels[i], predictions[i]);
  }
  m.wa = static_cast<double>(m.confusion.trace()) / static_cast<double>(labels.size());
  double recall_sum = 0.0;
  int present = 0;
  for (int k = 0; k < n_classes; ++k) {
    const int support = m.confusion.row(k).sum();
    if (support == 0) continue;
    recall_sum += static_cast<double>(m.confusion(k, k)) / support;
    ++present;
  }
  m.ua = recall_sum / present;
  return m;
}

Evaluation evaluate(const Dataset& data, const ModelParams<double>& params,
                    const ModelConfig& model_cfg, int threads) {
  if (data.empty()) throw Error(Errc::empty_dataset, "evaluation set is empty");
  Evaluation ev;
  ev.predictions.resize(data.size());
  std::vector<int> labels(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto s = forward_pass(data[i].features, params, model_cfg);
    Eigen::Index idx;
    s.logits.maxCoeff(&idx);
    ev.predictions[i] = static_cast<int>(idx);
    labels[i] = data[i].label;
  });
  ev.metrics = compute_metrics(labels, ev.predictions, model_cfg.n_classes);
  return ev;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["kl"] = r.loss.kl;
  j["focal"] = r.loss.focal;
  j["center"] = r.loss.center;
  j["supcon"] = r.loss.supcon;
  j["total"] = r.loss.total;
  j["wa"] = r.wa;
  j["ua"] = r.ua;
  return j.dump();
}

std::vector<EpochRecord> train(const Dataset& train_set, const Dataset& test_set,
                               ModelParams<double>& params, const ModelConfig& model_cfg,
                               const TrainConfig& cfg, Rng& rng,
                               const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw Error(Errc::empty_dataset, "training set is empty");
  AdamState adam;
  std::vector<EpochRecord> records;
  const Dataset& eval_set = test_set.empty() ? train_set : test_set;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord r;
    r.epoch = epoch;
    r.lr = lr_at_epoch(cfg.model_lr, epoch, cfg.decay, cfg.decay_until_epoch);
    r.loss = train_epoch(train_set, params, adam, model_cfg, cfg, epoch, rng);
    const Evaluation ev = evaluate(eval_set, params, model_cfg, cfg.threads);
    r.wa = ev.metrics.wa;
    r.ua = ev.metrics.ua;
    records.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  return records;
}

}  // namespace eamser
