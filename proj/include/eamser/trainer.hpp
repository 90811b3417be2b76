#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "eamser/eam.hpp"
#include "eamser/losses.hpp"
#include "eamser/model.hpp"

namespace eamser {

enum class MixupMode { eam, lam, none };

const char* to_string(MixupMode m) noexcept;
MixupMode parse_mixup(const std::string& s);

/// One utterance ready for training: a T x D feature sequence with its soft
/// target. `label` is the dominant class of `target`.
struct Example {
  std::string id;
  Eigen::MatrixXd features;
  Eigen::VectorXd target;
  int label = 0;
};

using Dataset = std::vector<Example>;

Example make_example(std::string id, Eigen::MatrixXd features, int label, int n_classes);

struct TrainConfig {
  double model_lr = 1e-4;
  double center_lr = 5e-3;
  double decay = 7.0 / 8.0;
  int decay_until_epoch = 20;
  int batch_size = 16;
  int epochs = 30;
  unsigned long long seed = 0;
  LossConfig loss;
  MixConfig mix;
  Aggregation aggregation = Aggregation::flam;
  MixupMode mixup = MixupMode::eam;
  int heads = 16;
  bool pool_softmax = false;
  bool shared_frame_projection = false;
  int threads = 1;

  void validate() const;
  ModelConfig model_config(int feature_dim, int n_classes) const;
};

/// lr0 * decay^min(epoch - 1, until); epochs are 1-based.
double lr_at_epoch(double lr0, int epoch, double decay = 7.0 / 8.0, int until = 20);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

/// Bias-corrected Adam over every trainable tensor (centers excluded).
void adam_step(ModelParams<double>& params, const ModelParams<double>& grads, AdamState& state,
               double lr);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// One pass over shuffled mini-batches. Returns the mean of the per-batch
/// loss reports.
LossReport train_epoch(const Dataset& data, ModelParams<double>& params, AdamState& adam,
                       const ModelConfig& model_cfg, const TrainConfig& cfg, int epoch, Rng& rng);

struct Metrics {
  double wa = 0.0;
  double ua = 0.0;
  Eigen::MatrixXi confusion;  // rows: true class, cols: predicted
};

/// WA is overall accuracy; UA averages recall over the classes present in
/// `labels`.
Metrics compute_metrics(std::span<const int> labels, std::span<const int> predictions,
                        int n_classes);

struct Evaluation {
  Metrics metrics;
  std::vector<int> predictions;
};

Evaluation evaluate(const Dataset& data, const ModelParams<double>& params,
                    const ModelConfig& model_cfg, int threads = 1);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossReport loss;
  double wa = 0.0;
  double ua = 0.0;
};

std::string to_json_line(const EpochRecord& r);

/// Full training run. `test` may be empty, in which case WA/UA are measured
/// on the training set. `on_epoch` sees each record as it is produced.
std::vector<EpochRecord> train(const Dataset& train_set, const Dataset& test_set,
                               ModelParams<double>& params, const ModelConfig& model_cfg,
                               const TrainConfig& cfg, Rng& rng,
                               const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace eamser
