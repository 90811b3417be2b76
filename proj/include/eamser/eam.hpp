#pragma once

#include <cstddef>
#include <random>

#include <Eigen/Core>

#include "eamser/signal.hpp"

namespace eamser {

using Rng = std::mt19937_64;

struct MixConfig {
  double snr_db_min = 0.0;
  double snr_db_max = 10.0;
  double mix_frac_min = 0.1;  // fraction of the base length
  double mix_frac_max = 0.5;
  unsigned long long rng_seed = 0;

  void validate() const;
};

/// Probability vector over the emotion classes.
class SoftLabel {
 public:
  explicit SoftLabel(Eigen::VectorXd probs);

  static SoftLabel one_hot(int cls, int n_classes);

  const Eigen::VectorXd& probs() const noexcept { return probs_; }
  int n_classes() const noexcept { return static_cast<int>(probs_.size()); }
  /// Dominant class; ties resolve to the lowest index.
  int hard_label() const;

 private:
  Eigen::VectorXd probs_;
};

struct MixParams {
  std::size_t l_mix = 0;
  std::size_t start_i = 0;
  std::size_t start_j = 0;
  double snr_db = 0.0;
};

struct LabeledWaveform {
  const Waveform& wave;
  int label;
};

struct MixResult {
  Waveform mixed;
  SoftLabel label;
  double achieved_snr_db;
  MixParams params;
  double scale;
  double energy_i;   // P'_i, base segment
  double energy_jj;  // P''_j, injected segment after scaling
};

MixParams sample_mix_params(const MixConfig& cfg, std::size_t len_i, std::size_t len_j, Rng& rng);

/// Gain that brings a segment of mean power `energy_j` to the level
/// energy_i / 10^(snr_db/10).
double snr_scale(double energy_i, double energy_j, double snr_db);

/// Overwrite-mix: x_i[start_i, start_i + l_mix) += scale * x_j[start_j, ...).
/// The returned label is a placeholder one-hot of size 1; callers attach the
/// real label with make_soft_label.
MixResult mix_signals(const Waveform& x_i, const Waveform& x_j, const MixParams& params);

/// Energy-adaptive label: weight w = (l_mix/l_i) * P''_j / (P'_i + P''_j) goes
/// to class_j and 1 - w to class_i.
SoftLabel make_soft_label(int class_i, int class_j, std::size_t l_mix, std::size_t l_i,
                          double energy_i, double energy_jj, int n_classes);

MixResult eam_augment(LabeledWaveform x_i, LabeledWaveform x_j, int n_classes,
                      const MixConfig& cfg, Rng& rng);

/// Length-adaptive baseline: same draw sequence and mixing positions as
/// eam_augment, but unit gain and w = l_mix / l_i.
MixResult lam_augment(LabeledWaveform x_i, LabeledWaveform x_j, int n_classes,
                      const MixConfig& cfg, Rng& rng);

}  // namespace eamser
