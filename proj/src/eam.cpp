#include "eamser/eam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "eamser/error.hpp"

namespace eamser {

namespace {

constexpr double kSilence = 1e-12;

void check_class(int cls, int n_classes) {
  if (cls < 0 || cls >= n_classes)
    throw Error(Errc::invalid_class,
                "class " + std::to_string(cls) + " not in [0, " + std::to_string(n_classes) + ")");
}

MixResult mix_with_scale(const Waveform& x_i, const Waveform& x_j, const MixParams& p,
                         double scale, double energy_i) {
  Eigen::VectorXd out = x_i.samples();
  const auto n = static_cast<Eigen::Index>(p.l_mix);
  const auto si = static_cast<Eigen::Index>(p.start_i);
  const auto sj = static_cast<Eigen::Index>(p.start_j);
  Eigen::VectorXd injected = scale * x_j.samples().segment(sj, n);
  out.segment(si, n) += injected;

  const double energy_jj = injected.squaredNorm() / static_cast<double>(p.l_mix);
  double achieved;
  if (energy_jj == 0.0)
    achieved = std::numeric_limits<double>::infinity();
  else if (energy_i == 0.0)
    achieved = -std::numeric_limits<double>::infinity();
  else
    achieved = 10.0 * std::log10(energy_i / energy_jj);

  return MixResult{Waveform(std::move(out), x_i.sample_rate()),
                   SoftLabel::one_hot(0, 1),
                   achieved,
                   p,
                   scale,
                   energy_i,
                   energy_jj};
}

void check_pair(const Waveform& x_i, const Waveform& x_j, const MixParams& p) {
  if (x_i.sample_rate() != x_j.sample_rate())
    throw Error(Errc::sample_rate_mismatch, std::to_string(x_i.sample_rate()) + " Hz vs " +
                                                std::to_string(x_j.sample_rate()) + " Hz");
  check_segment(x_i, Segment{p.start_i, p.l_mix});
  check_segment(x_j, Segment{p.start_j, p.l_mix});
}

}  // namespace

void MixConfig::validate() const {
  if (!(snr_db_min <= snr_db_max))
    throw Error(Errc::invalid_argument, "snr_db_min must not exceed snr_db_max");
  if (!(mix_frac_min > 0.0 && mix_frac_min <= mix_frac_max && mix_frac_max <= 1.0))
    throw Error(Errc::invalid_argument, "mix fractions must satisfy 0 < min <= max <= 1");
}

SoftLabel::SoftLabel(Eigen::VectorXd probs) : probs_(std::move(probs)) {
  if (probs_.size() == 0) throw Error(Errc::invalid_argument, "empty soft label");
  if ((probs_.array() < 0.0).any() || (probs_.array() > 1.0).any() || !probs_.allFinite())
    throw Error(Errc::invalid_argument, "soft label entries must lie in [0, 1]");
  if (std::abs(probs_.sum() - 1.0) > 1e-12)
    throw Error(Errc::invalid_argument, "soft label does not sum to 1");
}

SoftLabel SoftLabel::one_hot(int cls, int n_classes) {
  if (n_classes < 1) throw Error(Errc::invalid_argument, "n_classes must be positive");
  check_class(cls, n_classes);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(n_classes);
  p[cls] = 1.0;
  return SoftLabel(std::move(p));
}

int SoftLabel::hard_label() const {
  Eigen::Index idx;
  probs_.maxCoeff(&idx);
  return static_cast<int>(idx);
}

MixParams sample_mix_params(const MixConfig& cfg, std::size_t len_i, std::size_t len_j,
                            Rng& rng) {
  cfg.validate();
  const auto lo = static_cast<std::size_t>(std::floor(cfg.mix_frac_min * static_cast<double>(len_i)));
  const auto hi = static_cast<std::size_t>(std::floor(cfg.mix_frac_max * static_cast<double>(len_i)));
  if (lo < 1 || len_j < 1)
    throw Error(Errc::segment_too_short, "no valid mix length for lengths " +
                                             std::to_string(len_i) + " and " +
                                             std::to_string(len_j));

  MixParams p;
  p.l_mix = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  p.l_mix = std::min({p.l_mix, len_i, len_j});
  p.start_i = std::uniform_int_distribution<std::size_t>(0, len_i - p.l_mix)(rng);
  p.start_j = std::uniform_int_distribution<std::size_t>(0, len_j - p.l_mix)(rng);
  p.snr_db = cfg.snr_db_min == cfg.snr_db_max
                 ? cfg.snr_db_min
                 : std::uniform_real_distribution<double>(cfg.snr_db_min, cfg.snr_db_max)(rng);
  return p;
}

double snr_scale(double energy_i, double energy_j, double snr_db) {
  if (!(energy_i >= kSilence) || !(energy_j >= kSilence))
    throw Error(Errc::silent_segment, "segment energy below 1e-12");
  return std::sqrt(energy_i / (std::pow(10.0, snr_db / 10.0) * energy_j));
}

MixResult mix_signals(const Waveform& x_i, const Waveform& x_j, const MixParams& params) {
  check_pair(x_i, x_j, params);
  const double energy_i = segment_energy(x_i, Segment{params.start_i, params.l_mix});
  const double energy_j = segment_energy(x_j, Segment{params.start_j, params.l_mix});
  const double scale = snr_scale(energy_i, energy_j, params.snr_db);
  return mix_with_scale(x_i, x_j, params, scale, energy_i);
}

SoftLabel make_soft_label(int class_i, int class_j, std::size_t l_mix, std::size_t l_i,
                          double energy_i, double energy_jj, int n_classes) {
  check_class(class_i, n_classes);
  check_class(class_j, n_classes);
  if (l_i == 0 || l_mix > l_i)
    throw Error(Errc::invalid_argument, "mix length must not exceed base length");
  if (!(energy_i >= 0.0) || !(energy_jj >= 0.0) || energy_i + energy_jj == 0.0)
    throw Error(Errc::invalid_argument, "energies must be nonnegative and not both zero");

  const double w = (static_cast<double>(l_mix) / static_cast<double>(l_i)) *
                   (energy_jj / (energy_i + energy_jj));
  Eigen::VectorXd probs = Eigen::VectorXd::Zero(n_classes);
  probs[class_i] += 1.0 - w;
  probs[class_j] += w;
  return SoftLabel(std::move(probs));
}

MixResult eam_augment(LabeledWaveform x_i, LabeledWaveform x_j, int n_classes,
                      const MixConfig& cfg, Rng& rng) {
  check_class(x_i.label, n_classes);
  check_class(x_j.label, n_classes);
  const MixParams p = sample_mix_params(cfg, x_i.wave.size(), x_j.wave.size(), rng);
  MixResult r = mix_signals(x_i.wave, x_j.wave, p);
  const double energy_jj = r.energy_i / std::pow(10.0, p.snr_db / 10.0);
  r.label = make_soft_label(x_i.label, x_j.label, p.l_mix, x_i.wave.size(), r.energy_i,
                            energy_jj, n_classes);
  return r;
}

MixResult lam_augment(LabeledWaveform x_i, LabeledWaveform x_j, int n_classes,
                      const MixConfig& cfg, Rng& rng) {
  check_class(x_i.label, n_classes);
  check_class(x_j.label, n_classes);
  const MixParams p = sample_mix_params(cfg, x_i.wave.size(), x_j.wave.size(), rng);
  check_pair(x_i.wave, x_j.wave, p);
  const double energy_i = segment_energy(x_i.wave, Segment{p.start_i, p.l_mix});
  MixResult r = mix_with_scale(x_i.wave, x_j.wave, p, 1.0, energy_i);

  const double w = static_cast<double>(p.l_mix) / static_cast<double>(x_i.wave.size());
  Eigen::VectorXd probs = Eigen::VectorXd::Zero(n_classes);
  probs[x_i.label] += 1.0 - w;
  probs[x_j.label] += w;
  r.label = SoftLabel(std::move(probs));
  return r;
}

}  // namespace eamser
