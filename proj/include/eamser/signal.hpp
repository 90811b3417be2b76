#pragma once

#include <cstddef>
#include <filesystem>

#include <Eigen/Core>

namespace eamser {

/// Mono PCM signal. Samples are nominally in [-1, 1].
class Waveform {
 public:
  Waveform(Eigen::VectorXd samples, int sample_rate);

  const Eigen::VectorXd& samples() const noexcept { return samples_; }
  int sample_rate() const noexcept { return sample_rate_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(samples_.size()); }

 private:
  Eigen::VectorXd samples_;
  int sample_rate_;
};

struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

enum class WavEncoding { pcm16, float32 };

/// Reads PCM (8/16/24/32-bit integer) or IEEE float32 RIFF/WAVE files.
/// Multichannel frames are averaged into one channel and integer samples are
/// divided by 2^(bits-1).
Waveform load_wav(const std::filesystem::path& path);

void save_wav(const Waveform& w, const std::filesystem::path& path,
              WavEncoding encoding = WavEncoding::pcm16);

/// Throws OutOfBounds unless the segment is nonempty and fits in `w`.
void check_segment(const Waveform& w, const Segment& s);

/// Mean power over the segment: (1/length) * sum of squared samples.
double segment_energy(const Waveform& w, const Segment& s);

Waveform extract_segment(const Waveform& w, const Segment& s);

}  // namespace eamser
