#include "eamser/signal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "eamser/error.hpp"

namespace eamser {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

struct FormatChunk {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t block_align = 0;
  std::uint16_t bits = 0;
};

double decode_sample(const unsigned char* p, const FormatChunk& fmt) {
  if (fmt.format == kFormatFloat) {
    if (fmt.bits == 32) {
      std::uint32_t bits = read_u32(p);
      float v;
      std::memcpy(&v, &bits, sizeof v);
      return v;
    }
    std::uint64_t bits = static_cast<std::uint64_t>(read_u32(p)) |
                         (static_cast<std::uint64_t>(read_u32(p + 4)) << 32);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  switch (fmt.bits) {
    case 8:  // unsigned, offset binary
      return (static_cast<int>(p[0]) - 128) / 128.0;
    case 16:
      return static_cast<std::int16_t>(read_u16(p)) / 32768.0;
    case 24: {
      std::int32_t v = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
      if (v & 0x800000) v -= 0x1000000;
      return v / 8388608.0;
    }
    default:
      return static_cast<std::int32_t>(read_u32(p)) / 2147483648.0;
  }
}

}  // namespace

Waveform::Waveform(Eigen::VectorXd samples, int sample_rate)
    : samples_(std::move(samples)), sample_rate_(sample_rate) {
  if (samples_.size() == 0) throw Error(Errc::invalid_argument, "waveform has no samples");
  if (sample_rate_ <= 0) throw Error(Errc::invalid_argument, "sample rate must be positive");
}

Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw Error(Errc::malformed_wav, path.string() + ": missing RIFF/WAVE header");

  FormatChunk fmt;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    std::size_t size = read_u32(chunk + 4);
    std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size())
        throw Error(Errc::malformed_wav, path.string() + ": truncated fmt chunk");
      const unsigned char* f = bytes.data() + body;
      fmt.format = read_u16(f);
      fmt.channels = read_u16(f + 2);
      fmt.sample_rate = read_u32(f + 4);
      fmt.block_align = read_u16(f + 12);
      fmt.bits = read_u16(f + 14);
      if (fmt.format == kFormatExtensible) {
        if (size < 40) throw Error(Errc::malformed_wav, path.string() + ": short extensible fmt");
        fmt.format = read_u16(f + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      // Writers that stream often leave a bogus size; clip to what's there.
      data_size = std::min(size, bytes.size() - body);
      break;
    }
    pos = body + size + (size & 1);
  }

  if (!have_fmt) throw Error(Errc::malformed_wav, path.string() + ": no fmt chunk");
  if (data == nullptr) throw Error(Errc::malformed_wav, path.string() + ": no data chunk");

  bool supported = (fmt.format == kFormatPcm &&
                    (fmt.bits == 8 || fmt.bits == 16 || fmt.bits == 24 || fmt.bits == 32)) ||
                   (fmt.format == kFormatFloat && (fmt.bits == 32 || fmt.bits == 64));
  if (!supported)
    throw Error(Errc::unsupported_encoding, path.string() + ": format tag " +
                                                std::to_string(fmt.format) + ", " +
                                                std::to_string(fmt.bits) + " bits");
  if (fmt.channels == 0 || fmt.sample_rate == 0)
    throw Error(Errc::malformed_wav, path.string() + ": zero channels or sample rate");

  const std::size_t bytes_per_sample = fmt.bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * fmt.channels;
  const std::size_t frames = data_size / frame_bytes;
  if (frames == 0) throw Error(Errc::malformed_wav, path.string() + ": empty data chunk");

  Eigen::VectorXd samples(static_cast<Eigen::Index>(frames));
  for (std::size_t n = 0; n < frames; ++n) {
    const unsigned char* frame = data + n * frame_bytes;
    double acc = 0.0;
    for (std::size_t c = 0; c < fmt.channels; ++c)
      acc += decode_sample(frame + c * bytes_per_sample, fmt);
    samples[static_cast<Eigen::Index>(n)] = acc / fmt.channels;
  }
  return Waveform(std::move(samples), static_cast<int>(fmt.sample_rate));
}

void save_wav(const Waveform& w, const std::filesystem::path& path, WavEncoding encoding) {
  const Eigen::VectorXd& x = w.samples();
  if (!x.allFinite()) throw Error(Errc::invalid_argument, "waveform has non-finite samples");

  const std::uint16_t bits = encoding == WavEncoding::pcm16 ? 16 : 32;
  const std::uint16_t format = encoding == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(x.size()) * (bits / 8);

  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, format);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate()));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate()) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data_bytes);

  for (Eigen::Index n = 0; n < x.size(); ++n) {
    if (encoding == WavEncoding::pcm16) {
      double q = std::clamp(std::round(x[n] * 32768.0), -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    } else {
      float v = static_cast<float>(x[n]);
      std::uint32_t b;
      std::memcpy(&b, &v, sizeof b);
      put_u32(out, b);
    }
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io_error, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw Error(Errc::io_error, "write failed: " + path.string());
}

void check_segment(const Waveform& w, const Segment& s) {
  if (s.length == 0 || s.start > w.size() || s.length > w.size() - s.start)
    throw Error(Errc::out_of_bounds, "segment [" + std::to_string(s.start) + ", +" +
                                         std::to_string(s.length) + ") outside waveform of " +
                                         std::to_string(w.size()) + " samples");
}

double segment_energy(const Waveform& w, const Segment& s) {
  check_segment(w, s);
  auto seg = w.samples().segment(static_cast<Eigen::Index>(s.start),
                                 static_cast<Eigen::Index>(s.length));
  return seg.squaredNorm() / static_cast<double>(s.length);
}

Waveform extract_segment(const Waveform& w, const Segment& s) {
  check_segment(w, s);
  return Waveform(w.samples().segment(static_cast<Eigen::Index>(s.start),
                                      static_cast<Eigen::Index>(s.length)),
                  w.sample_rate());
}

}  // namespace eamser
