#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/io.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 24000;
};

enum class Window { hann, rectangular };

namespace detail {

inline bool power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 FFT; length must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!power_of_two(static_cast<int64_t>(n)))
    fail("fft: length ", n, " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Multi-bounce reflection of an arbitrary integer index into [0, len).
inline int64_t reflect_index(int64_t i, int64_t len) {
  if (len == 1) return 0;
  const int64_t period = 2 * (len - 1);
  i %= period;
  if (i < 0) i += period;
  return i < len ? i : period - i;
}

}  // namespace detail

// Complex spectra of centered frames: frame k covers padded samples
// [k*hop, k*hop + n_fft) where the signal is reflect-padded by n_fft/2 on
// both sides. Rows are frames, columns the n_fft/2 + 1 nonnegative bins.
struct StftFrames {
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<std::complex<double>> data;  // frames x bins, row major

  const std::complex<double>& at(int64_t frame, int64_t bin) const {
    return data[static_cast<std::size_t>(frame * bins + bin)];
  }
};

inline StftFrames stft(const Waveform& w, int64_t n_fft, int64_t hop,
                       Window window = Window::hann) {
  if (w.samples.empty()) fail("stft: empty waveform");
  if (!detail::power_of_two(n_fft)) fail("stft: n_fft ", n_fft, " must be a power of two");
  if (hop <= 0 || hop > n_fft) fail("stft: hop ", hop, " must be in [1, n_fft]");
  if (!all_finite(w.samples)) fail("stft: waveform contains non-finite samples");

  const auto len = static_cast<int64_t>(w.samples.size());
  std::vector<double> win(static_cast<std::size_t>(n_fft), 1.0);
  if (window == Window::hann)
    for (int64_t i = 0; i < n_fft; ++i)
      win[static_cast<std::size_t>(i)] =
          0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n_fft)));

  StftFrames out;
  out.frames = 1 + len / hop;
  out.bins = n_fft / 2 + 1;
  out.data.resize(static_cast<std::size_t>(out.frames * out.bins));
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
  for (int64_t f = 0; f < out.frames; ++f) {
    const int64_t start = f * hop - n_fft / 2;
    for (int64_t i = 0; i < n_fft; ++i) {
      const int64_t src = detail::reflect_index(start + i, len);
      buf[static_cast<std::size_t>(i)] = w.samples[static_cast<std::size_t>(src)] *
                                         win[static_cast<std::size_t>(i)];
    }
    detail::fft_radix2(buf);
    for (int64_t b = 0; b < out.bins; ++b)
      out.data[static_cast<std::size_t>(f * out.bins + b)] = buf[static_cast<std::size_t>(b)];
  }
  return out;
}

// Mel scale (2595 * log10(1 + f/700)) and its inverse.
inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// The n_mels + 2 triangle vertices in Hz, equally spaced on the mel scale.
inline std::vector<double> mel_frequencies(int64_t n_mels, double fmin, double fmax) {
  if (n_mels < 1) fail("mel_frequencies: need at least one band");
  if (!(fmin >= 0.0 && fmin < fmax)) fail("mel_frequencies: need 0 <= fmin < fmax");
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> f(static_cast<std::size_t>(n_mels) + 2);
  for (int64_t i = 0; i < n_mels + 2; ++i)
    f[static_cast<std::size_t>(i)] =
        mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  return f;
}

// Triangular filters sampled at the FFT bin centers; shape (n_mels, bins).
inline Tensor<double> mel_filterbank(int64_t n_fft, int64_t sample_rate, int64_t n_mels,
                                     double fmin, double fmax) {
  if (!detail::power_of_two(n_fft)) fail("mel_filterbank: n_fft must be a power of two");
  if (sample_rate <= 0) fail("mel_filterbank: sample_rate must be positive");
  if (fmax > static_cast<double>(sample_rate) / 2.0)
    fail("mel_filterbank: fmax ", fmax, " above Nyquist ", sample_rate / 2);
  const auto peaks = mel_frequencies(n_mels, fmin, fmax);
  const int64_t bins = n_fft / 2 + 1;
  std::vector<double> wts(static_cast<std::size_t>(n_mels * bins), 0.0);
  for (int64_t m = 0; m < n_mels; ++m) {
    const double f_lo = peaks[static_cast<std::size_t>(m)];
    const double f_pk = peaks[static_cast<std::size_t>(m + 1)];
    const double f_hi = peaks[static_cast<std::size_t>(m + 2)];
    double total = 0.0;
    for (int64_t b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * static_cast<double>(sample_rate) /
                       static_cast<double>(n_fft);
      double v = 0.0;
      if (f > f_lo && f < f_hi)
        v = f <= f_pk ? (f - f_lo) / (f_pk - f_lo) : (f_hi - f) / (f_hi - f_pk);
      wts[static_cast<std::size_t>(m * bins + b)] = v;
      total += v;
    }
    if (total == 0.0)
      fail("mel_filterbank: filter ", m, " is empty; too many bands for n_fft ", n_fft);
  }
  return Tensor<double>({n_mels, bins}, std::move(wts));
}

struct MelConfig {
  int64_t sample_rate = 24000;
  int64_t n_fft = 1024;
  int64_t hop = 256;
  int64_t n_mels = 100;
  double fmin = 0.0;
  double fmax = 12000.0;
  Window window = Window::hann;
  double log_floor = 1e-10;
};

// log(filterbank . |stft|^2 + floor), shape (frames, n_mels).
inline Tensor<double> log_mel(const Waveform& w, const MelConfig& cfg = {}) {
  if (w.sample_rate != cfg.sample_rate)
    fail("log_mel: waveform rate ", w.sample_rate, " != configured rate ", cfg.sample_rate);
  const auto spec = stft(w, cfg.n_fft, cfg.hop, cfg.window);
  const auto fb = mel_filterbank(cfg.n_fft, cfg.sample_rate, cfg.n_mels, cfg.fmin, cfg.fmax);
  const auto& fbv = fb.data();
  const int64_t bins = spec.bins;
  std::vector<double> out(static_cast<std::size_t>(spec.frames * cfg.n_mels));
  for (int64_t f = 0; f < spec.frames; ++f) {
    for (int64_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      for (int64_t b = 0; b < bins; ++b) {
        const double wgt = fbv[static_cast<std::size_t>(m * bins + b)];
        if (wgt != 0.0) acc += wgt * std::norm(spec.at(f, b));
      }
      out[static_cast<std::size_t>(f * cfg.n_mels + m)] = std::log(acc + cfg.log_floor);
    }
  }
  return Tensor<double>({spec.frames, cfg.n_mels}, std::move(out));
}

// Minimal 16-bit PCM mono WAV reader.
inline Waveform read_wav(const std::string& path) {
  const std::string buf = detail::slurp(path, "read_wav");
  detail::ByteReader r{buf, 0, "read_wav(" + path + ")"};
  if (r.bytes(4) != "RIFF") fail("read_wav(", path, "): not a RIFF file");
  r.u32();  // declared riff size; trust the actual length instead
  if (r.bytes(4) != "WAVE") fail("read_wav(", path, "): not a WAVE file");

  Waveform w;
  bool have_fmt = false, have_data = false;
  while (!r.done()) {
    const std::string id = r.bytes(4);
    const uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16) fail("read_wav(", path, "): fmt chunk too small");
      const std::string fmt = r.bytes(size);
      const auto u16 = [&](std::size_t off) {
        return static_cast<unsigned>(static_cast<unsigned char>(fmt[off])) |
               (static_cast<unsigned>(static_cast<unsigned char>(fmt[off + 1])) << 8);
      };
      const auto u32le = [&](std::size_t off) {
        return u16(off) | (static_cast<uint32_t>(u16(off + 2)) << 16);
      };
      if (u16(0) != 1) fail("read_wav(", path, "): only PCM (format 1) is supported");
      if (u16(2) != 1) fail("read_wav(", path, "): only mono is supported, got ", u16(2),
                            " channels");
      w.sample_rate = static_cast<int>(u32le(4));
      if (u16(14) != 16) fail("read_wav(", path, "): only 16-bit samples supported, got ",
                              u16(14));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail("read_wav(", path, "): data chunk before fmt");
      if (size % 2 != 0) fail("read_wav(", path, "): odd data chunk size");
      const std::string data = r.bytes(size);
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto lo = static_cast<unsigned char>(data[2 * i]);
        const auto hi = static_cast<unsigned char>(data[2 * i + 1]);
        const auto s16 = static_cast<int16_t>(static_cast<uint16_t>(lo) |
                                              (static_cast<uint16_t>(hi) << 8));
        w.samples[i] = static_cast<double>(s16) / 32768.0;
      }
      have_data = true;
    } else {
      r.bytes(size);  // skip unknown chunk
      if (size % 2 == 1 && !r.done()) r.bytes(1);
    }
  }
  if (!have_data) fail("read_wav(", path, "): no data chunk");
  return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::string data;
  for (double s : w.samples) {
    double c = s < -1.0 ? -1.0 : (s > 32767.0 / 32768.0 ? 32767.0 / 32768.0 : s);
    const auto v = static_cast<int16_t>(std::lround(c * 32768.0));
    data.push_back(static_cast<char>(static_cast<uint16_t>(v) & 0xFF));
    data.push_back(static_cast<char>((static_cast<uint16_t>(v) >> 8) & 0xFF));
  }
  std::string buf = "RIFF";
  detail::put_u32(buf, static_cast<uint32_t>(36 + data.size()));
  buf += "WAVEfmt ";
  detail::put_u32(buf, 16);
  const auto put_u16 = [&](unsigned v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
  };
  put_u16(1);  // PCM
  put_u16(1);  // mono
  detail::put_u32(buf, static_cast<uint32_t>(w.sample_rate));
  detail::put_u32(buf, static_cast<uint32_t>(w.sample_rate * 2));
  put_u16(2);   // block align
  put_u16(16);  // bits per sample
  buf += "data";
  detail::put_u32(buf, static_cast<uint32_t>(data.size()));
  buf += data;
  detail::spill(path, buf, "write_wav");
}

}  // namespace swayflow
