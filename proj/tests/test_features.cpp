#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include "swayflow/features.hpp"
#include "swayflow/io.hpp"
#include "swayflow/rng.hpp"

using namespace swayflow;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::filesystem::path temp_file(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "swayflow_feature_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Waveform sine(double freq, int sr, int64_t len, double amp = 0.5) {
  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(static_cast<std::size_t>(len));
  for (int64_t i = 0; i < len; ++i)
    w.samples[static_cast<std::size_t>(i)] =
        amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / sr);
  return w;
}

}  // namespace

TEST_CASE("fft matches a naive DFT on random input", "[features]") {
  Rng rng(11);
  const std::size_t n = 16;
  std::vector<std::complex<double>> x(n);
  for (auto& v : x) v = {rng.normal(), rng.normal()};
  auto got = x;
  detail::fft_radix2(got);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> ref{0, 0};
    for (std::size_t j = 0; j < n; ++j)
      ref += x[j] * std::polar(1.0, -2.0 * kPi * static_cast<double>(k * j) / n);
    REQUIRE_THAT(std::abs(got[k] - ref), WithinAbs(0.0, 1e-9));
  }
  std::vector<std::complex<double>> bad(12);
  REQUIRE_THROWS_WITH(detail::fft_radix2(bad), ContainsSubstring("power of two"));
}

TEST_CASE("frame count is 1 + floor(len / hop)", "[features]") {
  auto w = sine(440.0, 24000, 24000);
  auto spec = stft(w, 1024, 256);
  REQUIRE(spec.frames == 94);
  REQUIRE(spec.bins == 513);

  Rng rng(12);
  std::vector<int64_t> lens = {1, 2, 255, 256, 257, 1023, 1024, 100000};
  for (int i = 0; i < 40; ++i) lens.push_back(1 + static_cast<int64_t>(rng.below(100000)));
  for (int64_t len : lens) {
    Waveform v;
    v.samples.assign(static_cast<std::size_t>(len), 0.25);
    auto s = stft(v, 1024, 256, Window::rectangular);
    REQUIRE(s.frames == 1 + len / 256);
  }
  Waveform empty;
  REQUIRE_THROWS_WITH(stft(empty, 1024, 256), ContainsSubstring("empty waveform"));
}

TEST_CASE("silence transforms to zero magnitudes", "[features]") {
  Waveform w;
  w.samples.assign(4096, 0.0);
  auto spec = stft(w, 512, 128);
  for (const auto& c : spec.data) REQUIRE(std::abs(c) == 0.0);
}

TEST_CASE("a bin-centered sine concentrates its energy in that bin", "[features]") {
  // bin 8 of a 1024-point transform at 24 kHz = 187.5 Hz exactly
  const int64_t n_fft = 1024;
  const double freq = 8.0 * 24000.0 / static_cast<double>(n_fft);
  auto w = sine(freq, 24000, 24000);
  auto spec = stft(w, n_fft, 256, Window::rectangular);
  const int64_t mid = spec.frames / 2;
  double total = 0.0;
  for (int64_t b = 0; b < spec.bins; ++b) total += std::norm(spec.at(mid, b));
  REQUIRE(total > 0.0);
  REQUIRE(std::norm(spec.at(mid, 8)) / total >= 0.90);
}

TEST_CASE("mel filterbank has the documented shape and triangle structure", "[features]") {
  auto fb = mel_filterbank(1024, 24000, 100, 0.0, 12000.0);
  REQUIRE(fb.shape() == Shape{100, 513});
  const auto& w = fb.data();

  // every row rises to a single peak then falls (ties allowed)
  for (int64_t m = 0; m < 100; ++m) {
    const double* row = w.data() + m * 513;
    int64_t peak = 0;
    for (int64_t b = 1; b < 513; ++b)
      if (row[b] > row[peak]) peak = b;
    for (int64_t b = 1; b <= peak; ++b) REQUIRE(row[b] >= row[b - 1]);
    for (int64_t b = peak + 1; b < 513; ++b) REQUIRE(row[b] <= row[b - 1]);
    for (int64_t b = 0; b < 513; ++b) REQUIRE(row[b] >= 0.0);
  }

  // triangle peak frequencies are strictly increasing
  auto peaks = mel_frequencies(100, 0.0, 12000.0);
  REQUIRE(peaks.size() == 102);
  for (std::size_t i = 1; i < peaks.size(); ++i) REQUIRE(peaks[i] > peaks[i - 1]);
  REQUIRE_THAT(peaks.front(), WithinAbs(0.0, 1e-9));
  REQUIRE_THAT(peaks.back(), WithinRel(12000.0, 1e-9));

  // between the first and last peak every bin is covered by some filter
  for (int64_t b = 0; b < 513; ++b) {
    const double f = static_cast<double>(b) * 24000.0 / 1024.0;
    if (f <= peaks[1] || f >= peaks[100]) continue;
    double colsum = 0.0;
    for (int64_t m = 0; m < 100; ++m) colsum += w[static_cast<std::size_t>(m * 513 + b)];
    REQUIRE(colsum > 0.0);
  }

  REQUIRE_THROWS_WITH(mel_filterbank(64, 24000, 200, 0.0, 12000.0),
                      ContainsSubstring("is empty"));
  REQUIRE_THROWS_WITH(mel_filterbank(1024, 24000, 100, 0.0, 13000.0),
                      ContainsSubstring("Nyquist"));
  REQUIRE_THROWS_WITH(mel_frequencies(10, 500.0, 100.0), ContainsSubstring("fmin < fmax"));
}

TEST_CASE("log-mel features obey the floor, shape, and scaling laws", "[features]") {
  MelConfig cfg;

  Waveform silence;
  silence.samples.assign(24000, 0.0);
  auto lm0 = log_mel(silence, cfg);
  REQUIRE(lm0.shape() == Shape{94, 100});
  for (double v : lm0.data()) REQUIRE(v == std::log(1e-10));

  Rng rng(13);
  auto w1 = sine(440.0, 24000, 24000, 0.3);
  for (auto& s : w1.samples) s += 0.01 * rng.normal();
  Waveform w2 = w1;
  for (auto& s : w2.samples) s *= 2.0;

  auto a = log_mel(w1, cfg), b = log_mel(w2, cfg);
  const double log4 = std::log(4.0);
  std::size_t argmax = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    REQUIRE(b.data()[i] >= a.data()[i]);  // louder never lowers an entry
    REQUIRE(b.data()[i] - a.data()[i] <= log4 + 1e-9);
    if (a.data()[i] > a.data()[argmax]) argmax = i;
  }
  REQUIRE_THAT(b.data()[argmax] - a.data()[argmax], WithinAbs(log4, 1e-6));

  Waveform wrong_rate = w1;
  wrong_rate.sample_rate = 16000;
  REQUIRE_THROWS_WITH(log_mel(wrong_rate, cfg), ContainsSubstring("rate"));
}

TEST_CASE("interior frames shift with the signal", "[features]") {
  Rng rng(14);
  Waveform sig;
  sig.sample_rate = 24000;
  sig.samples.resize(4096);
  for (auto& s : sig.samples) s = 0.2 * rng.normal();

  const int64_t hop = 256, n_fft = 1024, lead_frames = 8;
  Waveform shifted;
  shifted.sample_rate = 24000;
  shifted.samples.assign(static_cast<std::size_t>(lead_frames * hop), 0.0);
  shifted.samples.insert(shifted.samples.end(), sig.samples.begin(), sig.samples.end());

  auto s1 = stft(sig, n_fft, hop);
  auto s2 = stft(shifted, n_fft, hop);
  int64_t interior = 0;
  for (int64_t k = 0; k < s1.frames; ++k) {
    const int64_t start = k * hop - n_fft / 2;
    if (start < 0 || start + n_fft > static_cast<int64_t>(sig.samples.size())) continue;
    ++interior;
    for (int64_t b = 0; b < s1.bins; ++b)
      REQUIRE_THAT(std::abs(s2.at(k + lead_frames, b) - s1.at(k, b)), WithinAbs(0.0, 1e-6));
  }
  REQUIRE(interior > 5);
}

TEST_CASE("feature dumps round-trip and detect corruption", "[io]") {
  const auto path = temp_file("feat.f32");
  Tensor<double> t({3, 2}, {1.5, -2.0, 0.25, 1e-3, 9.0, -0.5});
  write_f32_file(path.string(), t);
  auto back = read_f32_tensor<double>(path.string());
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i)
    REQUIRE(back.data()[i] == static_cast<double>(static_cast<float>(t.data()[i])));

  // empty tensors and rank-0 scalars survive
  write_f32_file(path.string(), Shape{0, 4}, {});
  REQUIRE(read_f32_file(path.string()).shape == Shape{0, 4});
  write_f32_file(path.string(), Shape{}, {2.5f});
  REQUIRE(read_f32_file(path.string()).data == std::vector<float>{2.5f});

  write_f32_file(path.string(), t);
  auto whole = detail::slurp(path.string(), "test");
  detail::spill(path.string(), whole.substr(0, whole.size() - 2), "test");
  REQUIRE_THROWS_WITH(read_f32_file(path.string()), ContainsSubstring("truncated"));
  detail::spill(path.string(), whole + "xx", "test");
  REQUIRE_THROWS_WITH(read_f32_file(path.string()), ContainsSubstring("trailing bytes"));

  REQUIRE_THROWS_WITH(read_f32_file("/nonexistent/feat.f32"), ContainsSubstring("cannot open"));
  REQUIRE_THROWS_WITH(write_f32_file(path.string(), Shape{3}, {1.0f}),
                      ContainsSubstring("do not match shape"));
}

TEST_CASE("wav files round-trip within quantization error", "[io]") {
  auto w = sine(440.0, 24000, 2400, 0.7);
  const auto path = temp_file("tone.wav");
  write_wav(path.string(), w);
  auto back = read_wav(path.string());
  REQUIRE(back.sample_rate == 24000);
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    REQUIRE_THAT(back.samples[i], WithinAbs(w.samples[i], 1.0 / 32768.0));

  REQUIRE_THROWS_WITH(read_wav("/nonexistent/tone.wav"), ContainsSubstring("cannot open"));

  const auto bad = temp_file("bad.wav");
  detail::spill(bad.string(), "not a wav file at all", "test");
  REQUIRE_THROWS_WITH(read_wav(bad.string()), ContainsSubstring("not a RIFF file"));

  // craft a stereo header: read must refuse it
  auto whole = detail::slurp(path.string(), "test");
  whole[22] = 2;  // channel count lives at byte 22 of the canonical header
  detail::spill(bad.string(), whole, "test");
  REQUIRE_THROWS_WITH(read_wav(bad.string()), ContainsSubstring("only mono"));

  // truncated payload
  detail::spill(bad.string(), detail::slurp(path.string(), "test").substr(0, 100), "test");
  REQUIRE_THROWS_WITH(read_wav(bad.string()), ContainsSubstring("truncated"));
}
