#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "mimt/dsp.hpp"
#include "mimt/wav.hpp"
#include "support/reference_dsp.hpp"

using namespace mimt;

namespace {

Waveform sine(double freq, double seconds, double amp = 0.5, int rate = kSampleRate) {
  Waveform w;
  w.sample_rate = rate;
  const size_t n = static_cast<size_t>(seconds * rate);
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i)
    w.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / rate);
  return w;
}

Waveform noise(size_t n, uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  Waveform w;
  w.samples.resize(n);
  for (auto& s : w.samples) s = u(rng);
  return w;
}

int argmax_bin(const dsp::Spectrogram& s, int frame) {
  int best = 0;
  for (int k = 1; k < s.bins; ++k)
    if (std::abs(s.at(frame, k)) > std::abs(s.at(frame, best))) best = k;
  return best;
}

}  // namespace

TEST_CASE("stft of zeros is zero with the expected frame count") {
  Waveform w;
  w.samples.assign(960, 0.0);
  const auto s = dsp::stft(w, 240, 120);
  CHECK(s.frames == 9);
  CHECK(s.bins == 121);
  for (const auto& v : s.data) CHECK(std::abs(v) == 0.0);
}

TEST_CASE("stft of a 1 kHz sine peaks at bin 40") {
  const Waveform w = sine(1000.0, 1.0);
  const auto s = dsp::stft(w, 960, 480);
  // interior frame, away from edge reflections
  CHECK(argmax_bin(s, s.frames / 2) == 40);
}

TEST_CASE("stft matches the direct-summation reference DFT") {
  const Waveform w = noise(2000, 11);
  const auto s = dsp::stft(w, 240, 120);
  const auto ref = refdsp::stft_mag(w.samples, 240, 120);
  REQUIRE(static_cast<size_t>(s.frames) == ref.size());
  for (int t = 0; t < s.frames; ++t)
    for (int k = 0; k < s.bins; ++k)
      CHECK_THAT(std::abs(s.at(t, k)),
                 Catch::Matchers::WithinAbs(ref[static_cast<size_t>(t)][static_cast<size_t>(k)], 1e-9));
}

TEST_CASE("stft satisfies Parseval per frame") {
  const Waveform w = noise(1500, 3);
  const int window = 240, hop = 120;
  const auto s = dsp::stft(w, window, hop);
  const auto win = dsp::normalized_hann(window);

  for (int t : {2, 5, 8}) {
    // rebuild the windowed frame with the same padding rule
    double energy = 0.0;
    const long long start = static_cast<long long>(t) * hop - window / 2;
    for (int n = 0; n < window; ++n) {
      const double x = w.samples[dsp::detail::reflect_index(start + n, w.samples.size())] *
                       win[static_cast<size_t>(n)];
      energy += x * x;
    }
    // full-spectrum power from the one-sided data
    double power = std::norm(s.at(t, 0)) + std::norm(s.at(t, s.bins - 1));
    for (int k = 1; k < s.bins - 1; ++k) power += 2.0 * std::norm(s.at(t, k));
    CHECK_THAT(power, Catch::Matchers::WithinRel(window * energy, 1e-6));
  }
}

TEST_CASE("stft rejects bad input") {
  Waveform empty;
  CHECK_THROWS_WITH(dsp::stft(empty, 240, 120), Catch::Matchers::ContainsSubstring("empty input"));
  Waveform bad;
  bad.samples = {0.1, std::nan(""), 0.2};
  CHECK_THROWS_WITH(dsp::stft(bad, 2, 1), Catch::Matchers::ContainsSubstring("invalid sample"));
}

TEST_CASE("appending silence leaves interior frames untouched") {
  const Waveform w = noise(2400, 17);
  Waveform longer = w;
  longer.samples.resize(w.samples.size() + 960, 0.0);
  const auto a = dsp::stft(w, 240, 120);
  const auto b = dsp::stft(longer, 240, 120);
  REQUIRE(b.frames > a.frames);
  // frames whose window stays clear of either boundary
  for (int t = 2; t < a.frames - 2; ++t)
    for (int k = 0; k < a.bins; ++k) CHECK(std::abs(a.at(t, k) - b.at(t, k)) < 1e-12);
}

TEST_CASE("mel scale parameters follow the 2^i family") {
  const auto p5 = dsp::mel_scale_params(5);
  CHECK(p5.n_mels == 32);
  CHECK(p5.window == 240);
  CHECK(p5.hop == 120);
  const auto p7 = dsp::mel_scale_params(7);
  CHECK(p7.n_mels == 128);
  CHECK(p7.window == 960);
  CHECK(p7.hop == 480);
  for (int i : {5, 6, 7}) {
    const auto p = dsp::mel_scale_params(i);
    CHECK(p.window == 2 * p.hop);
    CHECK(p.n_mels <= p.window / 2 + 1);
  }
}

TEST_CASE("mel of silence sits at the log floor") {
  Waveform w;
  w.samples.assign(24000, 0.0);
  const auto m = dsp::mel_spectrogram(w, 5);
  for (double v : m.frames) CHECK_THAT(v, Catch::Matchers::WithinAbs(std::log(1e-5), 1e-12));
}

TEST_CASE("mel rejects too-short input") {
  Waveform w;
  w.samples.assign(100, 0.1);
  CHECK_THROWS_WITH(dsp::mel_spectrogram(w, 5), Catch::Matchers::ContainsSubstring("input too short"));
}

TEST_CASE("mel filterbank rows all sum to a positive value") {
  for (int i : {5, 6, 7}) {
    const auto p = dsp::mel_scale_params(i);
    const auto fb = dsp::mel_filterbank(p.n_mels, p.window, kSampleRate);
    const int bins = p.window / 2 + 1;
    for (int j = 0; j < p.n_mels; ++j) {
      double s = 0.0;
      for (int k = 0; k < bins; ++k) s += fb[static_cast<size_t>(j) * bins + k];
      CHECK(s > 0.0);
    }
  }
  // the 100 Hz tokenizer front-end filterbank too
  const auto fb = dsp::mel_filterbank(dsp::kEncoderMel.n_mels, dsp::kEncoderMel.window, kSampleRate);
  const int bins = dsp::kEncoderMel.window / 2 + 1;
  for (int j = 0; j < dsp::kEncoderMel.n_mels; ++j) {
    double s = 0.0;
    for (int k = 0; k < bins; ++k) s += fb[static_cast<size_t>(j) * bins + k];
    CHECK(s > 0.0);
  }
}

TEST_CASE("multiscale mel loss is a pseudometric") {
  const Waveform x = sine(440.0, 0.3);
  const Waveform y = noise(x.samples.size(), 5);
  CHECK(dsp::multiscale_mel_loss(x, x) == 0.0);
  CHECK(dsp::multiscale_mel_loss(y, y) == 0.0);
  const double xy = dsp::multiscale_mel_loss(x, y);
  CHECK(xy > 0.0);
  CHECK(xy == dsp::multiscale_mel_loss(y, x));
}

TEST_CASE("multiscale mel loss matches the independent reference pipeline") {
  const Waveform x = sine(440.0, 0.3);
  Waveform y = x;
  for (auto& s : y.samples) s *= 0.5;
  const double ours = dsp::multiscale_mel_loss(x, y);
  const double ref = refdsp::multiscale_loss(x.samples, y.samples, kSampleRate);
  CHECK_THAT(ours, Catch::Matchers::WithinAbs(ref, 1e-9));
}

TEST_CASE("multiscale mel loss rejects mismatched input") {
  const Waveform x = sine(440.0, 0.3);
  Waveform y = x;
  y.samples.pop_back();
  CHECK_THROWS_WITH(dsp::multiscale_mel_loss(x, y), Catch::Matchers::ContainsSubstring("length mismatch"));
}

TEST_CASE("griffin_lim recovers the dominant bin of a sine") {
  const Waveform in = sine(440.0, 0.25);
  const auto mel = dsp::mel_spectrogram(in, 7);
  const Waveform out = dsp::griffin_lim(mel, 60);
  const auto si = dsp::stft(in, 960, 480);
  const auto so = dsp::stft(out, 960, 480);
  CHECK(argmax_bin(so, so.frames / 2) == argmax_bin(si, si.frames / 2));
}

TEST_CASE("griffin_lim mel distance is non-increasing with iterations in most trials") {
  int improved = 0;
  const int trials = 10;
  for (int trial = 0; trial < trials; ++trial) {
    const Waveform in = noise(6000, 100 + static_cast<uint64_t>(trial));
    const auto target = dsp::mel_spectrogram(in, 7);
    auto dist = [&](const Waveform& w) {
      const auto m = dsp::mel_spectrogram(w, 7);
      double acc = 0.0;
      const size_t n = std::min(m.frames.size(), target.frames.size());
      for (size_t i = 0; i < n; ++i) acc += std::fabs(m.frames[i] - target.frames[i]);
      return acc / static_cast<double>(n);
    };
    const double d1 = dist(dsp::griffin_lim(target, 1));
    const double d30 = dist(dsp::griffin_lim(target, 30));
    if (d30 <= d1 + 1e-12) ++improved;
  }
  CHECK(improved >= (trials * 9) / 10);
}

TEST_CASE("griffin_lim of an all-floor mel is near silent") {
  dsp::MelSpec m;
  m.n_frames = 8;
  m.n_mels = 128;
  m.scale_index = 7;
  m.frame_rate = 50.0;
  m.frames.assign(static_cast<size_t>(m.n_frames) * m.n_mels, std::log(1e-5));
  const Waveform out = dsp::griffin_lim(m, 10);
  double peak = 0.0;
  for (double s : out.samples) peak = std::max(peak, std::fabs(s));
  CHECK(peak < 1e-3);
}

TEST_CASE("resample_linear length and constancy") {
  Waveform w;
  w.sample_rate = 48000;
  w.samples.assign(48000, 0.25);
  const Waveform half = dsp::resample_linear(w, 24000);
  CHECK(half.samples.size() == 24000);
  CHECK(half.sample_rate == 24000);
  for (double s : half.samples) CHECK(s == 0.25);
}

TEST_CASE("resample_linear round trip on smooth input") {
  Waveform w;
  w.sample_rate = 48000;
  w.samples.resize(4800);
  for (size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = 0.2 + 0.3 * static_cast<double>(i) / static_cast<double>(w.samples.size());
  const Waveform down = dsp::resample_linear(w, 24000);
  const Waveform up = dsp::resample_linear(down, 48000);
  REQUIRE(up.samples.size() == w.samples.size());
  double err = 0.0;
  for (size_t i = 0; i < w.samples.size(); ++i)
    err = std::max(err, std::fabs(up.samples[i] - w.samples[i]));
  CHECK(err < 1e-3);
}
