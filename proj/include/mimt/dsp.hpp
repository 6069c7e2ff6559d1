#pragma once

// Spectral front end: normalized STFT, Slaney mel filterbanks at the
// 2^i scale family, the multi-scale mel reconstruction loss, Griffin-Lim
// phase recovery for audible output, and linear resampling.

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "mimt/wav.hpp"

namespace mimt::dsp {

using cplx = std::complex<double>;

inline constexpr double kLogFloor = 1e-5;

// ---------------------------------------------------------------------------
// FFT: iterative radix-2 for power-of-two sizes, Bluestein otherwise.

namespace detail {

inline bool is_pow2(size_t n) { return n && (n & (n - 1)) == 0; }

inline void fft_radix2(std::vector<cplx>& a, bool inverse) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const cplx wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        cplx u = a[i + j];
        cplx v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

// Bluestein chirp-z: arbitrary-length DFT via a power-of-two convolution.
inline std::vector<cplx> dft_bluestein(const std::vector<cplx>& x, bool inverse) {
  const size_t n = x.size();
  size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;

  std::vector<cplx> chirp(n);
  for (size_t k = 0; k < n; ++k) {
    const size_t kk = (k * k) % (2 * n);
    const double ang = std::numbers::pi * static_cast<double>(kk) / static_cast<double>(n) *
                       (inverse ? 1.0 : -1.0);
    chirp[k] = cplx(std::cos(ang), -std::sin(ang));
  }

  std::vector<cplx> a(m, cplx(0, 0)), b(m, cplx(0, 0));
  for (size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
  b[0] = std::conj(chirp[0]);
  for (size_t k = 1; k < n; ++k) b[k] = b[m - k] = std::conj(chirp[k]);

  fft_radix2(a, false);
  fft_radix2(b, false);
  for (size_t k = 0; k < m; ++k) a[k] *= b[k];
  fft_radix2(a, true);

  std::vector<cplx> out(n);
  for (size_t k = 0; k < n; ++k) out[k] = a[k] * chirp[k];
  if (inverse) {
    for (auto& v : out) v /= static_cast<double>(n);
  }
  return out;
}

inline void dft(std::vector<cplx>& a, bool inverse) {
  if (is_pow2(a.size())) {
    fft_radix2(a, inverse);
  } else {
    a = dft_bluestein(a, inverse);
  }
}

// Reflection index for center-padded framing (bounces at 0 and len-1).
inline size_t reflect_index(long long p, size_t len) {
  if (len == 1) return 0;
  const long long period = 2 * (static_cast<long long>(len) - 1);
  long long q = p % period;
  if (q < 0) q += period;
  if (q >= static_cast<long long>(len)) q = period - q;
  return static_cast<size_t>(q);
}

}  // namespace detail

// Hann window scaled by its L1 sum, so a DC input maps to unit magnitude
// in bin 0 regardless of window size.
inline std::vector<double> normalized_hann(int window) {
  std::vector<double> w(static_cast<size_t>(window));
  double sum = 0;
  for (int n = 0; n < window; ++n) {
    w[static_cast<size_t>(n)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / static_cast<double>(window)));
    sum += w[static_cast<size_t>(n)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

struct Spectrogram {
  int n_fft = 0;
  int hop = 0;
  int frames = 0;
  int bins = 0;  // n_fft/2 + 1
  std::vector<cplx> data;  // frames x bins, row-major

  cplx& at(int t, int k) { return data[static_cast<size_t>(t) * bins + k]; }
  const cplx& at(int t, int k) const { return data[static_cast<size_t>(t) * bins + k]; }
};

// Centered frames over a reflect-padded signal: T = 1 + floor(len/hop)
// for even windows.
inline Spectrogram stft(const Waveform& w, int window_size, int hop) {
  if (window_size <= 0 || hop <= 0 || hop > window_size)
    throw std::invalid_argument("stft: bad window/hop");
  if (w.samples.empty()) throw std::invalid_argument("empty input");
  for (double s : w.samples) {
    if (!std::isfinite(s)) throw std::invalid_argument("invalid sample");
  }

  const int n_fft = window_size;
  const int pad = window_size / 2;
  const long long len = static_cast<long long>(w.samples.size());
  const long long padded = len + 2LL * pad;
  const int frames = static_cast<int>(1 + (padded - window_size) / hop);
  const std::vector<double> win = normalized_hann(window_size);

  Spectrogram s;
  s.n_fft = n_fft;
  s.hop = hop;
  s.frames = frames;
  s.bins = n_fft / 2 + 1;
  s.data.resize(static_cast<size_t>(frames) * s.bins);

  std::vector<cplx> buf(static_cast<size_t>(n_fft));
  for (int t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t) * hop - pad;
    for (int n = 0; n < n_fft; ++n) {
      const double x = w.samples[detail::reflect_index(start + n, w.samples.size())];
      buf[static_cast<size_t>(n)] = cplx(x * win[static_cast<size_t>(n)], 0.0);
    }
    detail::dft(buf, false);
    for (int k = 0; k < s.bins; ++k) s.at(t, k) = buf[static_cast<size_t>(k)];
  }
  return s;
}

// Overlap-add inverse of stft with the same normalized window.
inline Waveform istft(const Spectrogram& s, size_t out_len, int sample_rate) {
  const int n_fft = s.n_fft;
  const int pad = n_fft / 2;
  const std::vector<double> win = normalized_hann(n_fft);
  const size_t full = static_cast<size_t>(s.frames - 1) * s.hop + n_fft;

  std::vector<double> acc(full, 0.0), norm(full, 0.0);
  std::vector<cplx> buf(static_cast<size_t>(n_fft));
  for (int t = 0; t < s.frames; ++t) {
    for (int k = 0; k < s.bins; ++k) buf[static_cast<size_t>(k)] = s.at(t, k);
    for (int k = s.bins; k < n_fft; ++k) buf[static_cast<size_t>(k)] = std::conj(s.at(t, n_fft - k));
    detail::dft(buf, true);
    const size_t off = static_cast<size_t>(t) * s.hop;
    for (int n = 0; n < n_fft; ++n) {
      acc[off + n] += buf[static_cast<size_t>(n)].real() * win[static_cast<size_t>(n)];
      norm[off + n] += win[static_cast<size_t>(n)] * win[static_cast<size_t>(n)];
    }
  }

  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(out_len, 0.0);
  for (size_t n = 0; n < out_len; ++n) {
    const size_t p = n + pad;
    if (p < full && norm[p] > 1e-12) w.samples[n] = acc[p] / norm[p];
  }
  return w;
}

// ---------------------------------------------------------------------------
// Mel filterbank (Slaney scale and normalization), 0 Hz to Nyquist.

namespace detail {

inline double hz_to_mel(double f) {
  if (f < 1000.0) return 3.0 * f / 200.0;
  return 15.0 + 27.0 * std::log(f / 1000.0) / std::log(6.4);
}

inline double mel_to_hz(double m) {
  if (m < 15.0) return 200.0 * m / 3.0;
  return 1000.0 * std::exp(std::log(6.4) * (m - 15.0) / 27.0);
}

}  // namespace detail

// Rows are filters (n_mels x bins), each area-normalized by 2/bandwidth.
inline std::vector<double> mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int bins = n_fft / 2 + 1;
  const double fmax = sample_rate / 2.0;
  const double mel_max = detail::hz_to_mel(fmax);

  std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
  for (int j = 0; j < n_mels + 2; ++j)
    edges[static_cast<size_t>(j)] = detail::mel_to_hz(mel_max * j / (n_mels + 1));

  std::vector<double> fb(static_cast<size_t>(n_mels) * bins, 0.0);
  for (int j = 0; j < n_mels; ++j) {
    const double lo = edges[static_cast<size_t>(j)];
    const double mid = edges[static_cast<size_t>(j) + 1];
    const double hi = edges[static_cast<size_t>(j) + 2];
    const double area = 2.0 / (hi - lo);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      double v = 0.0;
      if (f > lo && f < hi) v = (f <= mid) ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      fb[static_cast<size_t>(j) * bins + k] = v * area;
    }
  }
  return fb;
}

struct MelParams {
  int n_mels = 0;
  int window = 0;
  int hop = 0;
  int scale_index = -1;
};

// Loss-scale family: 2^i bins, window 15*2^(i-1), hop 15*2^(i-2).
inline MelParams mel_scale_params(int i) {
  if (i < 3) throw std::invalid_argument("mel scale index must be >= 3");
  MelParams p;
  p.n_mels = 1 << i;
  p.window = 15 * (1 << (i - 1));
  p.hop = 15 * (1 << (i - 2));
  p.scale_index = i;
  return p;
}

// Tokenizer front-end mel: 100 Hz frame rate at 24 kHz.
inline constexpr MelParams kEncoderMel{128, 480, 240, -1};

struct MelScaleConfig {
  std::vector<int> scales = {5, 6, 7};
};

struct MelSpec {
  std::vector<double> frames;  // T x n_mels, row-major log energies
  int n_frames = 0;
  int n_mels = 0;
  double frame_rate = 0.0;
  int scale_index = -1;

  double& at(int t, int m) { return frames[static_cast<size_t>(t) * n_mels + m]; }
  double at(int t, int m) const { return frames[static_cast<size_t>(t) * n_mels + m]; }
};

inline MelSpec mel_spectrogram(const Waveform& w, const MelParams& p) {
  if (static_cast<int>(w.samples.size()) < p.window) throw std::invalid_argument("input too short");
  const Spectrogram s = stft(w, p.window, p.hop);
  const std::vector<double> fb = mel_filterbank(p.n_mels, p.window, w.sample_rate);
  const int bins = s.bins;

  MelSpec m;
  m.n_frames = s.frames;
  m.n_mels = p.n_mels;
  m.frame_rate = static_cast<double>(w.sample_rate) / p.hop;
  m.scale_index = p.scale_index;
  m.frames.resize(static_cast<size_t>(s.frames) * p.n_mels);
  for (int t = 0; t < s.frames; ++t) {
    for (int j = 0; j < p.n_mels; ++j) {
      double e = 0.0;
      for (int k = 0; k < bins; ++k) e += fb[static_cast<size_t>(j) * bins + k] * std::abs(s.at(t, k));
      m.at(t, j) = std::log(std::max(e, kLogFloor));
    }
  }
  return m;
}

inline MelSpec mel_spectrogram(const Waveform& w, int scale_index) {
  return mel_spectrogram(w, mel_scale_params(scale_index));
}

// Sum over scales of the mean L1 distance between log-mel spectrograms.
inline double multiscale_mel_loss(const Waveform& x, const Waveform& y,
                                  const MelScaleConfig& cfg = {}) {
  if (x.samples.size() != y.samples.size()) throw std::invalid_argument("length mismatch");
  if (x.sample_rate != y.sample_rate) throw std::invalid_argument("sample rate mismatch");
  double total = 0.0;
  for (int i : cfg.scales) {
    const MelSpec mx = mel_spectrogram(x, i);
    const MelSpec my = mel_spectrogram(y, i);
    double acc = 0.0;
    for (size_t k = 0; k < mx.frames.size(); ++k) acc += std::abs(mx.frames[k] - my.frames[k]);
    total += acc / static_cast<double>(mx.frames.size());
  }
  return total;
}

// ---------------------------------------------------------------------------
// Griffin-Lim over a mel target: ridge least-squares mel inversion to a
// magnitude spectrogram, then alternating STFT projections.

namespace detail {

// Solves (A + lambda I) X = B for SPD A via Cholesky, B has many columns.
class RidgeSolver {
public:
  RidgeSolver(const std::vector<double>& fb, int n_mels, int bins, double lambda) : n_(bins) {
    // A = F^T F + lambda I  (bins x bins)
    l_.assign(static_cast<size_t>(n_) * n_, 0.0);
    for (int a = 0; a < n_; ++a) {
      for (int b = 0; b <= a; ++b) {
        double v = 0.0;
        for (int j = 0; j < n_mels; ++j)
          v += fb[static_cast<size_t>(j) * bins + a] * fb[static_cast<size_t>(j) * bins + b];
        if (a == b) v += lambda;
        l_[static_cast<size_t>(a) * n_ + b] = v;
      }
    }
    // in-place lower Cholesky
    for (int a = 0; a < n_; ++a) {
      for (int b = 0; b <= a; ++b) {
        double v = l_[static_cast<size_t>(a) * n_ + b];
        for (int k = 0; k < b; ++k)
          v -= l_[static_cast<size_t>(a) * n_ + k] * l_[static_cast<size_t>(b) * n_ + k];
        if (a == b) {
          if (v <= 0) throw std::runtime_error("mel inversion: matrix not positive definite");
          l_[static_cast<size_t>(a) * n_ + b] = std::sqrt(v);
        } else {
          l_[static_cast<size_t>(a) * n_ + b] = v / l_[static_cast<size_t>(b) * n_ + b];
        }
      }
    }
  }

  void solve(std::vector<double>& rhs) const {
    for (int a = 0; a < n_; ++a) {
      double v = rhs[static_cast<size_t>(a)];
      for (int k = 0; k < a; ++k) v -= l_[static_cast<size_t>(a) * n_ + k] * rhs[static_cast<size_t>(k)];
      rhs[static_cast<size_t>(a)] = v / l_[static_cast<size_t>(a) * n_ + a];
    }
    for (int a = n_ - 1; a >= 0; --a) {
      double v = rhs[static_cast<size_t>(a)];
      for (int k = a + 1; k < n_; ++k) v -= l_[static_cast<size_t>(k) * n_ + a] * rhs[static_cast<size_t>(k)];
      rhs[static_cast<size_t>(a)] = v / l_[static_cast<size_t>(a) * n_ + a];
    }
  }

private:
  int n_;
  std::vector<double> l_;
};

}  // namespace detail

inline Waveform griffin_lim(const MelSpec& m, int iterations, int sample_rate = kSampleRate) {
  if (iterations < 1) throw std::invalid_argument("griffin_lim: iterations must be >= 1");
  if (m.scale_index < 3) throw std::invalid_argument("griffin_lim: mel produced without a scale index");
  const MelParams p = mel_scale_params(m.scale_index);
  const int bins = p.window / 2 + 1;
  const std::vector<double> fb = mel_filterbank(p.n_mels, p.window, sample_rate);

  // target magnitudes: solve F s = exp(mel) per frame, clip at zero; the
  // log floor energy is subtracted so silent channels invert to silence
  detail::RidgeSolver solver(fb, p.n_mels, bins, 1e-6);
  std::vector<double> mag(static_cast<size_t>(m.n_frames) * bins, 0.0);
  std::vector<double> rhs(static_cast<size_t>(bins));
  for (int t = 0; t < m.n_frames; ++t) {
    for (int k = 0; k < bins; ++k) {
      double v = 0.0;
      for (int j = 0; j < p.n_mels; ++j)
        v += fb[static_cast<size_t>(j) * bins + k] *
             std::max(std::exp(m.at(t, j)) - kLogFloor, 0.0);
      rhs[static_cast<size_t>(k)] = v;
    }
    solver.solve(rhs);
    for (int k = 0; k < bins; ++k)
      mag[static_cast<size_t>(t) * bins + k] = std::max(rhs[static_cast<size_t>(k)], 0.0);
  }

  const size_t out_len = static_cast<size_t>(m.n_frames > 1 ? (m.n_frames - 1) * p.hop : p.hop);

  Spectrogram s;
  s.n_fft = p.window;
  s.hop = p.hop;
  s.frames = m.n_frames;
  s.bins = bins;
  s.data.resize(static_cast<size_t>(m.n_frames) * bins);
  for (size_t k = 0; k < s.data.size(); ++k) s.data[k] = cplx(mag[k], 0.0);

  Waveform x = istft(s, out_len, sample_rate);
  for (int it = 1; it < iterations; ++it) {
    Spectrogram est = stft(x, p.window, p.hop);
    const int frames = std::min(est.frames, s.frames);
    for (int t = 0; t < frames; ++t) {
      for (int k = 0; k < bins; ++k) {
        const cplx v = est.at(t, k);
        const double a = std::abs(v);
        s.at(t, k) = (a > 1e-12) ? v / a * mag[static_cast<size_t>(t) * bins + k]
                                 : cplx(mag[static_cast<size_t>(t) * bins + k], 0.0);
      }
    }
    x = istft(s, out_len, sample_rate);
  }
  return x;
}

// ---------------------------------------------------------------------------

inline Waveform resample_linear(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
  if (w.sample_rate == target_rate || w.samples.empty()) {
    Waveform out = w;
    out.sample_rate = target_rate;
    return out;
  }
  const size_t n = w.samples.size();
  const size_t out_len = static_cast<size_t>(std::llround(
      static_cast<double>(n) * target_rate / static_cast<double>(w.sample_rate)));

  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (size_t j = 0; j < out_len; ++j) {
    const double pos = (out_len > 1)
        ? static_cast<double>(j) * static_cast<double>(n - 1) / static_cast<double>(out_len - 1)
        : 0.0;
    const size_t i0 = static_cast<size_t>(pos);
    const size_t i1 = std::min(i0 + 1, n - 1);
    const double frac = pos - static_cast<double>(i0);
    out.samples[j] = w.samples[i0] * (1.0 - frac) + w.samples[i1] * frac;
  }
  return out;
}

}  // namespace mimt::dsp
