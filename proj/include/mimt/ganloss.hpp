#pragma once

// Adversarial loss suite: hinge discriminator/generator losses, feature
// matching, the fixed-weight composites, and discriminator input
// transforms (period folding, multi-scale STFT magnitudes). Losses come
// in two forms: plain arithmetic over score/feature containers, and
// tape ops for end-to-end training through the toy discriminators.

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "mimt/dsp.hpp"
#include "mimt/mat.hpp"
#include "mimt/nn.hpp"

namespace mimt::gan {

using ScoreSet = std::vector<std::vector<double>>;      // per sub-discriminator
using FeatureSet = std::vector<std::vector<Mat>>;       // per sub-discriminator, per layer

struct LossWeights {
  double recon = 1.0;
  double adv = 1.0;
  double fm = 2.0;
};

struct Stage1Weights {
  double a2t = 10.0;
  double recon = 1.0;
  double commit = 1.0;
};

// ---------------------------------------------------------------------------
// Pure forms.

inline double hinge_d_loss(const ScoreSet& real, const ScoreSet& fake) {
  if (real.size() != fake.size() || real.empty())
    throw std::invalid_argument("hinge_d_loss: sub-discriminator count mismatch");
  double acc = 0.0;
  for (size_t k = 0; k < real.size(); ++k) {
    double r = 0.0, f = 0.0;
    for (double s : real[k]) r += std::max(0.0, 1.0 - s);
    for (double s : fake[k]) f += std::max(0.0, 1.0 + s);
    acc += r / static_cast<double>(real[k].size()) + f / static_cast<double>(fake[k].size());
  }
  return acc / static_cast<double>(real.size());
}

inline double hinge_g_loss(const ScoreSet& fake) {
  if (fake.empty()) throw std::invalid_argument("hinge_g_loss: empty score set");
  double acc = 0.0;
  for (const auto& scores : fake) {
    double m = 0.0;
    for (double s : scores) m += s;
    acc += m / static_cast<double>(scores.size());
  }
  return -acc / static_cast<double>(fake.size());
}

inline double feature_matching_loss(const FeatureSet& real, const FeatureSet& fake) {
  if (real.size() != fake.size()) throw std::invalid_argument("feature_matching_loss: K mismatch");
  double acc = 0.0;
  for (size_t k = 0; k < real.size(); ++k) {
    if (real[k].size() != fake[k].size())
      throw std::invalid_argument("feature_matching_loss: layer count mismatch at sub-discriminator " +
                                  std::to_string(k));
    double layer_acc = 0.0;
    for (size_t l = 0; l < real[k].size(); ++l) {
      const Mat& a = real[k][l];
      const Mat& b = fake[k][l];
      if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("feature_matching_loss: shape mismatch at (" + std::to_string(k) +
                                    ", " + std::to_string(l) + ")");
      double s = 0.0;
      for (size_t i = 0; i < a.v.size(); ++i) s += std::fabs(a.v[i] - b.v[i]);
      layer_acc += s / static_cast<double>(a.v.size());
    }
    acc += layer_acc / static_cast<double>(real[k].size());
  }
  return acc / static_cast<double>(real.size());
}

inline double generator_total(double recon, double adv, double fm, const LossWeights& w = {}) {
  return w.recon * recon + w.adv * adv + w.fm * fm;
}

inline double stage1_total(double a2t, double recon, double commit, const Stage1Weights& w = {}) {
  return w.a2t * a2t + w.recon * recon + w.commit * commit;
}

// Right-pad with zeros to a multiple of `period`, reshape row-major.
inline Mat mpd_fold(const std::vector<double>& w, int period) {
  if (period < 1) throw std::invalid_argument("mpd_fold: period must be >= 1");
  const int rows = w.empty() ? 0 : static_cast<int>((w.size() + period - 1) / period);
  Mat out(rows, period);
  for (size_t i = 0; i < w.size(); ++i) out.v[i] = w[i];
  return out;
}

inline constexpr int kDefaultMpdPeriods[] = {2, 3, 5, 7, 11};

// ---------------------------------------------------------------------------
// Tape forms.

inline nn::Value hinge_d_loss(nn::Tape& tp, const std::vector<nn::Value>& real,
                              const std::vector<nn::Value>& fake) {
  if (real.size() != fake.size() || real.empty())
    throw std::invalid_argument("hinge_d_loss: sub-discriminator count mismatch");
  nn::Value acc;
  for (size_t k = 0; k < real.size(); ++k) {
    nn::Value ones_r = nn::constant_row(std::vector<double>(real[k]->size(), 1.0));
    nn::Value ones_f = nn::constant_row(std::vector<double>(fake[k]->size(), 1.0));
    nn::Value r = tp.mean_all(tp.relu(tp.add(tp.reshape(tp.scale(real[k], -1.0), ones_r->shape), ones_r)));
    nn::Value f = tp.mean_all(tp.relu(tp.add(tp.reshape(fake[k], ones_f->shape), ones_f)));
    nn::Value term = tp.add(r, f);
    acc = acc ? tp.add(acc, term) : term;
  }
  return tp.scale(acc, 1.0 / static_cast<double>(real.size()));
}

inline nn::Value hinge_g_loss(nn::Tape& tp, const std::vector<nn::Value>& fake) {
  if (fake.empty()) throw std::invalid_argument("hinge_g_loss: empty score set");
  nn::Value acc;
  for (const auto& s : fake) {
    nn::Value m = tp.mean_all(s);
    acc = acc ? tp.add(acc, m) : m;
  }
  return tp.scale(acc, -1.0 / static_cast<double>(fake.size()));
}

inline nn::Value feature_matching_loss(nn::Tape& tp, const std::vector<std::vector<nn::Value>>& real,
                                       const std::vector<std::vector<nn::Value>>& fake) {
  if (real.size() != fake.size() || real.empty())
    throw std::invalid_argument("feature_matching_loss: K mismatch");
  nn::Value acc;
  for (size_t k = 0; k < real.size(); ++k) {
    if (real[k].size() != fake[k].size())
      throw std::invalid_argument("feature_matching_loss: layer count mismatch");
    nn::Value layer_acc;
    for (size_t l = 0; l < real[k].size(); ++l) {
      nn::Value d = tp.mean_all(tp.abs(tp.add(real[k][l], tp.scale(fake[k][l], -1.0))));
      layer_acc = layer_acc ? tp.add(layer_acc, d) : d;
    }
    layer_acc = tp.scale(layer_acc, 1.0 / static_cast<double>(real[k].size()));
    acc = acc ? tp.add(acc, layer_acc) : layer_acc;
  }
  return tp.scale(acc, 1.0 / static_cast<double>(real.size()));
}

// Fold as a tape op: zero-padded reshape, gradient is the unfold.
inline nn::Value mpd_fold(nn::Tape& tp, const nn::Value& w, int period) {
  if (period < 1) throw std::invalid_argument("mpd_fold: period must be >= 1");
  const size_t n = w->size();
  const int rows = n == 0 ? 0 : static_cast<int>((n + period - 1) / static_cast<size_t>(period));
  nn::Value out = nn::make_value({rows, period});
  for (size_t i = 0; i < n; ++i) out->v[i] = w->v[i];
  tp.record([w, out, n] {
    for (size_t i = 0; i < n; ++i) w->g[i] += out->g[i];
  });
  return out;
}

// Differentiable magnitude STFT with the same window, normalization, and
// reflect padding as dsp::stft.
inline nn::Value stft_mag(nn::Tape& tp, const nn::Value& w, int window, int hop) {
  if (window <= 0 || hop <= 0 || hop > window) throw std::invalid_argument("stft_mag: bad window/hop");
  const size_t len = w->size();
  if (len == 0) throw std::invalid_argument("empty input");
  const int pad = window / 2;
  const int frames = static_cast<int>(1 + (static_cast<long long>(len) + 2LL * pad - window) / hop);
  const int bins = window / 2 + 1;
  const std::vector<double> win = dsp::normalized_hann(window);

  auto trig = std::make_shared<std::vector<double>>(static_cast<size_t>(bins) * window * 2);
  for (int k = 0; k < bins; ++k) {
    for (int n = 0; n < window; ++n) {
      const double ang = 2.0 * std::numbers::pi * k * n / static_cast<double>(window);
      (*trig)[(static_cast<size_t>(k) * window + n) * 2] = std::cos(ang);
      (*trig)[(static_cast<size_t>(k) * window + n) * 2 + 1] = std::sin(ang);
    }
  }

  nn::Value out = nn::make_value({frames, bins});
  auto reim = std::make_shared<std::vector<double>>(static_cast<size_t>(frames) * bins * 2);
  for (int t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t) * hop - pad;
    for (int k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      for (int n = 0; n < window; ++n) {
        const double x =
            w->v[dsp::detail::reflect_index(start + n, len)] * win[static_cast<size_t>(n)];
        re += x * (*trig)[(static_cast<size_t>(k) * window + n) * 2];
        im -= x * (*trig)[(static_cast<size_t>(k) * window + n) * 2 + 1];
      }
      (*reim)[(static_cast<size_t>(t) * bins + k) * 2] = re;
      (*reim)[(static_cast<size_t>(t) * bins + k) * 2 + 1] = im;
      out->v[static_cast<size_t>(t) * bins + k] = std::sqrt(re * re + im * im);
    }
  }

  tp.record([w, out, reim, trig, win, frames, bins, window, hop, pad, len] {
    for (int t = 0; t < frames; ++t) {
      const long long start = static_cast<long long>(t) * hop - pad;
      for (int k = 0; k < bins; ++k) {
        const double mag = out->v[static_cast<size_t>(t) * bins + k];
        if (mag < 1e-12) continue;
        const double g = out->g[static_cast<size_t>(t) * bins + k];
        if (g == 0.0) continue;
        const double re = (*reim)[(static_cast<size_t>(t) * bins + k) * 2];
        const double im = (*reim)[(static_cast<size_t>(t) * bins + k) * 2 + 1];
        const double dre = g * re / mag;
        const double dim = g * im / mag;
        for (int n = 0; n < window; ++n) {
          const double c = (*trig)[(static_cast<size_t>(k) * window + n) * 2];
          const double s = (*trig)[(static_cast<size_t>(k) * window + n) * 2 + 1];
          w->g[dsp::detail::reflect_index(start + n, len)] +=
              win[static_cast<size_t>(n)] * (dre * c - dim * s);
        }
      }
    }
  });
  return out;
}

// Multi-scale log-mel L1 against a fixed target waveform, on the tape.
inline nn::Value multiscale_mel_loss(nn::Tape& tp, const nn::Value& x, const Waveform& target,
                                     const dsp::MelScaleConfig& cfg = {}) {
  if (x->size() != target.samples.size())
    throw std::invalid_argument("length mismatch");
  nn::Value acc;
  for (int i : cfg.scales) {
    const dsp::MelParams p = dsp::mel_scale_params(i);
    const int bins = p.window / 2 + 1;
    const std::vector<double> fb = dsp::mel_filterbank(p.n_mels, p.window, target.sample_rate);
    Mat fb_t(bins, p.n_mels);
    for (int j = 0; j < p.n_mels; ++j)
      for (int k = 0; k < bins; ++k) fb_t.at(k, j) = fb[static_cast<size_t>(j) * bins + k];

    nn::Value mag = stft_mag(tp, x, p.window, p.hop);
    nn::Value mel = tp.log_floor(tp.matmul(mag, nn::constant(fb_t)), dsp::kLogFloor);
    const dsp::MelSpec tgt = dsp::mel_spectrogram(target, p);
    Mat tgt_mat(tgt.n_frames, tgt.n_mels);
    tgt_mat.v = tgt.frames;
    nn::Value diff = tp.add(mel, tp.scale(nn::constant(tgt_mat), -1.0));
    nn::Value term = tp.mean_all(tp.abs(diff));
    acc = acc ? tp.add(acc, term) : term;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Toy discriminator: a short spectrally-normalized linear/GELU stack that
// scores each row of its input and exposes intermediate activations.

class ToyDiscriminator {
 public:
  ToyDiscriminator(nn::ParamTree& params, const std::string& name, int in_width, int hidden,
                   uint64_t seed)
      : hidden_(hidden) {
    std::mt19937_64 rng(seed);
    w1_ = params.add(name + ".w1", {in_width, hidden});
    b1_ = params.add(name + ".b1", {1, hidden});
    w2_ = params.add(name + ".w2", {hidden, hidden});
    b2_ = params.add(name + ".b2", {1, hidden});
    w3_ = params.add(name + ".w3", {hidden, 1});
    b3_ = params.add(name + ".b3", {1, 1});
    nn::init_normal(w1_, 0.2, rng);
    nn::init_normal(w2_, 0.2, rng);
    nn::init_normal(w3_, 0.2, rng);
    for (auto* u : {&u1_, &u2_, &u3_}) {
      u->resize(0);
    }
    seed_ = seed;
  }

  struct Output {
    nn::Value scores;                  // rows x 1, one per spatial location
    std::vector<nn::Value> features;   // intermediate activations
  };

  // update_power_iter must be false inside gradient checks so repeated
  // evaluations see identical state.
  Output forward(nn::Tape& tp, const nn::Value& input, bool update_power_iter = true) {
    nn::Value h1 = tp.gelu(tp.add(tp.matmul(input, spectral(tp, w1_, u1_, v1_, update_power_iter)), b1_));
    nn::Value h2 = tp.gelu(tp.add(tp.matmul(h1, spectral(tp, w2_, u2_, v2_, update_power_iter)), b2_));
    nn::Value s = tp.add(tp.matmul(h2, spectral(tp, w3_, u3_, v3_, update_power_iter)), b3_);
    return {s, {h1, h2}};
  }

  int num_feature_layers() const { return 2; }

 private:
  // Spectral normalization: one power-iteration step per forward, then
  // W / sigma with u, v treated as constants for the gradient.
  nn::Value spectral(nn::Tape& tp, const nn::Value& w, std::vector<double>& u,
                     std::vector<double>& v, bool update) {
    const int rows = w->shape[0], cols = w->shape[1];
    if (u.empty()) {
      std::mt19937_64 rng(seed_ ^ (static_cast<uint64_t>(rows) << 16) ^ static_cast<uint64_t>(cols));
      std::normal_distribution<double> d(0.0, 1.0);
      u.assign(static_cast<size_t>(rows), 0.0);
      v.assign(static_cast<size_t>(cols), 0.0);
      for (auto& x : u) x = d(rng);
      normalize(u);
      update_uv(w, u, v);  // one warm-up iteration so v is defined
    } else if (update) {
      update_uv(w, u, v);
    }

    double sigma = 0.0;
    for (int i = 0; i < rows; ++i) {
      double wi = 0.0;
      for (int j = 0; j < cols; ++j) wi += w->v[static_cast<size_t>(i) * cols + j] * v[static_cast<size_t>(j)];
      sigma += u[static_cast<size_t>(i)] * wi;
    }
    const double sig = std::fabs(sigma) + 1e-12;

    nn::Value out = nn::make_value(w->shape);
    for (size_t i = 0; i < w->size(); ++i) out->v[i] = w->v[i] / sig;
    std::vector<double> uc = u, vc = v;
    tp.record([w, out, sig, uc, vc, rows, cols] {
      double inner = 0.0;
      for (size_t i = 0; i < w->size(); ++i) inner += out->g[i] * w->v[i];
      inner /= sig * sig;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          const size_t idx = static_cast<size_t>(i) * cols + j;
          w->g[idx] += out->g[idx] / sig - inner * uc[static_cast<size_t>(i)] * vc[static_cast<size_t>(j)];
        }
    });
    return out;
  }

  static void normalize(std::vector<double>& x) {
    double n = 0.0;
    for (double a : x) n += a * a;
    n = std::sqrt(n) + 1e-12;
    for (double& a : x) a /= n;
  }

  static void update_uv(const nn::Value& w, std::vector<double>& u, std::vector<double>& v) {
    const int rows = w->shape[0], cols = w->shape[1];
    v.assign(static_cast<size_t>(cols), 0.0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        v[static_cast<size_t>(j)] += w->v[static_cast<size_t>(i) * cols + j] * u[static_cast<size_t>(i)];
    normalize(v);
    std::vector<double> nu(static_cast<size_t>(rows), 0.0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        nu[static_cast<size_t>(i)] += w->v[static_cast<size_t>(i) * cols + j] * v[static_cast<size_t>(j)];
    u = nu;
    normalize(u);
  }

  int hidden_;
  uint64_t seed_;
  nn::Value w1_, b1_, w2_, b2_, w3_, b3_;
  std::vector<double> u1_, v1_, u2_, v2_, u3_, v3_;
};

}  // namespace mimt::gan
