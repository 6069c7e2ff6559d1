#pragma once

// Toy tokenizer front end: 100 Hz log-mel features averaged in groups of
// four down to 25 Hz, a learned linear map into the quantizer space, and
// a linear decode path back to the feature domain. The projection trains
// jointly with the RVQ codebooks (straight-through through quantization,
// EMA for the codebooks).

#include <random>
#include <stdexcept>
#include <string>

#include "mimt/dsp.hpp"
#include "mimt/nn.hpp"
#include "mimt/rvq.hpp"

namespace mimt::tokenizer {

struct FrontendConfig {
  int mel_dim = 128;       // bins of the 100 Hz front-end mel
  int downsample = 4;      // 100 Hz -> 25 Hz
  int dim = 16;            // quantizer embedding dimensionality
  double commit_weight = 1.0;
  double lr = 1e-3;
};

class Frontend {
 public:
  FrontendConfig cfg;
  nn::ParamTree params;

  explicit Frontend(const FrontendConfig& config = {}, uint64_t seed = 3)
      : cfg(config) {
    enc_w_ = params.add("proj.enc_w", {cfg.mel_dim, cfg.dim});
    enc_b_ = params.add("proj.enc_b", {1, cfg.dim});
    dec_w_ = params.add("proj.dec_w", {cfg.dim, cfg.mel_dim});
    dec_b_ = params.add("proj.dec_b", {1, cfg.mel_dim});
    std::mt19937_64 rng(seed);
    nn::init_normal(enc_w_, 0.1, rng);
    nn::init_normal(dec_w_, 0.1, rng);
  }

  // 25 Hz features: 100 Hz log-mel averaged over non-overlapping groups
  // of `downsample` frames (a trailing partial group is dropped).
  Mat features(const Waveform& w) const {
    const dsp::MelSpec mel = dsp::mel_spectrogram(w, dsp::kEncoderMel);
    const int m = mel.n_frames / cfg.downsample;
    Mat out(m, cfg.mel_dim);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < cfg.mel_dim; ++j) {
        double acc = 0.0;
        for (int k = 0; k < cfg.downsample; ++k) acc += mel.at(i * cfg.downsample + k, j);
        out.at(i, j) = acc / cfg.downsample;
      }
    }
    return out;
  }

  Mat project(const Mat& feats) const {
    if (feats.cols != cfg.mel_dim) throw std::invalid_argument("frontend: feature width mismatch");
    Mat out(feats.rows, cfg.dim);
    linear(feats, enc_w_, enc_b_, out);
    return out;
  }

  Mat reconstruct(const Mat& q) const {
    if (q.cols != cfg.dim) throw std::invalid_argument("frontend: latent width mismatch");
    Mat out(q.rows, cfg.mel_dim);
    linear(q, dec_w_, dec_b_, out);
    return out;
  }

  struct StepMetrics {
    double recon_mse = 0.0;
    double commit = 0.0;
    double total = 0.0;
  };

  // One joint step: projection/decode weights by Adam on reconstruction
  // plus commitment, codebooks by EMA on the same batch.
  StepMetrics train_step(const Mat& feats, rvq::RvqState& state, nn::Adam& adam,
                         std::mt19937_64& rng) {
    params.zero_grad();
    nn::Tape tp;
    nn::Value f = nn::constant(feats);
    nn::Value x = tp.add(tp.matmul(f, enc_w_), enc_b_);

    Mat x_mat(feats.rows, cfg.dim);
    x_mat.v = x->v;
    const rvq::QuantizeResult qr = rvq::ema_update(state, x_mat, rng);

    // straight-through: forward uses q, gradient passes to x unchanged
    Mat gap(feats.rows, cfg.dim);
    for (size_t i = 0; i < gap.v.size(); ++i) gap.v[i] = qr.quantized.v[i] - x->v[i];
    nn::Value q_ste = tp.add(x, nn::constant(gap));

    nn::Value recon = tp.add(tp.matmul(q_ste, dec_w_), dec_b_);
    nn::Value rdiff = tp.add(recon, tp.scale(f, -1.0));
    nn::Value recon_mse = tp.mean_all(tp.mul(rdiff, rdiff));

    nn::Value cdiff = tp.add(x, tp.scale(nn::constant(qr.quantized), -1.0));
    nn::Value commit = tp.mean_all(tp.mul(cdiff, cdiff));

    nn::Value total = tp.add(recon_mse, tp.scale(commit, cfg.commit_weight));
    tp.backward(total);

    std::vector<nn::ParamGroup> groups{{{enc_w_, enc_b_, dec_w_, dec_b_}, cfg.lr}};
    adam.step(groups);

    StepMetrics m;
    m.recon_mse = recon_mse->v[0];
    m.commit = commit->v[0];
    m.total = total->v[0];
    return m;
  }

  void save(const std::string& path) const { nn::save_params(path, params); }
  void load(const std::string& path) { nn::load_params(path, params); }

 private:
  void linear(const Mat& in, const nn::Value& w, const nn::Value& b, Mat& out) const {
    const int rows = in.rows, k = in.cols, n = out.cols;
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < n; ++j) out.at(i, j) = b->v[static_cast<size_t>(j)];
      for (int p = 0; p < k; ++p) {
        const double a = in.at(i, p);
        if (a == 0.0) continue;
        for (int j = 0; j < n; ++j) out.at(i, j) += a * w->v[static_cast<size_t>(p) * n + j];
      }
    }
  }

  nn::Value enc_w_, enc_b_, dec_w_, dec_b_;
};

}  // namespace mimt::tokenizer
