#pragma once

// Residual vector quantization: cascaded nearest-neighbor codebooks,
// commitment loss, and EMA codebook learning with dead-entry reseeding.

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimt/io.hpp"
#include "mimt/mat.hpp"

namespace mimt::rvq {

inline constexpr double kEmaEps = 1e-5;
inline constexpr double kDeadThreshold = 0.01;

struct Codebook {
  Mat entries;                    // K x dim
  std::vector<double> ema_counts; // K
  Mat ema_sums;                   // K x dim
  double decay = 0.99;

  Codebook() = default;
  Codebook(int k, int dim, double decay_ = 0.99)
      : entries(k, dim), ema_counts(static_cast<size_t>(k), 0.0), ema_sums(k, dim), decay(decay_) {}

  int size() const { return entries.rows; }
  int dim() const { return entries.cols; }
};

struct RvqConfig {
  int dim = 16;
  std::vector<int> codebook_sizes;
  double decay = 0.99;

  // first two codebooks 1024, the rest 128
  static RvqConfig standard(int dim, int layers) {
    RvqConfig c;
    c.dim = dim;
    for (int r = 0; r < layers; ++r) c.codebook_sizes.push_back(r < 2 ? 1024 : 128);
    return c;
  }
  static RvqConfig tokenizer_default(int dim) { return standard(dim, 20); }
  static RvqConfig lm_default(int dim) { return standard(dim, 8); }
};

struct RvqState {
  int dim = 0;
  std::vector<Codebook> layers;

  RvqState() = default;
  explicit RvqState(const RvqConfig& cfg) : dim(cfg.dim) {
    for (int k : cfg.codebook_sizes) layers.emplace_back(k, cfg.dim, cfg.decay);
  }
  int num_layers() const { return static_cast<int>(layers.size()); }
};

// Discrete output of the tokenizer: M frames x R codebook indices.
struct AudioTokenMatrix {
  int frames = 0;
  int num_layers = 0;
  std::vector<int32_t> indices;  // frames x num_layers, row-major
  std::vector<int> codebook_sizes;

  AudioTokenMatrix() = default;
  AudioTokenMatrix(int m, std::vector<int> sizes)
      : frames(m),
        num_layers(static_cast<int>(sizes.size())),
        indices(static_cast<size_t>(m) * sizes.size(), 0),
        codebook_sizes(std::move(sizes)) {}

  int32_t& at(int i, int r) { return indices[static_cast<size_t>(i) * num_layers + r]; }
  int32_t at(int i, int r) const { return indices[static_cast<size_t>(i) * num_layers + r]; }
};

// ---------------------------------------------------------------------------

namespace detail {

// Nearest entry by squared Euclidean distance; ties go to the lowest index.
inline int nearest_entry(const Codebook& cb, const double* x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const int dim = cb.dim();
  for (int k = 0; k < cb.size(); ++k) {
    const double* e = cb.entries.row(k);
    double d = 0.0;
    for (int c = 0; c < dim; ++c) {
      const double t = x[c] - e[c];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

struct QuantizeResult {
  AudioTokenMatrix tokens;
  Mat quantized;               // running sum of selected entries
  Mat residual;                // input minus quantized
  std::vector<Mat> layer_inputs;  // residual fed to each layer (kept on request)
};

inline QuantizeResult quantize(const Mat& x, const RvqState& s, bool keep_layer_inputs = false) {
  if (x.cols != s.dim) throw std::invalid_argument("quantize: dimension mismatch");
  const int m = x.rows;
  const int layers = s.num_layers();

  std::vector<int> sizes;
  for (const auto& cb : s.layers) sizes.push_back(cb.size());

  QuantizeResult out;
  out.tokens = AudioTokenMatrix(m, sizes);
  out.quantized = Mat(m, s.dim);
  out.residual = x;
  if (keep_layer_inputs) out.layer_inputs.assign(static_cast<size_t>(layers), Mat());

  for (int r = 0; r < layers; ++r) {
    const Codebook& cb = s.layers[static_cast<size_t>(r)];
    if (keep_layer_inputs) out.layer_inputs[static_cast<size_t>(r)] = out.residual;
    for (int i = 0; i < m; ++i) {
      double* res = out.residual.row(i);
      const int k = detail::nearest_entry(cb, res);
      out.tokens.at(i, r) = k;
      const double* e = cb.entries.row(k);
      double* q = out.quantized.row(i);
      for (int c = 0; c < s.dim; ++c) {
        q[c] += e[c];
        res[c] -= e[c];
      }
    }
  }
  return out;
}

inline Mat dequantize(const AudioTokenMatrix& a, const RvqState& s) {
  if (a.num_layers > s.num_layers()) throw std::invalid_argument("dequantize: layer count mismatch");
  Mat out(a.frames, s.dim);
  for (int i = 0; i < a.frames; ++i) {
    double* o = out.row(i);
    for (int r = 0; r < a.num_layers; ++r) {
      const int32_t k = a.at(i, r);
      const Codebook& cb = s.layers[static_cast<size_t>(r)];
      if (k < 0 || k >= cb.size()) throw std::out_of_range("index out of range");
      const double* e = cb.entries.row(k);
      for (int c = 0; c < s.dim; ++c) o[c] += e[c];
    }
  }
  return out;
}

// Mean-per-element squared distance. Gradient flows to x only; the
// straight-through convention is handled where training composes this.
inline double commitment_loss(const Mat& x, const Mat& q) {
  if (x.rows != q.rows || x.cols != q.cols) throw std::invalid_argument("shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < x.v.size(); ++i) {
    const double d = x.v[i] - q.v[i];
    acc += d * d;
  }
  return x.v.empty() ? 0.0 : acc / static_cast<double>(x.v.size());
}

// ---------------------------------------------------------------------------
// EMA codebook learning.

inline void ema_update_layer(Codebook& cb, const Mat& inputs, const std::vector<int>& assignments,
                             std::mt19937_64& rng) {
  if (inputs.rows == 0) return;  // empty batch is a no-op
  if (static_cast<size_t>(inputs.rows) != assignments.size())
    throw std::invalid_argument("ema_update: assignments inconsistent with batch");
  const int k = cb.size();
  const int dim = cb.dim();

  std::vector<double> counts(static_cast<size_t>(k), 0.0);
  Mat sums(k, dim);
  for (int i = 0; i < inputs.rows; ++i) {
    const int a = assignments[static_cast<size_t>(i)];
    if (a < 0 || a >= k) throw std::out_of_range("ema_update: assignment out of range");
    counts[static_cast<size_t>(a)] += 1.0;
    const double* x = inputs.row(i);
    double* s = sums.row(a);
    for (int c = 0; c < dim; ++c) s[c] += x[c];
  }

  const double d = cb.decay;
  for (int j = 0; j < k; ++j) {
    cb.ema_counts[static_cast<size_t>(j)] =
        d * cb.ema_counts[static_cast<size_t>(j)] + (1.0 - d) * counts[static_cast<size_t>(j)];
    double* es = cb.ema_sums.row(j);
    const double* bs = sums.row(j);
    double* e = cb.entries.row(j);
    for (int c = 0; c < dim; ++c) {
      es[c] = d * es[c] + (1.0 - d) * bs[c];
      e[c] = es[c] / (cb.ema_counts[static_cast<size_t>(j)] + kEmaEps);
    }
  }

  // reseed dead entries from random batch vectors
  std::uniform_int_distribution<int> pick(0, inputs.rows - 1);
  for (int j = 0; j < k; ++j) {
    if (cb.ema_counts[static_cast<size_t>(j)] < kDeadThreshold) {
      const double* x = inputs.row(pick(rng));
      double* e = cb.entries.row(j);
      double* es = cb.ema_sums.row(j);
      for (int c = 0; c < dim; ++c) {
        e[c] = x[c];
        es[c] = x[c];
      }
      cb.ema_counts[static_cast<size_t>(j)] = 1.0;
    }
  }
}

// Runs the cascade on a batch and updates every layer from the residual
// it actually saw.
inline QuantizeResult ema_update(RvqState& s, const Mat& batch, std::mt19937_64& rng) {
  QuantizeResult qr = quantize(batch, s, /*keep_layer_inputs=*/true);
  if (batch.rows == 0) return qr;
  std::vector<int> assign(static_cast<size_t>(batch.rows));
  for (int r = 0; r < s.num_layers(); ++r) {
    for (int i = 0; i < batch.rows; ++i) assign[static_cast<size_t>(i)] = qr.tokens.at(i, r);
    ema_update_layer(s.layers[static_cast<size_t>(r)], qr.layer_inputs[static_cast<size_t>(r)], assign, rng);
  }
  return qr;
}

// k-means++ seeding from a data batch.
inline void kmeanspp_init(Codebook& cb, const Mat& data, std::mt19937_64& rng) {
  const int k = cb.size();
  const int dim = cb.dim();
  if (data.rows == 0) return;
  std::uniform_int_distribution<int> pick(0, data.rows - 1);

  auto set_entry = [&](int j, const double* x, double jitter) {
    double* e = cb.entries.row(j);
    std::normal_distribution<double> noise(0.0, jitter);
    for (int c = 0; c < dim; ++c) e[c] = x[c] + (jitter > 0 ? noise(rng) : 0.0);
  };

  set_entry(0, data.row(pick(rng)), 0.0);
  std::vector<double> d2(static_cast<size_t>(data.rows), std::numeric_limits<double>::infinity());
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (int i = 0; i < data.rows; ++i) {
      const double* x = data.row(i);
      const double* e = cb.entries.row(j - 1);
      double d = 0.0;
      for (int c = 0; c < dim; ++c) {
        const double t = x[c] - e[c];
        d += t * t;
      }
      d2[static_cast<size_t>(i)] = std::min(d2[static_cast<size_t>(i)], d);
      total += d2[static_cast<size_t>(i)];
    }
    if (total <= 0.0) {
      // fewer distinct points than entries: jitter a random point
      set_entry(j, data.row(pick(rng)), 1e-4);
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double target = u(rng), acc = 0.0;
    int chosen = data.rows - 1;
    for (int i = 0; i < data.rows; ++i) {
      acc += d2[static_cast<size_t>(i)];
      if (acc >= target) {
        chosen = i;
        break;
      }
    }
    set_entry(j, data.row(chosen), 0.0);
  }
}

inline void kmeanspp_init(RvqState& s, const Mat& batch, std::mt19937_64& rng) {
  Mat residual = batch;
  for (auto& cb : s.layers) {
    kmeanspp_init(cb, residual, rng);
    // advance residuals through the freshly seeded layer
    for (int i = 0; i < residual.rows; ++i) {
      double* x = residual.row(i);
      const int k = detail::nearest_entry(cb, x);
      const double* e = cb.entries.row(k);
      for (int c = 0; c < cb.dim(); ++c) x[c] -= e[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Codebook checkpoint: "RVQ1", dim u32, layer count u32, then per layer
// K u32 followed by K x dim float32 entries. Little-endian throughout.

inline void save_codebooks(const std::string& path, const RvqState& s) {
  io::ByteWriter b;
  b.str("RVQ1");
  b.u32(static_cast<uint32_t>(s.dim));
  b.u32(static_cast<uint32_t>(s.num_layers()));
  for (const auto& cb : s.layers) {
    b.u32(static_cast<uint32_t>(cb.size()));
    for (double v : cb.entries.v) b.f32(static_cast<float>(v));
  }
  b.save(path);
}

inline RvqState load_codebooks(const std::string& path) {
  io::ByteReader r = io::ByteReader::from_file(path);
  if (r.remaining() < 4 || r.str(4) != "RVQ1")
    throw std::runtime_error("bad magic: not an RVQ codebook file");
  RvqState s;
  s.dim = static_cast<int>(r.u32());
  const uint32_t layers = r.u32();
  if (s.dim <= 0 || layers == 0 || layers > 1024) throw std::runtime_error("corrupt codebook header");
  for (uint32_t l = 0; l < layers; ++l) {
    const uint32_t k = r.u32();
    if (k < 2) throw std::runtime_error("corrupt codebook: K must be >= 2");
    Codebook cb(static_cast<int>(k), s.dim);
    for (double& v : cb.entries.v) v = static_cast<double>(r.f32());
    s.layers.push_back(std::move(cb));
  }
  return s;
}

}  // namespace mimt::rvq
