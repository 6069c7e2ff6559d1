#pragma once

// Minimal reverse-mode autodiff over dense double tensors: enough ops to
// express the patch encoder, backbone, and patch decoder, plus Adam,
// parameter checkpoints, and finite-difference gradient checking.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mimt/io.hpp"
#include "mimt/mat.hpp"

namespace mimt::nn {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;
  std::vector<double> g;
  bool requires_grad = false;

  size_t size() const { return v.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

using Value = std::shared_ptr<Tensor>;

inline size_t shape_size(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

inline Value make_value(std::vector<int> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v.assign(shape_size(t->shape), 0.0);
  t->g.assign(t->v.size(), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

inline Value constant(const Mat& m) {
  Value t = make_value({m.rows, m.cols});
  t->v = m.v;
  return t;
}

inline Value constant_row(const std::vector<double>& row) {
  Value t = make_value({1, static_cast<int>(row.size())});
  t->v = row;
  return t;
}

inline Value scalar_const(double x) {
  Value t = make_value({1, 1});
  t->v[0] = x;
  return t;
}

namespace detail {

// C(m x n) += A(m x k) * B(k x n)
inline void gemm_nn(double* c, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x k) += A(m x n) * B(k x n)^T
inline void gemm_nt(double* c, const double* a, const double* b, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * n;
    double* crow = c + static_cast<size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + static_cast<size_t>(j) * n;
      double acc = 0.0;
      for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
inline void gemm_tn(double* c, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void check_2d(const Value& a, const char* op) {
  if (a->shape.size() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-d tensor");
}

}  // namespace detail

// Records one forward computation; backward() replays closures in reverse.
class Tape {
 public:
  void record(std::function<void()> back) { ops_.push_back(std::move(back)); }

  void backward(const Value& out) {
    if (out->size() != 1) throw std::invalid_argument("backward: output must be scalar");
    out->g[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  Value matmul(const Value& a, const Value& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    if (a->shape[1] != b->shape[0]) throw std::invalid_argument("matmul: shape mismatch");
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    Value c = make_value({m, n});
    detail::gemm_nn(c->v.data(), a->v.data(), b->v.data(), m, k, n);
    record([a, b, c, m, k, n] {
      detail::gemm_nt(a->g.data(), c->g.data(), b->v.data(), m, n, k);
      detail::gemm_tn(b->g.data(), a->v.data(), c->g.data(), m, k, n);
    });
    return c;
  }

  // Same-shape elementwise add, or row-broadcast when b is 1 x n.
  Value add(const Value& a, const Value& b) {
    detail::check_2d(a, "add");
    const bool bias = (b->shape.size() == 2 && b->shape[0] == 1 && a->shape[1] == b->shape[1] &&
                       a->shape[0] != 1);
    if (!bias && a->shape != b->shape) throw std::invalid_argument("add: shape mismatch");
    Value c = make_value(a->shape);
    const int n = a->shape[1];
    for (size_t i = 0; i < a->size(); ++i)
      c->v[i] = a->v[i] + (bias ? b->v[i % static_cast<size_t>(n)] : b->v[i]);
    record([a, b, c, bias, n] {
      for (size_t i = 0; i < a->size(); ++i) {
        a->g[i] += c->g[i];
        b->g[bias ? i % static_cast<size_t>(n) : i] += c->g[i];
      }
    });
    return c;
  }

  Value scale(const Value& a, double s) {
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) c->v[i] = s * a->v[i];
    record([a, c, s] {
      for (size_t i = 0; i < a->size(); ++i) a->g[i] += s * c->g[i];
    });
    return c;
  }

  Value mul(const Value& a, const Value& b) {
    if (a->shape != b->shape) throw std::invalid_argument("mul: shape mismatch");
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) c->v[i] = a->v[i] * b->v[i];
    record([a, b, c] {
      for (size_t i = 0; i < a->size(); ++i) {
        a->g[i] += b->v[i] * c->g[i];
        b->g[i] += a->v[i] * c->g[i];
      }
    });
    return c;
  }

  Value softmax(const Value& a) {
    detail::check_2d(a, "softmax");
    const int rows = a->shape[0], cols = a->shape[1];
    Value c = make_value(a->shape);
    for (int i = 0; i < rows; ++i) {
      const double* x = a->v.data() + static_cast<size_t>(i) * cols;
      double* p = c->v.data() + static_cast<size_t>(i) * cols;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (int j = 0; j < cols; ++j) {
        p[j] = std::exp(x[j] - mx);
        z += p[j];
      }
      for (int j = 0; j < cols; ++j) p[j] /= z;
    }
    record([a, c, rows, cols] {
      for (int i = 0; i < rows; ++i) {
        const double* p = c->v.data() + static_cast<size_t>(i) * cols;
        const double* dp = c->g.data() + static_cast<size_t>(i) * cols;
        double* dx = a->g.data() + static_cast<size_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += dp[j] * p[j];
        for (int j = 0; j < cols; ++j) dx[j] += p[j] * (dp[j] - dot);
      }
    });
    return c;
  }

  Value gelu(const Value& a) {
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) {
      const double x = a->v[i];
      c->v[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    }
    record([a, c] {
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (size_t i = 0; i < a->size(); ++i) {
        const double x = a->v[i];
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        a->g[i] += (cdf + x * pdf) * c->g[i];
      }
    });
    return c;
  }

  Value relu(const Value& a) {
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) c->v[i] = a->v[i] > 0.0 ? a->v[i] : 0.0;
    record([a, c] {
      for (size_t i = 0; i < a->size(); ++i)
        if (a->v[i] > 0.0) a->g[i] += c->g[i];
    });
    return c;
  }

  Value abs(const Value& a) {
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) c->v[i] = std::fabs(a->v[i]);
    record([a, c] {
      for (size_t i = 0; i < a->size(); ++i)
        a->g[i] += (a->v[i] > 0.0 ? 1.0 : (a->v[i] < 0.0 ? -1.0 : 0.0)) * c->g[i];
    });
    return c;
  }

  Value log_floor(const Value& a, double floor) {
    Value c = make_value(a->shape);
    for (size_t i = 0; i < a->size(); ++i) c->v[i] = std::log(std::max(a->v[i], floor));
    record([a, c, floor] {
      for (size_t i = 0; i < a->size(); ++i)
        if (a->v[i] > floor) a->g[i] += c->g[i] / a->v[i];
    });
    return c;
  }

  Value rms_norm(const Value& x, const Value& gain, double eps = 1e-6) {
    detail::check_2d(x, "rms_norm");
    const int rows = x->shape[0], cols = x->shape[1];
    if (static_cast<int>(gain->size()) != cols) throw std::invalid_argument("rms_norm: gain mismatch");
    Value c = make_value(x->shape);
    auto r = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
      const double* xi = x->v.data() + static_cast<size_t>(i) * cols;
      double ms = 0.0;
      for (int j = 0; j < cols; ++j) ms += xi[j] * xi[j];
      const double rr = std::sqrt(ms / cols + eps);
      (*r)[static_cast<size_t>(i)] = rr;
      double* ci = c->v.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) ci[j] = gain->v[static_cast<size_t>(j)] * xi[j] / rr;
    }
    record([x, gain, c, r, rows, cols] {
      for (int i = 0; i < rows; ++i) {
        const double* xi = x->v.data() + static_cast<size_t>(i) * cols;
        const double* dy = c->g.data() + static_cast<size_t>(i) * cols;
        double* dx = x->g.data() + static_cast<size_t>(i) * cols;
        const double rr = (*r)[static_cast<size_t>(i)];
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += dy[j] * gain->v[static_cast<size_t>(j)] * xi[j];
        for (int j = 0; j < cols; ++j) {
          dx[j] += gain->v[static_cast<size_t>(j)] * dy[j] / rr - xi[j] * s / (cols * rr * rr * rr);
          gain->g[static_cast<size_t>(j)] += dy[j] * xi[j] / rr;
        }
      }
    });
    return c;
  }

  // Row gather; negative ids produce zero rows and receive no gradient.
  Value embedding_lookup(const Value& table, const std::vector<int>& ids) {
    detail::check_2d(table, "embedding_lookup");
    const int v = table->shape[0], d = table->shape[1];
    Value c = make_value({static_cast<int>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
      const int id = ids[t];
      if (id < 0) continue;
      if (id >= v) throw std::out_of_range("embedding_lookup: index out of range");
      const double* src = table->v.data() + static_cast<size_t>(id) * d;
      double* dst = c->v.data() + t * d;
      for (int j = 0; j < d; ++j) dst[j] = src[j];
    }
    record([table, c, ids, d] {
      for (size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0) continue;
        double* tg = table->g.data() + static_cast<size_t>(id) * d;
        const double* cg = c->g.data() + t * d;
        for (int j = 0; j < d; ++j) tg[j] += cg[j];
      }
    });
    return c;
  }

  // Rotates consecutive column pairs within each rot_width block by a
  // position-dependent angle; orthogonal, so norms are preserved.
  Value rope_rotate(const Value& x, const std::vector<int>& positions, int rot_width,
                    double base = 10000.0) {
    detail::check_2d(x, "rope_rotate");
    const int rows = x->shape[0], cols = x->shape[1];
    if (static_cast<int>(positions.size()) != rows)
      throw std::invalid_argument("rope_rotate: positions mismatch");
    if (rot_width <= 0 || rot_width % 2 != 0 || cols % rot_width != 0)
      throw std::invalid_argument("rope_rotate: bad rotation width");
    Value c = make_value(x->shape);
    auto rotate = [rows, cols, rot_width, base, &positions](const double* in, double* out, int sign) {
      for (int i = 0; i < rows; ++i) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(i)]);
        for (int b = 0; b < cols; b += rot_width) {
          for (int j = 0; j < rot_width / 2; ++j) {
            const double theta =
                sign * pos * std::pow(base, -2.0 * j / static_cast<double>(rot_width));
            const double cs = std::cos(theta), sn = std::sin(theta);
            const size_t i0 = static_cast<size_t>(i) * cols + b + 2 * j;
            const double x0 = in[i0], x1 = in[i0 + 1];
            out[i0] = x0 * cs - x1 * sn;
            out[i0 + 1] = x0 * sn + x1 * cs;
          }
        }
      }
    };
    rotate(x->v.data(), c->v.data(), +1);
    std::vector<int> pos_copy = positions;
    record([x, c, rot_width, base, rows, cols, pos_copy] {
      // inverse rotation of the incoming gradient
      for (int i = 0; i < rows; ++i) {
        const double pos = static_cast<double>(pos_copy[static_cast<size_t>(i)]);
        for (int b = 0; b < cols; b += rot_width) {
          for (int j = 0; j < rot_width / 2; ++j) {
            const double theta = -pos * std::pow(base, -2.0 * j / static_cast<double>(rot_width));
            const double cs = std::cos(theta), sn = std::sin(theta);
            const size_t i0 = static_cast<size_t>(i) * cols + b + 2 * j;
            const double g0 = c->g[i0], g1 = c->g[i0 + 1];
            x->g[i0] += g0 * cs - g1 * sn;
            x->g[i0 + 1] += g0 * sn + g1 * cs;
          }
        }
      }
    });
    return c;
  }

  // Multi-head scaled dot-product attention over already-projected q/k/v.
  Value attention(const Value& q, const Value& k, const Value& v, int n_heads, bool causal) {
    detail::check_2d(q, "attention");
    if (q->shape != k->shape || q->shape != v->shape)
      throw std::invalid_argument("attention: q/k/v shape mismatch");
    const int t = q->shape[0], d = q->shape[1];
    if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: bad head count");
    const int dh = d / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Value out = make_value(q->shape);
    // per-head attention probabilities, kept for the backward pass
    auto probs = std::make_shared<std::vector<std::vector<double>>>(
        static_cast<size_t>(n_heads), std::vector<double>(static_cast<size_t>(t) * t, 0.0));

    for (int h = 0; h < n_heads; ++h) {
      auto& p = (*probs)[static_cast<size_t>(h)];
      const int off = h * dh;
      for (int i = 0; i < t; ++i) {
        const int jmax = causal ? i : t - 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= jmax; ++j) {
          double s = 0.0;
          const double* qi = q->v.data() + static_cast<size_t>(i) * d + off;
          const double* kj = k->v.data() + static_cast<size_t>(j) * d + off;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= sc;
          p[static_cast<size_t>(i) * t + j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int j = 0; j <= jmax; ++j) {
          double& e = p[static_cast<size_t>(i) * t + j];
          e = std::exp(e - mx);
          z += e;
        }
        for (int j = 0; j <= jmax; ++j) p[static_cast<size_t>(i) * t + j] /= z;
        double* oi = out->v.data() + static_cast<size_t>(i) * d + off;
        for (int j = 0; j <= jmax; ++j) {
          const double pij = p[static_cast<size_t>(i) * t + j];
          const double* vj = v->v.data() + static_cast<size_t>(j) * d + off;
          for (int c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }

    record([q, k, v, out, probs, n_heads, dh, t, d, sc, causal] {
      std::vector<double> dp(static_cast<size_t>(t) * t);
      for (int h = 0; h < n_heads; ++h) {
        const auto& p = (*probs)[static_cast<size_t>(h)];
        const int off = h * dh;
        std::fill(dp.begin(), dp.end(), 0.0);
        for (int i = 0; i < t; ++i) {
          const int jmax = causal ? i : t - 1;
          const double* doi = out->g.data() + static_cast<size_t>(i) * d + off;
          for (int j = 0; j <= jmax; ++j) {
            const double* vj = v->v.data() + static_cast<size_t>(j) * d + off;
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += doi[c] * vj[c];
            dp[static_cast<size_t>(i) * t + j] = acc;
            // dV
            const double pij = p[static_cast<size_t>(i) * t + j];
            double* dvj = v->g.data() + static_cast<size_t>(j) * d + off;
            for (int c = 0; c < dh; ++c) dvj[c] += pij * doi[c];
          }
          // softmax backward within the row
          double dot = 0.0;
          for (int j = 0; j <= jmax; ++j)
            dot += dp[static_cast<size_t>(i) * t + j] * p[static_cast<size_t>(i) * t + j];
          for (int j = 0; j <= jmax; ++j) {
            const double ds =
                p[static_cast<size_t>(i) * t + j] * (dp[static_cast<size_t>(i) * t + j] - dot) * sc;
            const double* kj = k->v.data() + static_cast<size_t>(j) * d + off;
            const double* qi = q->v.data() + static_cast<size_t>(i) * d + off;
            double* dqi = q->g.data() + static_cast<size_t>(i) * d + off;
            double* dkj = k->g.data() + static_cast<size_t>(j) * d + off;
            for (int c = 0; c < dh; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }
    });
    return out;
  }

  // Weighted sum of per-row negative log-likelihoods; targets < 0 or zero
  // weights contribute nothing, in value or gradient.
  Value cross_entropy_weighted(const Value& logits, const std::vector<int>& targets,
                               const std::vector<double>& weights) {
    detail::check_2d(logits, "cross_entropy_weighted");
    const int t = logits->shape[0], vocab = logits->shape[1];
    if (targets.size() != static_cast<size_t>(t) || weights.size() != static_cast<size_t>(t))
      throw std::invalid_argument("cross_entropy_weighted: targets/weights mismatch");

    Value out = make_value({1, 1});
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(t) * vocab, 0.0);
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
      if (targets[static_cast<size_t>(i)] < 0 || weights[static_cast<size_t>(i)] == 0.0) continue;
      const int tgt = targets[static_cast<size_t>(i)];
      if (tgt >= vocab) throw std::out_of_range("cross_entropy_weighted: target out of range");
      const double* x = logits->v.data() + static_cast<size_t>(i) * vocab;
      double* p = probs->data() + static_cast<size_t>(i) * vocab;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < vocab; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (int j = 0; j < vocab; ++j) {
        p[j] = std::exp(x[j] - mx);
        z += p[j];
      }
      for (int j = 0; j < vocab; ++j) p[j] /= z;
      total += weights[static_cast<size_t>(i)] * (-std::log(std::max(p[tgt], 1e-300)));
    }
    out->v[0] = total;
    record([logits, out, probs, targets, weights, t, vocab] {
      const double go = out->g[0];
      for (int i = 0; i < t; ++i) {
        const double w = weights[static_cast<size_t>(i)];
        const int tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || w == 0.0) continue;
        const double* p = probs->data() + static_cast<size_t>(i) * vocab;
        double* dx = logits->g.data() + static_cast<size_t>(i) * vocab;
        for (int j = 0; j < vocab; ++j) dx[j] += go * w * (p[j] - (j == tgt ? 1.0 : 0.0));
      }
    });
    return out;
  }

  Value mean_all(const Value& a) {
    Value c = make_value({1, 1});
    double acc = 0.0;
    for (double x : a->v) acc += x;
    const double n = a->v.empty() ? 1.0 : static_cast<double>(a->size());
    c->v[0] = acc / n;
    record([a, c, n] {
      const double go = c->g[0] / n;
      for (size_t i = 0; i < a->size(); ++i) a->g[i] += go;
    });
    return c;
  }

  Value sum_all(const Value& a) {
    Value c = make_value({1, 1});
    for (double x : a->v) c->v[0] += x;
    record([a, c] {
      for (size_t i = 0; i < a->size(); ++i) a->g[i] += c->g[0];
    });
    return c;
  }

  Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int cols = parts.front()->cols();
    int rows = 0;
    for (const auto& p : parts) {
      detail::check_2d(p, "concat_rows");
      if (p->shape[1] != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += p->shape[0];
    }
    Value c = make_value({rows, cols});
    size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p->v.begin(), p->v.end(), c->v.begin() + static_cast<long>(off));
      off += p->size();
    }
    record([parts, c] {
      size_t o = 0;
      for (const auto& p : parts) {
        for (size_t i = 0; i < p->size(); ++i) p->g[i] += c->g[o + i];
        o += p->size();
      }
    });
    return c;
  }

  Value slice_rows(const Value& a, int r0, int r1) {
    detail::check_2d(a, "slice_rows");
    if (r0 < 0 || r1 > a->shape[0] || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    const int cols = a->shape[1];
    Value c = make_value({r1 - r0, cols});
    std::copy(a->v.begin() + static_cast<long>(r0) * cols, a->v.begin() + static_cast<long>(r1) * cols,
              c->v.begin());
    record([a, c, r0, cols] {
      for (size_t i = 0; i < c->size(); ++i) a->g[static_cast<size_t>(r0) * cols + i] += c->g[i];
    });
    return c;
  }

  // Row-major relabeling of the same elements.
  Value reshape(const Value& a, std::vector<int> shape) {
    if (shape_size(shape) != a->size()) throw std::invalid_argument("reshape: size mismatch");
    Value c = make_value(std::move(shape));
    c->v = a->v;
    record([a, c] {
      for (size_t i = 0; i < a->size(); ++i) a->g[i] += c->g[i];
    });
    return c;
  }

 private:
  std::vector<std::function<void()>> ops_;
};

// ---------------------------------------------------------------------------
// Named parameter collection with stable iteration order.

struct ParamTree {
  std::vector<std::pair<std::string, Value>> items;

  Value add(const std::string& name, std::vector<int> shape) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Value v = make_value(std::move(shape), /*requires_grad=*/true);
    items.emplace_back(name, v);
    return v;
  }

  Value find(const std::string& name) const {
    for (const auto& [n, v] : items)
      if (n == name) return v;
    return nullptr;
  }

  Value get(const std::string& name) const {
    Value v = find(name);
    if (!v) throw std::invalid_argument("unknown parameter: " + name);
    return v;
  }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& [name, v] : items) n += v->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, v] : items) v->zero_grad();
  }

  double grad_norm() const {
    double acc = 0.0;
    for (const auto& [name, v] : items)
      for (double g : v->g) acc += g * g;
    return std::sqrt(acc);
  }
};

inline void init_normal(const Value& v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& x : v->v) x = d(rng);
}

// ---------------------------------------------------------------------------
// Parameter checkpoint: "MIMP", then per tensor a record of
// u16 name length + bytes, u8 ndim, u32 dims, float32 data.

inline void save_params(const std::string& path, const ParamTree& params) {
  io::ByteWriter b;
  b.str("MIMP");
  for (const auto& [name, v] : params.items) {
    b.u16(static_cast<uint16_t>(name.size()));
    b.str(name);
    b.u8(static_cast<uint8_t>(v->shape.size()));
    for (int d : v->shape) b.u32(static_cast<uint32_t>(d));
    for (double x : v->v) b.f32(static_cast<float>(x));
  }
  b.save(path);
}

inline void load_params(const std::string& path, ParamTree& params) {
  io::ByteReader r = io::ByteReader::from_file(path);
  if (r.remaining() < 4 || r.str(4) != "MIMP")
    throw std::runtime_error("bad magic: not a parameter checkpoint");
  size_t loaded = 0;
  while (!r.eof()) {
    const uint16_t len = r.u16();
    const std::string name = r.str(len);
    const uint8_t ndim = r.u8();
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Value v = params.find(name);
    if (!v) throw std::runtime_error("checkpoint has unknown parameter: " + name);
    if (v->shape != shape) throw std::runtime_error("checkpoint shape mismatch for: " + name);
    for (auto& x : v->v) x = static_cast<double>(r.f32());
    ++loaded;
  }
  if (loaded != params.items.size()) throw std::runtime_error("checkpoint is missing parameters");
}

// ---------------------------------------------------------------------------
// Adam with per-group learning rates and an optional schedule factor.

struct LrSchedule {
  enum class Kind { Constant, Cosine };
  Kind kind = Kind::Constant;
  int warmup_steps = 0;
  int total_steps = 1;
  double min_factor = 0.0;

  double factor(int step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (kind == Kind::Constant) return 1.0;
    const double denom = std::max(1, total_steps - warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / denom);
    return min_factor + (1.0 - min_factor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct ParamGroup {
  std::vector<Value> params;
  double lr = 1e-3;
};

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  int step_count() const { return step_; }

  void step(std::vector<ParamGroup>& groups, double lr_factor = 1.0) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, step_);
    const double bc2 = 1.0 - std::pow(beta2_, step_);
    for (auto& group : groups) {
      const double lr = group.lr * lr_factor;
      if (lr == 0.0) continue;
      for (auto& p : group.params) {
        auto& st = state_[p.get()];
        if (st.m.size() != p->size()) {
          st.m.assign(p->size(), 0.0);
          st.v.assign(p->size(), 0.0);
        }
        for (size_t i = 0; i < p->size(); ++i) {
          const double g = p->g[i];
          st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
          st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
          const double mhat = st.m[i] / bc1;
          const double vhat = st.v[i] / bc2;
          p->v[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  int step_ = 0;
  std::unordered_map<Tensor*, State> state_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check. f(true) must run forward + backward,
// accumulating into parameter grads; f(false) evaluates the loss only.
// f must be deterministic across calls.

struct GradCheckConfig {
  double eps = 1e-5;
  int max_coords_per_tensor = 200;
  uint64_t seed = 12345;
  // differences below this are finite-difference measurement noise
  // (|f| * machine epsilon / eps), not gradient disagreement
  double atol = 1e-9;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t coords_checked = 0;
};

inline GradCheckReport gradient_check(ParamTree& params, const std::function<double(bool)>& f,
                                      GradCheckConfig cfg = {}) {
  params.zero_grad();
  f(/*accumulate_grads=*/true);
  // snapshot analytic grads before perturbation runs touch anything
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.items.size());
  for (const auto& [name, v] : params.items) analytic.push_back(v->g);

  std::mt19937_64 rng(cfg.seed);
  GradCheckReport report;
  for (size_t pi = 0; pi < params.items.size(); ++pi) {
    auto& [name, v] = params.items[pi];
    const size_t n = v->size();
    std::vector<size_t> coords;
    if (n <= static_cast<size_t>(cfg.max_coords_per_tensor)) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      std::uniform_int_distribution<size_t> pick(0, n - 1);
      std::vector<bool> seen(n, false);
      while (coords.size() < static_cast<size_t>(cfg.max_coords_per_tensor)) {
        const size_t i = pick(rng);
        if (!seen[i]) {
          seen[i] = true;
          coords.push_back(i);
        }
      }
    }
    for (size_t i : coords) {
      const double keep = v->v[i];
      v->v[i] = keep + cfg.eps;
      const double fp = f(false);
      v->v[i] = keep - cfg.eps;
      const double fm = f(false);
      v->v[i] = keep;
      const double numeric = (fp - fm) / (2.0 * cfg.eps);
      const double a = analytic[pi][i];
      const double diff = std::fabs(a - numeric);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = diff <= cfg.atol ? 0.0 : diff / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
      }
    }
  }
  return report;
}

}  // namespace mimt::nn
