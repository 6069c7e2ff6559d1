#pragma once

#include <cstdint>
#include <vector>

namespace mimt {

// Sentinel for slots the delay pattern leaves undefined and for padding
// frames. Kept distinct from codebook index 0, which is a real token.
inline constexpr int32_t kEmptyToken = -1;

// Row-major dense matrix of doubles; the shared currency between the
// DSP front end, the quantizer, and the model.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
  bool empty() const { return rows == 0 || cols == 0; }
};

}  // namespace mimt
