#include "aapp/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace aapp {

namespace {

std::atomic<bool> g_debug_checks{false};

void check_finite(std::span<const float> x, const char* who) {
  for (float f : x) {
    if (!std::isfinite(f)) {
      throw std::invalid_argument(std::string(who) + ": non-finite input");
    }
  }
}

}  // namespace

void set_debug_checks(bool on) { g_debug_checks.store(on, std::memory_order_relaxed); }
bool debug_checks_enabled() { return g_debug_checks.load(std::memory_order_relaxed); }

namespace {

// fixed four-chain summation; every matmul path funnels through this so
// dense and masked passes agree bit-for-bit
inline double dot4(const double* a, const double* b, int n) {
  const int n4 = n & ~3;
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  int k = 0;
  for (; k < n4; k += 4) {
    a0 += a[k] * b[k];
    a1 += a[k + 1] * b[k + 1];
    a2 += a[k + 2] * b[k + 2];
    a3 += a[k + 3] * b[k + 3];
  }
  double acc = (a0 + a1) + (a2 + a3);
  for (; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

}  // namespace

void linear_rows(const Matrix& w, const float* x, int r_count, float* y, uint64_t* macs) {
  const int n = w.cols;
  const int rows = w.rows;
  if (debug_checks_enabled()) {
    check_finite(std::span(x, size_t(r_count) * size_t(n)), "linear");
  }

  static thread_local std::vector<double> xd, wd;
  xd.resize(size_t(r_count) * size_t(n));
  for (size_t k = 0; k < xd.size(); ++k) xd[k] = double(x[k]);
  wd.resize(size_t(rows) * size_t(n));
  for (size_t k = 0; k < wd.size(); ++k) wd[k] = double(w.a[k]);

  // block input rows so they stay cache-hot while W streams through
  constexpr int kBlock = 8;
  for (int r0 = 0; r0 < r_count; r0 += kBlock) {
    const int r1 = std::min(r0 + kBlock, r_count);
    for (int i = 0; i < rows; ++i) {
      const double* wr = wd.data() + size_t(i) * size_t(n);
      for (int r = r0; r < r1; ++r) {
        y[size_t(r) * size_t(rows) + size_t(i)] =
            float(dot4(wr, xd.data() + size_t(r) * size_t(n), n));
      }
    }
  }
  if (macs) *macs += uint64_t(rows) * uint64_t(n) * uint64_t(r_count);
}

void linear(const Matrix& w, std::span<const float> x, std::span<float> y, uint64_t* macs) {
  if (int(x.size()) != w.cols || int(y.size()) != w.rows) {
    throw std::invalid_argument("linear: dimension mismatch");
  }
  linear_rows(w, x.data(), 1, y.data(), macs);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimension mismatch");
  if (debug_checks_enabled()) {
    check_finite(a.a, "matmul");
    check_finite(b.a, "matmul");
  }
  Matrix c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const float* ar = a.row(i);
    float* cr = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = double(ar[k]);
      const float* br = b.row(k);
      for (int j = 0; j < b.cols; ++j) {
        cr[j] = float(double(cr[j]) + aik * double(br[j]));
      }
    }
  }
  return c;
}

void layer_norm(std::span<const float> x, std::span<float> out, float eps) {
  if (x.empty() || out.size() != x.size()) {
    throw std::invalid_argument("layer_norm: bad shapes");
  }
  if (debug_checks_enabled()) check_finite(x, "layer_norm");
  double mean = 0.0;
  for (float f : x) mean += double(f);
  mean /= double(x.size());
  double var = 0.0;
  for (float f : x) {
    const double d = double(f) - mean;
    var += d * d;
  }
  var /= double(x.size());
  const double inv = 1.0 / std::sqrt(var + double(eps));
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = float((double(x[i]) - mean) * inv);
  }
}

void softmax_inplace(std::span<float> x) {
  if (x.empty()) throw std::invalid_argument("softmax: empty input");
  if (debug_checks_enabled()) check_finite(x, "softmax");
  float mx = x[0];
  for (float f : x) mx = f > mx ? f : mx;
  double sum = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double e = std::exp(double(x[i]) - double(mx));
    x[i] = float(e);
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (size_t i = 0; i < x.size(); ++i) {
    x[i] = float(double(x[i]) * inv);
  }
}

float silu(float x) {
  // x * sigmoid(x), computed in double to keep the tails clean
  const double xd = double(x);
  return float(xd / (1.0 + std::exp(-xd)));
}

}  // namespace aapp
