#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace aapp {

// Row-major fp32 matrix. Linear layers store weights as [out_dim, in_dim],
// so one output is a dot product of a contiguous row with the input.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0f) {}

  float& at(int i, int j) { return a[size_t(i) * size_t(cols) + size_t(j)]; }
  float at(int i, int j) const { return a[size_t(i) * size_t(cols) + size_t(j)]; }
  float* row(int i) { return a.data() + size_t(i) * size_t(cols); }
  const float* row(int i) const { return a.data() + size_t(i) * size_t(cols); }
};

// Dense [b, s, c] activation tensor, row-major over (b, s).
struct Tensor3 {
  int b = 0;
  int s = 0;
  int c = 0;
  std::vector<float> v;

  Tensor3() = default;
  Tensor3(int b_, int s_, int c_)
      : b(b_), s(s_), c(c_), v(size_t(b_) * size_t(s_) * size_t(c_), 0.0f) {}

  float* row(int bi, int si) {
    return v.data() + (size_t(bi) * size_t(s) + size_t(si)) * size_t(c);
  }
  const float* row(int bi, int si) const {
    return v.data() + (size_t(bi) * size_t(s) + size_t(si)) * size_t(c);
  }
  float at(int bi, int si, int ci) const { return row(bi, si)[ci]; }
};

// Multiply-accumulate counters, split by the components the FLOPs
// accountant reports. Attached to a forward pass when measuring.
struct MacCounter {
  uint64_t attn_proj = 0;    // q/k/v/o projections
  uint64_t attn_scores = 0;  // q·k logits and attention-weighted value sums
  uint64_t mlp = 0;          // up/down projections
  uint64_t head = 0;         // output head

  uint64_t total() const { return attn_proj + attn_scores + mlp + head; }
  uint64_t matmul_total() const { return attn_proj + mlp + head; }
};

// Debug-mode input validation (non-finite values rejected). Off by default;
// tests and calibration turn it on.
void set_debug_checks(bool on);
bool debug_checks_enabled();

// y = W x with fp64 accumulation. x.size() == W.cols, y.size() == W.rows.
void linear(const Matrix& w, std::span<const float> x, std::span<float> y,
            uint64_t* macs = nullptr);

// Y[r] = W X[r] for r_count packed rows (X: [r_count, W.cols], Y:
// [r_count, W.rows], both row-major). Same summation order as linear(), so
// the two agree bit-for-bit; this one amortizes the fp64 promotion of W
// across the whole batch.
void linear_rows(const Matrix& w, const float* x, int r_count, float* y,
                 uint64_t* macs = nullptr);

// C = A B, fp64 accumulation. General-purpose; the model uses linear().
Matrix matmul(const Matrix& a, const Matrix& b);

// out = (x - mean) / sqrt(var + eps), per call (one vector). Gains are
// applied by the caller.
void layer_norm(std::span<const float> x, std::span<float> out, float eps = 1e-6f);

// In-place softmax with max subtraction; fp64 accumulation.
void softmax_inplace(std::span<float> x);

float silu(float x);

}  // namespace aapp
