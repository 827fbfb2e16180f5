#include "prerec/kernels.hpp"

#if defined(__aarch64__) && defined(__ARM_NEON)
#include <arm_neon.h>

namespace prerec::kernels {
namespace {

double dot_neon(const double* x, const double* y, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(x + i), vld1q_f64(y + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(x + i + 2), vld1q_f64(y + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t a = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), a, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(double alpha, double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_n_f64(vld1q_f64(x + i), alpha));
  for (; i < n; ++i) x[i] *= alpha;
}

double sum_squares_neon(const double* x, std::size_t n) { return dot_neon(x, x, n); }

void gemv_neon(const double* m, std::size_t rows, std::size_t cols, const double* v, double* out) {
  for (std::size_t r = 0; r < rows; ++r) out[r] = dot_neon(m + r * cols, v, cols);
}

constexpr KernelTable kNeon{dot_neon, axpy_neon, scale_neon, sum_squares_neon, gemv_neon, "neon"};

}  // namespace

const KernelTable* neon_table() { return &kNeon; }

}  // namespace prerec::kernels

#else

namespace prerec::kernels {
const KernelTable* neon_table() { return nullptr; }
}  // namespace prerec::kernels

#endif
