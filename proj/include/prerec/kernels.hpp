#pragma once

// Data-parallel inner loops used by the autograd engine and the scorers.
//
// Every kernel has a portable scalar reference implementation and, where the
// build target supports it, an AVX2/FMA (x86-64) or NEON (aarch64) variant.
// The variant is chosen once at startup from the host CPU features; setting
// PREREC_KERNELS=scalar in the environment forces the reference path.

#include <cstddef>
#include <string_view>

namespace prerec::kernels {

struct KernelTable {
  // sum_i x[i] * y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x[i] *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  // sum_i x[i]^2
  double (*sum_squares)(const double* x, std::size_t n);
  // out[r] = sum_c m[r*cols + c] * v[c] for r < rows
  void (*gemv)(const double* m, std::size_t rows, std::size_t cols, const double* v, double* out);
  std::string_view name;
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// The table selected for this process.
const KernelTable& active();

bool host_supports_avx2();

inline double dot(const double* x, const double* y, std::size_t n) { return active().dot(x, y, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline void scale(double alpha, double* x, std::size_t n) { active().scale(alpha, x, n); }
inline double sum_squares(const double* x, std::size_t n) { return active().sum_squares(x, n); }
inline void gemv(const double* m, std::size_t rows, std::size_t cols, const double* v, double* out) {
  active().gemv(m, rows, cols, v, out);
}

}  // namespace prerec::kernels
