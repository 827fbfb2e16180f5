#include "prerec/kernels.hpp"

namespace prerec::kernels {
namespace {

double dot_scalar(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double sum_squares_scalar(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

void gemv_scalar(const double* m, std::size_t rows, std::size_t cols, const double* v, double* out) {
  for (std::size_t r = 0; r < rows; ++r) out[r] = dot_scalar(m + r * cols, v, cols);
}

constexpr KernelTable kScalar{dot_scalar, axpy_scalar, scale_scalar, sum_squares_scalar, gemv_scalar, "scalar"};

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

}  // namespace prerec::kernels
