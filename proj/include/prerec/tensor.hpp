#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace prerec {

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  static Matrix row(std::span<const double> values);

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row_span(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row_span(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool all_finite() const;
};

}  // namespace prerec
