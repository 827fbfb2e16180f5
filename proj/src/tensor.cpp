#include "prerec/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "prerec/error.hpp"

namespace prerec {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw DataError("matrix: value count does not match shape");
}

Matrix Matrix::row(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

bool Matrix::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace prerec
