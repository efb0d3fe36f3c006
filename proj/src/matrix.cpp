#include "ocw/matrix.hpp"

#include <algorithm>

#include "ocw/eigen_map.hpp"

namespace ocw {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw invalid_input("matmul: inner dimension mismatch (" + std::to_string(a.cols) + " vs " +
                        std::to_string(b.rows) + ")");
  Matrix out(a.rows, b.cols);
  emap(out).noalias() = emap(a) * emap(b);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  emap(out) = emap(a).transpose();
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "operator+");
  Matrix out(a.rows, a.cols);
  emap(out) = emap(a) + emap(b);
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "operator-");
  Matrix out(a.rows, a.cols);
  emap(out) = emap(a) - emap(b);
  return out;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(squared_frobenius(a)); }

double squared_frobenius(const Matrix& a) {
  double s = 0.0;
  for (float v : a.data) s += double(v) * double(v);
  return s;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (float v : a.data) m = std::max(m, double(std::fabs(v)));
  return m;
}

void require_finite(const Matrix& a, const std::string& what) {
  for (float v : a.data)
    if (!std::isfinite(v)) throw invalid_input(what + ": non-finite entry");
}

Matrix random_gaussian(size_t rows, size_t cols, uint64_t seed, float stddev) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (auto& v : m.data) v = float(rng.gaussian()) * stddev;
  return m;
}

Matrix identity(size_t n) {
  Matrix m(n, n);
  for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
  return m;
}

Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw invalid_input("vstack: column mismatch");
  Matrix out(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + ptrdiff_t(a.size()));
  return out;
}

}  // namespace ocw
