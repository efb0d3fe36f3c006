#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ocw/errors.hpp"
#include "ocw/rng.hpp"

namespace ocw {

// Dense row-major float matrix. All numeric code in the library operates
// on this type; Eigen maps are used internally for factorizations.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<float> data;  // row-major, rows*cols entries

  Matrix() = default;
  Matrix(size_t r, size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  float& at(size_t i, size_t j) { return data[i * cols + j]; }
  float at(size_t i, size_t j) const { return data[i * cols + j]; }

  size_t size() const { return rows * cols; }
  bool empty() const { return data.empty(); }

  const float* row_ptr(size_t i) const { return data.data() + i * cols; }
  float* row_ptr(size_t i) { return data.data() + i * cols; }
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double squared_frobenius(const Matrix& a);
double max_abs(const Matrix& a);

// Throws invalid_input when a contains NaN/Inf.
void require_finite(const Matrix& a, const std::string& what);

// Seeded Gaussian fill, entries ~ N(0, stddev^2).
Matrix random_gaussian(size_t rows, size_t cols, uint64_t seed, float stddev = 1.0f);

Matrix identity(size_t n);

// Stack b below a (same column count).
Matrix vstack(const Matrix& a, const Matrix& b);

inline void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw invalid_input(what + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                        std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                        std::to_string(b.cols) + ")");
}

}  // namespace ocw
