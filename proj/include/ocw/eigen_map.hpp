#pragma once

#include <Eigen/Dense>

#include "ocw/matrix.hpp"

namespace ocw {

using EMatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMapRM = Eigen::Map<EMatRM>;
using ECMapRM = Eigen::Map<const EMatRM>;

inline EMapRM emap(Matrix& m) {
  return EMapRM(m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols));
}

inline ECMapRM emap(const Matrix& m) {
  return ECMapRM(m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols));
}

inline Eigen::MatrixXd to_eigen_d(const Matrix& m) {
  return emap(m).cast<double>();
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix m(size_t(e.rows()), size_t(e.cols()));
  emap(m) = e.cast<float>();
  return m;
}

inline Matrix from_eigen(const EMatRM& e) {
  Matrix m(size_t(e.rows()), size_t(e.cols()));
  emap(m) = e;
  return m;
}

}  // namespace ocw
