#pragma once

#include <Eigen/Dense>

#include "ocw/matrix.hpp"

namespace ocw {

// Streaming second-order calibration statistics for one linear layer.
// gram accumulates Xhat^T Xhat and cross accumulates Xhat^T (X - Xhat),
// where X are the full-precision inputs and Xhat the inputs produced by
// the partially quantized model. Accumulation runs in double.
struct CalibStats {
  Eigen::MatrixXd gram;
  Eigen::MatrixXd cross;
  size_t token_count = 0;

  CalibStats() = default;
  explicit CalibStats(size_t dim)
      : gram(Eigen::MatrixXd::Zero(Eigen::Index(dim), Eigen::Index(dim))),
        cross(Eigen::MatrixXd::Zero(Eigen::Index(dim), Eigen::Index(dim))) {}

  size_t dim() const { return size_t(gram.rows()); }

  Matrix gram_matrix() const;
  Matrix cross_matrix() const;
};

void accumulate_stats(CalibStats& stats, const Matrix& x_fp, const Matrix& x_pert);

}  // namespace ocw
