#include "ocw/stats.hpp"

#include "ocw/eigen_map.hpp"

namespace ocw {

Matrix CalibStats::gram_matrix() const { return from_eigen(gram); }
Matrix CalibStats::cross_matrix() const { return from_eigen(cross); }

void accumulate_stats(CalibStats& stats, const Matrix& x_fp, const Matrix& x_pert) {
  require_same_shape(x_fp, x_pert, "accumulate_stats");
  if (x_fp.cols != stats.dim())
    throw invalid_input("accumulate_stats: stats dimension " + std::to_string(stats.dim()) +
                        " does not match inputs with " + std::to_string(x_fp.cols) + " columns");
  const Eigen::MatrixXd xp = to_eigen_d(x_pert);
  stats.gram.noalias() += xp.transpose() * xp;
  stats.cross.noalias() += xp.transpose() * (to_eigen_d(x_fp) - xp);
  stats.token_count += x_fp.rows;
}

}  // namespace ocw
