#pragma once

#include <vector>

#include "ocw/quant.hpp"

namespace ocw {

struct JointqOptions {
  double lambda = 0.2;   // proximity weight; objective adds n*lambda*||W - What||_F^2
  int max_passes = 8;
  int move_radius = 1;   // candidate code deltas +-1 .. +-radius
};

// ||X W - X What||_F^2 + n*lambda*||W - What||_F^2 with n = rows of X.
// Identical to the unregularized objective on the augmented input
// [X; sqrt(n*lambda) I].
double jointq_objective(const QuantizedMatrix& q, const Matrix& w, const Matrix& x,
                        double lambda);

// Exact unregularized-form 1-D optimum of the group scale given fixed codes,
// for the full (regularized) objective. Used by the local search before
// rounding the scale to fp16.
double jointq_optimal_group_scale(const QuantizedMatrix& q, const Matrix& w, const Matrix& x,
                                  double lambda, size_t group);

struct JointqResult {
  QuantizedMatrix refined;
  std::vector<double> objective_trace;  // initial objective, then after each accepted move
  size_t accepted_moves = 0;
  int passes = 0;
};

// Local search over integer codes and group scales (plus zero-points in the
// asymmetric case). Each proposal changes one code and re-fits the affected
// group's scale in the same step; moves are accepted only on strict
// improvement. The output format is identical to the input.
JointqResult jointq_refine(const QuantizedMatrix& q0, const Matrix& w, const Matrix& x,
                           const JointqOptions& opts = {});

}  // namespace ocw
