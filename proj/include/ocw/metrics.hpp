#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ocw/matrix.hpp"

namespace ocw {

// Mean token-level KL(teacher || student) with temperature-softmaxed rows.
double kl_divergence(const Matrix& teacher_logits, const Matrix& student_logits,
                     double tau = 1.0);

// Per-layer 1 - cos(h_fp, h_q) on flattened hidden states.
std::vector<double> hidden_alignment(const std::vector<Matrix>& teacher_taps,
                                     const std::vector<Matrix>& student_taps);

double mean(const std::vector<double>& v);

// Mean student entropy -sum q log q (the training loss in the source
// formulation is the negative of this; the reported metric is entropy).
double entropy(const Matrix& student_logits);

// Teacher-forced next-token negative log-likelihood.
double nll_from_logits(const Matrix& logits, std::span<const int> tokens);

// floor(x) + sigmoid(k*(frac(x) - 0.5)) and its derivative in x.
std::pair<double, double> smooth_ste(double x, double k);

// Linear temperature schedule from k_min to k_max over E epochs.
double psta_schedule(int e, int E, double k_min = 2.0, double k_max = 20.0);

struct LowRankCorrection {
  Matrix b;  // N x r
  Matrix a;  // r x M
  double objective = 0.0;  // ||X(What + B A - W)||_F^2 at the solution
};

// Rank-r minimizer of ||X(What + B A - W)||_F^2 via truncated SVD of the
// activation-whitened residual; rank-deficient X is handled with a ridge
// on the Gram matrix before whitening.
LowRankCorrection lowrank_residual_fit(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                                       size_t r);

double lowrank_objective(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                         const LowRankCorrection& c);

}  // namespace ocw
