#pragma once

#include <cstdint>
#include <vector>

#include "ocw/matrix.hpp"

namespace ocw {

// Per-channel scaling: Y = (X diag(s)) (diag(s)^-1 W) leaves XW unchanged.
struct ChannelScale {
  std::vector<float> s;  // length N, all positive finite
  float alpha = 0.5f;
};

// s_j = max|X_:j|^alpha / max|W_j:|^(1-alpha); channels where either maximum
// is zero fall back to s_j = 1.
ChannelScale smooth_scale(const Matrix& x, const Matrix& w, float alpha);

Matrix apply_channel_scale_to_activations(const Matrix& x, const ChannelScale& s);  // X diag(s)
Matrix apply_channel_scale_to_weights(const Matrix& w, const ChannelScale& s);      // diag(s)^-1 W

enum class RotationKind { identity, random_orthogonal, hadamard };

struct Rotation {
  Matrix r;  // N x N orthogonal
  RotationKind kind = RotationKind::identity;

  static Rotation make_identity(size_t n);
  // QR of a seeded Gaussian with sign-fixed diagonal.
  static Rotation random_orthogonal(size_t n, uint64_t seed);
  // Sylvester Hadamard scaled by 1/sqrt(N); N must be a power of two.
  static Rotation hadamard(size_t n);
};

// Checks ||R R^T - I||_max <= tol.
bool is_orthogonal(const Matrix& r, double tol = 1e-6);

enum class RotationSide { input, output };

// input side: returns R^T W so that (X R)(R^T W) = X W; output side: W R.
Matrix apply_rotation(const Matrix& w, const Rotation& rot, RotationSide side);
Matrix rotate_activations(const Matrix& x, const Rotation& rot);  // X R

// mu = max|W_ij| * sqrt(N*M) / ||W||_F; always >= 1 for nonzero W.
double incoherence(const Matrix& w);

enum class BalanceNorm { l1, l2 };

struct SinkhornResult {
  Matrix balanced;                // W = diag(row_scale) * balanced * diag(col_scale)
  std::vector<float> row_scale;
  std::vector<float> col_scale;
  bool converged = false;
  int iterations = 0;
  double spread = 0.0;  // achieved relative spread of row/col norms
};

// Iteratively rescales rows and columns toward equal norms. Rows or columns
// that are all zero keep scale 1.
SinkhornResult sinkhorn_balance(const Matrix& w, BalanceNorm norm, int iters = 50,
                                double tol = 1e-3);

}  // namespace ocw
