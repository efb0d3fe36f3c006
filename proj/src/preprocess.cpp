#include "ocw/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "ocw/eigen_map.hpp"

namespace ocw {

ChannelScale smooth_scale(const Matrix& x, const Matrix& w, float alpha) {
  if (x.cols != w.rows)
    throw invalid_input("smooth_scale: X cols (" + std::to_string(x.cols) +
                        ") must equal W rows (" + std::to_string(w.rows) + ")");
  if (alpha < 0.0f || alpha > 1.0f) throw invalid_input("smooth_scale: alpha must be in [0,1]");
  ChannelScale cs;
  cs.alpha = alpha;
  cs.s.resize(w.rows, 1.0f);
  for (size_t j = 0; j < w.rows; ++j) {
    float xmax = 0.0f, wmax = 0.0f;
    for (size_t t = 0; t < x.rows; ++t) xmax = std::max(xmax, std::fabs(x.at(t, j)));
    for (size_t m = 0; m < w.cols; ++m) wmax = std::max(wmax, std::fabs(w.at(j, m)));
    if (xmax == 0.0f || wmax == 0.0f) continue;  // 0/0 channel: keep 1
    cs.s[j] = std::pow(xmax, alpha) / std::pow(wmax, 1.0f - alpha);
    if (!std::isfinite(cs.s[j]) || cs.s[j] <= 0.0f) cs.s[j] = 1.0f;
  }
  return cs;
}

Matrix apply_channel_scale_to_activations(const Matrix& x, const ChannelScale& cs) {
  if (x.cols != cs.s.size()) throw invalid_input("channel scale: dimension mismatch");
  Matrix out = x;
  for (size_t t = 0; t < out.rows; ++t)
    for (size_t j = 0; j < out.cols; ++j) out.at(t, j) *= cs.s[j];
  return out;
}

Matrix apply_channel_scale_to_weights(const Matrix& w, const ChannelScale& cs) {
  if (w.rows != cs.s.size()) throw invalid_input("channel scale: dimension mismatch");
  Matrix out = w;
  for (size_t j = 0; j < out.rows; ++j) {
    const float inv = 1.0f / cs.s[j];
    for (size_t m = 0; m < out.cols; ++m) out.at(j, m) *= inv;
  }
  return out;
}

Rotation Rotation::make_identity(size_t n) { return {identity(n), RotationKind::identity}; }

Rotation Rotation::random_orthogonal(size_t n, uint64_t seed) {
  Matrix g = random_gaussian(n, n, seed);
  Eigen::MatrixXd gd = to_eigen_d(g);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gd);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(gd.rows(), gd.cols());
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < q.cols(); ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return {from_eigen(q), RotationKind::random_orthogonal};
}

Rotation Rotation::hadamard(size_t n) {
  if (n == 0 || (n & (n - 1)) != 0)
    throw invalid_input("hadamard rotation: N must be a power of two");
  Matrix h(n, n, 1.0f);
  for (size_t size = 1; size < n; size *= 2)
    for (size_t i = 0; i < n; i += 2 * size)
      for (size_t a = 0; a < size; ++a)
        for (size_t b = 0; b < size; ++b) {
          h.at(i + a + size, i + b) = h.at(i + a, i + b);
          h.at(i + a, i + b + size) = h.at(i + a, i + b);
          h.at(i + a + size, i + b + size) = -h.at(i + a, i + b);
        }
  const float scale = 1.0f / std::sqrt(float(n));
  for (auto& v : h.data) v *= scale;
  return {std::move(h), RotationKind::hadamard};
}

bool is_orthogonal(const Matrix& r, double tol) {
  if (r.rows != r.cols || r.rows == 0) return false;
  Eigen::MatrixXd rd = to_eigen_d(r);
  Eigen::MatrixXd err = rd * rd.transpose() - Eigen::MatrixXd::Identity(rd.rows(), rd.cols());
  return err.cwiseAbs().maxCoeff() <= tol;
}

Matrix apply_rotation(const Matrix& w, const Rotation& rot, RotationSide side) {
  if (!is_orthogonal(rot.r)) throw invalid_input("apply_rotation: R is not orthogonal");
  if (side == RotationSide::input) {
    if (rot.r.rows != w.rows) throw invalid_input("apply_rotation: dimension mismatch");
    return matmul(transpose(rot.r), w);
  }
  if (w.cols != rot.r.rows) throw invalid_input("apply_rotation: dimension mismatch");
  return matmul(w, rot.r);
}

Matrix rotate_activations(const Matrix& x, const Rotation& rot) {
  if (x.cols != rot.r.rows) throw invalid_input("rotate_activations: dimension mismatch");
  return matmul(x, rot.r);
}

double incoherence(const Matrix& w) {
  const double fro = frobenius_norm(w);
  if (fro == 0.0) throw invalid_input("incoherence: zero matrix");
  return max_abs(w) * std::sqrt(double(w.rows) * double(w.cols)) / fro;
}

namespace {

double vec_norm(const float* v, size_t n, size_t stride, BalanceNorm norm) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double x = std::fabs(double(v[i * stride]));
    acc += norm == BalanceNorm::l1 ? x : x * x;
  }
  return norm == BalanceNorm::l1 ? acc : std::sqrt(acc);
}

// relative spread (max-min)/max over positive norms
double spread(const std::vector<double>& norms) {
  double lo = -1.0, hi = 0.0;
  for (double n : norms) {
    if (n <= 0.0) continue;
    if (lo < 0.0 || n < lo) lo = n;
    hi = std::max(hi, n);
  }
  if (hi == 0.0) return 0.0;
  return (hi - lo) / hi;
}

}  // namespace

SinkhornResult sinkhorn_balance(const Matrix& w, BalanceNorm norm, int iters, double tol) {
  require_finite(w, "sinkhorn_balance");
  SinkhornResult res;
  res.balanced = w;
  res.row_scale.assign(w.rows, 1.0f);
  res.col_scale.assign(w.cols, 1.0f);

  auto measure = [&]() {
    std::vector<double> rn(w.rows), cn(w.cols);
    for (size_t i = 0; i < w.rows; ++i)
      rn[i] = vec_norm(res.balanced.row_ptr(i), w.cols, 1, norm);
    for (size_t j = 0; j < w.cols; ++j)
      cn[j] = vec_norm(res.balanced.data.data() + j, w.rows, w.cols, norm);
    return std::max(spread(rn), spread(cn));
  };

  for (int it = 0; it < iters; ++it) {
    res.spread = measure();
    if (res.spread <= tol) {
      res.converged = true;
      res.iterations = it;
      return res;
    }
    // rows
    for (size_t i = 0; i < w.rows; ++i) {
      const double n = vec_norm(res.balanced.row_ptr(i), w.cols, 1, norm);
      if (n <= 0.0) continue;
      const float f = float(1.0 / n);
      for (size_t j = 0; j < w.cols; ++j) res.balanced.at(i, j) *= f;
      res.row_scale[i] *= float(n);
    }
    // columns
    for (size_t j = 0; j < w.cols; ++j) {
      const double n = vec_norm(res.balanced.data.data() + j, w.rows, w.cols, norm);
      if (n <= 0.0) continue;
      const float f = float(1.0 / n);
      for (size_t i = 0; i < w.rows; ++i) res.balanced.at(i, j) *= f;
      res.col_scale[j] *= float(n);
    }
    res.iterations = it + 1;
  }
  res.spread = measure();
  res.converged = res.spread <= tol;
  return res;
}

}  // namespace ocw
