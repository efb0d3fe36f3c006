#include "ocw/metrics.hpp"

#include <cmath>

#include "ocw/eigen_map.hpp"

namespace ocw {

namespace {

// log-softmax of one row at temperature tau
std::vector<double> log_softmax_row(const float* row, size_t n, double tau) {
  std::vector<double> out(n);
  double mx = -1e300;
  for (size_t i = 0; i < n; ++i) mx = std::max(mx, double(row[i]) / tau);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out[i] = double(row[i]) / tau - mx;
    sum += std::exp(out[i]);
  }
  const double lse = std::log(sum);
  for (auto& v : out) v -= lse;
  return out;
}

}  // namespace

double kl_divergence(const Matrix& teacher_logits, const Matrix& student_logits, double tau) {
  require_same_shape(teacher_logits, student_logits, "kl_divergence");
  if (!(tau > 0.0)) throw invalid_input("kl_divergence: tau must be positive");
  double total = 0.0;
  for (size_t t = 0; t < teacher_logits.rows; ++t) {
    auto lp = log_softmax_row(teacher_logits.row_ptr(t), teacher_logits.cols, tau);
    auto lq = log_softmax_row(student_logits.row_ptr(t), student_logits.cols, tau);
    double kl = 0.0;
    for (size_t v = 0; v < lp.size(); ++v) kl += std::exp(lp[v]) * (lp[v] - lq[v]);
    total += kl;
  }
  return total / double(teacher_logits.rows);
}

std::vector<double> hidden_alignment(const std::vector<Matrix>& teacher_taps,
                                     const std::vector<Matrix>& student_taps) {
  if (teacher_taps.size() != student_taps.size())
    throw invalid_input("hidden_alignment: tap count mismatch");
  std::vector<double> dist;
  dist.reserve(teacher_taps.size());
  for (size_t l = 0; l < teacher_taps.size(); ++l) {
    require_same_shape(teacher_taps[l], student_taps[l], "hidden_alignment");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < teacher_taps[l].size(); ++i) {
      const double a = teacher_taps[l].data[i], b = student_taps[l].data[i];
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    if (na == 0.0 || nb == 0.0) throw invalid_input("hidden_alignment: zero-norm hidden state");
    dist.push_back(1.0 - dot / (std::sqrt(na) * std::sqrt(nb)));
  }
  return dist;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double entropy(const Matrix& student_logits) {
  double total = 0.0;
  for (size_t t = 0; t < student_logits.rows; ++t) {
    auto lq = log_softmax_row(student_logits.row_ptr(t), student_logits.cols, 1.0);
    double h = 0.0;
    for (double l : lq) h -= std::exp(l) * l;
    total += h;
  }
  return total / double(student_logits.rows);
}

double nll_from_logits(const Matrix& logits, std::span<const int> tokens) {
  if (tokens.size() != logits.rows) throw invalid_input("nll_from_logits: length mismatch");
  if (tokens.size() < 2) throw invalid_input("nll_from_logits: need at least two tokens");
  double total = 0.0;
  for (size_t t = 0; t + 1 < tokens.size(); ++t) {
    auto lq = log_softmax_row(logits.row_ptr(t), logits.cols, 1.0);
    const int next = tokens[t + 1];
    if (next < 0 || size_t(next) >= logits.cols)
      throw invalid_input("nll_from_logits: token id out of range");
    total -= lq[size_t(next)];
  }
  return total / double(tokens.size() - 1);
}

std::pair<double, double> smooth_ste(double x, double k) {
  if (!(k > 0.0)) throw invalid_input("smooth_ste: k must be positive");
  const double frac = x - std::floor(x);
  const double s = 1.0 / (1.0 + std::exp(-k * (frac - 0.5)));
  return {std::floor(x) + s, k * s * (1.0 - s)};
}

double psta_schedule(int e, int E, double k_min, double k_max) {
  if (E < 2) throw invalid_input("psta_schedule: E must be at least 2");
  if (e < 0 || e >= E) throw invalid_input("psta_schedule: epoch out of range");
  return k_min + (k_max - k_min) * double(e) / double(E - 1);
}

LowRankCorrection lowrank_residual_fit(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                                       size_t r) {
  require_same_shape(w, w_hat, "lowrank_residual_fit");
  if (x.cols != w.rows) throw invalid_input("lowrank_residual_fit: X cols must equal W rows");
  if (r > std::min(w.rows, w.cols))
    throw invalid_input("lowrank_residual_fit: rank exceeds min(N, M)");

  LowRankCorrection out;
  const Eigen::MatrixXd delta = to_eigen_d(w) - to_eigen_d(w_hat);
  const Eigen::MatrixXd xd = to_eigen_d(x);
  Eigen::MatrixXd gram = xd.transpose() * xd;
  const double ridge = 1e-8 * std::max(gram.trace() / double(gram.rows()), 1e-30);
  gram.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw numeric_error("lowrank_residual_fit: whitening factorization failed");
  const Eigen::MatrixXd lt = Eigen::MatrixXd(llt.matrixU());  // gram = lt^T lt

  if (r == 0) {
    out.b = Matrix(w.rows, 0);
    out.a = Matrix(0, w.cols);
    out.objective = (lt * delta).squaredNorm();
    return out;
  }

  const Eigen::MatrixXd g = lt * delta;  // whitened residual
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::Index rr = std::min<Eigen::Index>(Eigen::Index(r), svd.singularValues().size());
  Eigen::MatrixXd us = svd.matrixU().leftCols(rr) *
                       svd.singularValues().head(rr).asDiagonal();
  // B = L^-T U_r S_r, A = V_r^T so that X (B A) best matches X delta
  Eigen::MatrixXd bmat = lt.triangularView<Eigen::Upper>().solve(us);
  out.b = from_eigen(bmat);
  out.a = from_eigen(Eigen::MatrixXd(svd.matrixV().leftCols(rr).transpose()));
  out.objective = (g - us * svd.matrixV().leftCols(rr).transpose()).squaredNorm();
  return out;
}

double lowrank_objective(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                         const LowRankCorrection& c) {
  Eigen::MatrixXd eff = to_eigen_d(w_hat);
  if (c.b.cols > 0) eff += to_eigen_d(c.b) * to_eigen_d(c.a);
  return (to_eigen_d(x) * (eff - to_eigen_d(w))).squaredNorm();
}

}  // namespace ocw
