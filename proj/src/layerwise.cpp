#include "ocw/layerwise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ocw/eigen_map.hpp"

namespace ocw {

std::vector<size_t> gptq_order(const Matrix& h, bool actorder) {
  std::vector<size_t> order(h.rows);
  std::iota(order.begin(), order.end(), size_t(0));
  if (actorder)
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return h.at(a, a) > h.at(b, b); });
  return order;
}

QuantizedMatrix gptq_quantize(const Matrix& w, const Matrix& h, const QuantConfig& cfg,
                              const GptqOptions& opts, ScaleMode mode) {
  cfg.validate();
  if (h.rows != h.cols || h.rows != w.rows)
    throw invalid_input("gptq_quantize: H must be N x N with N = rows of W");
  if (!(opts.percdamp > 0.0) || opts.percdamp > 1.0)
    throw invalid_input("gptq_quantize: percdamp must be in (0, 1]");

  const size_t n = w.rows, m = w.cols;
  const std::vector<size_t> order = gptq_order(h, opts.actorder);

  Eigen::MatrixXd hd = to_eigen_d(h);
  const double damp = opts.percdamp * hd.diagonal().mean();
  hd.diagonal().array() += damp;

  // permuted copies
  Eigen::MatrixXd hp(n, n);
  Eigen::MatrixXd wp(n, m);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) hp(Eigen::Index(i), Eigen::Index(j)) = hd(Eigen::Index(order[i]), Eigen::Index(order[j]));
    for (size_t j = 0; j < m; ++j) wp(Eigen::Index(i), Eigen::Index(j)) = double(w.at(order[i], j));
  }

  Eigen::LLT<Eigen::MatrixXd> llt(hp);
  if (llt.info() != Eigen::Success)
    throw numeric_error("gptq_quantize: Gram matrix is not positive definite after dampening");
  Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(Eigen::Index(n), Eigen::Index(n)));
  Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success)
    throw numeric_error("gptq_quantize: inverse Gram factorization failed");
  // u is upper triangular with hinv = u^T u
  Eigen::MatrixXd u = llt_inv.matrixU();

  QuantizedMatrix q;
  q.rows = n;
  q.cols = m;
  q.config = cfg;
  q.codes.resize(n * m);
  // grids are calibrated upfront from the original matrix, exactly as in
  // quantize_matrix, so the grid set is independent of the processing order
  q.grids = calibrate_grids(w, cfg, mode);

  const size_t block = std::max<size_t>(1, opts.block_cols);
  std::vector<float> row_f(m);

  for (size_t ib = 0; ib < n; ib += block) {
    const size_t ie = std::min(n, ib + block);
    Eigen::MatrixXd err(Eigen::Index(ie - ib), Eigen::Index(m));
    for (size_t i = ib; i < ie; ++i) {
      const size_t orig = order[i];
      for (size_t j = 0; j < m; ++j) row_f[j] = float(wp(Eigen::Index(i), Eigen::Index(j)));

      const double d = u(Eigen::Index(i), Eigen::Index(i));
      for (size_t j = 0; j < m; ++j) {
        auto [code, w_hat] = quantize_scalar(row_f[j], q.grids[q.group_index(orig, j)]);
        q.codes[orig * m + j] = int16_t(code);
        err(Eigen::Index(i - ib), Eigen::Index(j)) =
            (wp(Eigen::Index(i), Eigen::Index(j)) - double(w_hat)) / d;
      }
      // propagate within the block
      for (size_t j = i + 1; j < ie; ++j)
        wp.row(Eigen::Index(j)) -=
            u(Eigen::Index(i), Eigen::Index(j)) * err.row(Eigen::Index(i - ib));
    }
    // propagate to all remaining indices
    if (ie < n)
      wp.bottomRows(Eigen::Index(n - ie)).noalias() -=
          u.block(Eigen::Index(ib), Eigen::Index(ie), Eigen::Index(ie - ib),
                  Eigen::Index(n - ie))
              .transpose() *
          err;
  }
  return q;
}

Matrix qep_target(const Matrix& w, const CalibStats& stats, const QepOptions& opts) {
  if (stats.dim() != w.rows)
    throw invalid_input("qep_target: stats dimension does not match W rows");
  if (opts.alpha < 0.0 || opts.alpha > 1.0)
    throw invalid_input("qep_target: alpha must be in [0,1]");
  if (!(opts.eta > 0.0)) throw invalid_input("qep_target: eta must be positive");
  if (opts.alpha == 0.0) return w;

  const double lambda = opts.eta * stats.gram.diagonal().mean();
  Eigen::MatrixXd reg = stats.gram;
  reg.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() != Eigen::Success)
    throw numeric_error("qep_target: regularized Gram matrix is singular");
  const Eigen::MatrixXd wd = to_eigen_d(w);
  Eigen::MatrixXd correction = llt.solve(stats.cross * wd);
  return from_eigen(Eigen::MatrixXd(wd + opts.alpha * correction));
}

BaseQuantMethod base_method_from_name(const std::string& name) {
  if (name == "rtn") return BaseQuantMethod::rtn;
  if (name == "gptq") return BaseQuantMethod::gptq;
  throw invalid_input("unknown quantization method: " + name);
}

QuantizedMatrix quantize_layer(const Matrix& w, const CalibStats& stats,
                               const LayerQuantOptions& opts) {
  const Matrix target = opts.qep ? qep_target(w, stats, *opts.qep) : w;
  if (opts.method == BaseQuantMethod::rtn)
    return quantize_matrix(target, opts.config, opts.scale_mode);
  return gptq_quantize(target, stats.gram_matrix(), opts.config, opts.gptq, opts.scale_mode);
}

}  // namespace ocw
