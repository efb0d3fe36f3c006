#pragma once

#include <optional>
#include <vector>

#include "ocw/quant.hpp"
#include "ocw/stats.hpp"

namespace ocw {

struct GptqOptions {
  bool actorder = false;
  double percdamp = 0.01;
  size_t block_cols = 32;  // lazy-update block size over input indices
};

// Input-index processing order: natural, or descending Hessian diagonal.
std::vector<size_t> gptq_order(const Matrix& h, bool actorder);

// Hessian-aware sequential quantization. Processes input indices (rows of W)
// one at a time: quantizes the slice against its group grid and spreads the
// residual over the not-yet-processed indices through the Cholesky factor of
// the dampened inverse Gram matrix. With H proportional to the identity the
// compensation vanishes and the result equals plain round-to-nearest.
QuantizedMatrix gptq_quantize(const Matrix& w, const Matrix& h, const QuantConfig& cfg,
                              const GptqOptions& opts = {}, ScaleMode mode = ScaleMode::minmax);

struct QepOptions {
  double alpha = 1.0;  // propagation strength in [0,1]
  double eta = 0.01;   // lambda = eta * mean(diag(gram))
};

// Corrected quantization target W* = (I + alpha*(H + lambda I)^-1 C) W.
// Solved with a Cholesky factorization of the regularized Gram matrix.
Matrix qep_target(const Matrix& w, const CalibStats& stats, const QepOptions& opts);

enum class BaseQuantMethod { rtn, gptq };

BaseQuantMethod base_method_from_name(const std::string& name);

struct LayerQuantOptions {
  BaseQuantMethod method = BaseQuantMethod::gptq;
  QuantConfig config;
  ScaleMode scale_mode = ScaleMode::minmax;
  GptqOptions gptq;
  std::optional<QepOptions> qep;  // enabled when set
};

// QEP target correction (when enabled) followed by the base quantizer.
QuantizedMatrix quantize_layer(const Matrix& w, const CalibStats& stats,
                               const LayerQuantOptions& opts);

}  // namespace ocw
