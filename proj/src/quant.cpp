#include "ocw/quant.hpp"

#include <algorithm>
#include <cmath>

#include "ocw/eigen_map.hpp"
#include "ocw/fp16.hpp"

namespace ocw {

int scheme_qmin(int bits, Scheme scheme) {
  return scheme == Scheme::asymmetric ? 0 : -((1 << (bits - 1)) - 1);
}

int scheme_qmax(int bits, Scheme scheme) {
  return scheme == Scheme::asymmetric ? (1 << bits) - 1 : (1 << (bits - 1)) - 1;
}

void QuantConfig::validate() const {
  if (bits < 1 || bits > 8) throw invalid_input("QuantConfig: bits must be in [1,8]");
  if (scheme == Scheme::symmetric && bits < 2)
    throw invalid_input("QuantConfig: symmetric grids need bits >= 2 (1-bit signed range is empty)");
  if (granularity == Granularity::per_group && group_size < 1)
    throw invalid_input("QuantConfig: group_size must be >= 1");
}

std::pair<int, float> quantize_scalar(float w, const QuantGrid& grid) {
  const int code = std::clamp(int(std::nearbyint(w / grid.scale)) + grid.zero_point,
                              grid.qmin, grid.qmax);
  return {code, grid.scale * float(code - grid.zero_point)};
}

float dequantize_scalar(int code, const QuantGrid& grid) {
  return grid.scale * float(code - grid.zero_point);
}

namespace {

float positive_fp16(float s) {
  float r = fp16_round(s);
  return r > 0.0f ? r : kFp16MinPositive;
}

void require_calib_input(std::span<const float> values, int bits) {
  if (values.empty()) throw invalid_input("calibrate: empty input");
  if (bits < 1 || bits > 8) throw invalid_input("calibrate: bits must be in [1,8]");
  for (float v : values)
    if (!std::isfinite(v)) throw invalid_input("calibrate: non-finite value");
}

QuantGrid asymmetric_from_extremes(float wmin, float wmax, int bits) {
  QuantGrid g;
  g.qmin = scheme_qmin(bits, Scheme::asymmetric);
  g.qmax = scheme_qmax(bits, Scheme::asymmetric);
  if (wmax == wmin) {
    g.scale = 1.0f;
    g.zero_point = std::clamp(int(std::nearbyint(float(g.qmin) - wmin)), g.qmin, g.qmax);
    return g;
  }
  g.scale = positive_fp16((wmax - wmin) / float(g.qmax - g.qmin));
  g.zero_point =
      std::clamp(int(std::nearbyint(float(g.qmin) - wmin / g.scale)), g.qmin, g.qmax);
  return g;
}

QuantGrid symmetric_from_extremes(float wmin, float wmax, int bits) {
  QuantGrid g;
  g.qmin = scheme_qmin(bits, Scheme::symmetric);
  g.qmax = scheme_qmax(bits, Scheme::symmetric);
  g.zero_point = 0;
  const float amax = std::max(std::fabs(wmin), std::fabs(wmax));
  g.scale = amax == 0.0f ? 1.0f : positive_fp16(amax / float(g.qmax));
  return g;
}

std::pair<float, float> extremes(std::span<const float> values) {
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {lo, hi};
}

double grid_sq_error(std::span<const float> values, const QuantGrid& g) {
  double e = 0.0;
  for (float v : values) {
    const float w_hat = quantize_scalar(v, g).second;
    e += double(v - w_hat) * double(v - w_hat);
  }
  return e;
}

}  // namespace

QuantGrid calibrate_asymmetric(std::span<const float> values, int bits) {
  require_calib_input(values, bits);
  auto [lo, hi] = extremes(values);
  return asymmetric_from_extremes(lo, hi, bits);
}

QuantGrid calibrate_symmetric(std::span<const float> values, int bits) {
  require_calib_input(values, bits);
  if (bits < 2) throw invalid_input("calibrate_symmetric: bits must be >= 2");
  auto [lo, hi] = extremes(values);
  return symmetric_from_extremes(lo, hi, bits);
}

QuantGrid calibrate_grid(std::span<const float> values, int bits, Scheme scheme) {
  return scheme == Scheme::asymmetric ? calibrate_asymmetric(values, bits)
                                      : calibrate_symmetric(values, bits);
}

QuantGrid calibrate_grid_mse(std::span<const float> values, int bits, Scheme scheme) {
  QuantGrid base = calibrate_grid(values, bits, scheme);
  auto [lo, hi] = extremes(values);
  const bool degenerate =
      scheme == Scheme::asymmetric ? hi == lo : std::max(std::fabs(lo), std::fabs(hi)) == 0.0f;
  if (degenerate) return base;

  const float raw = scheme == Scheme::asymmetric
                        ? (hi - lo) / float(base.qmax - base.qmin)
                        : std::max(std::fabs(lo), std::fabs(hi)) / float(base.qmax);
  QuantGrid best = base;
  double best_err = grid_sq_error(values, base);
  constexpr int kCandidates = 100;
  for (int c = 0; c < kCandidates; ++c) {
    const float mult = 0.3f + 0.7f * float(c) / float(kCandidates - 1);
    QuantGrid g = base;
    g.scale = positive_fp16(mult * raw);
    if (scheme == Scheme::asymmetric)
      g.zero_point = std::clamp(int(std::nearbyint(float(g.qmin) - lo / g.scale)), g.qmin, g.qmax);
    const double err = grid_sq_error(values, g);
    if (err < best_err) {
      best_err = err;
      best = g;
    }
  }
  return best;
}

size_t quant_groups_per_row(const QuantConfig& cfg, size_t cols) {
  switch (cfg.granularity) {
    case Granularity::per_tensor: return 0;  // not row based
    case Granularity::per_channel: return 1;
    case Granularity::per_group: return (cols + cfg.group_size - 1) / cfg.group_size;
  }
  return 0;
}

size_t quant_group_count(const QuantConfig& cfg, size_t rows, size_t cols) {
  if (cfg.granularity == Granularity::per_tensor) return 1;
  return rows * quant_groups_per_row(cfg, cols);
}

size_t QuantizedMatrix::group_count() const { return quant_group_count(config, rows, cols); }

size_t QuantizedMatrix::group_index(size_t i, size_t j) const {
  switch (config.granularity) {
    case Granularity::per_tensor: return 0;
    case Granularity::per_channel: return i;
    case Granularity::per_group:
      return i * quant_groups_per_row(config, cols) + j / config.group_size;
  }
  return 0;
}

std::vector<QuantGrid> calibrate_grids(const Matrix& w, const QuantConfig& cfg, ScaleMode mode) {
  cfg.validate();
  require_finite(w, "calibrate_grids");
  if (w.rows == 0 || w.cols == 0) throw invalid_input("calibrate_grids: empty matrix");

  std::vector<QuantGrid> grids(quant_group_count(cfg, w.rows, w.cols));
  auto calibrate = [&](std::span<const float> values) {
    return mode == ScaleMode::mse_grid ? calibrate_grid_mse(values, cfg.bits, cfg.scheme)
                                       : calibrate_grid(values, cfg.bits, cfg.scheme);
  };

  if (cfg.granularity == Granularity::per_tensor) {
    grids[0] = calibrate(std::span<const float>(w.data));
  } else {
    const size_t gpr = quant_groups_per_row(cfg, w.cols);
    for (size_t i = 0; i < w.rows; ++i) {
      if (cfg.granularity == Granularity::per_channel) {
        grids[i] = calibrate(std::span<const float>(w.row_ptr(i), w.cols));
      } else {
        for (size_t g = 0; g < gpr; ++g) {
          const size_t j0 = g * cfg.group_size;
          const size_t len = std::min(cfg.group_size, w.cols - j0);
          grids[i * gpr + g] = calibrate(std::span<const float>(w.row_ptr(i) + j0, len));
        }
      }
    }
  }
  return grids;
}

QuantizedMatrix quantize_matrix(const Matrix& w, const QuantConfig& cfg, ScaleMode mode) {
  QuantizedMatrix q;
  q.rows = w.rows;
  q.cols = w.cols;
  q.config = cfg;
  q.grids = calibrate_grids(w, cfg, mode);
  q.codes.resize(w.size());
  for (size_t i = 0; i < w.rows; ++i)
    for (size_t j = 0; j < w.cols; ++j)
      q.codes[i * w.cols + j] =
          int16_t(quantize_scalar(w.at(i, j), q.grids[q.group_index(i, j)]).first);
  return q;
}

Matrix dequantize(const QuantizedMatrix& q) {
  Matrix w(q.rows, q.cols);
  for (size_t i = 0; i < q.rows; ++i)
    for (size_t j = 0; j < q.cols; ++j)
      w.at(i, j) = dequantize_scalar(q.codes[i * q.cols + j], q.grids[q.group_index(i, j)]);
  return w;
}

size_t uniform_storage_bytes(const QuantConfig& cfg, size_t rows, size_t cols) {
  const size_t code_bits = rows * cols * size_t(cfg.bits);
  const size_t meta = 2 + (cfg.scheme == Scheme::asymmetric ? 1 : 0);
  return (code_bits + 7) / 8 + quant_group_count(cfg, rows, cols) * meta;
}

size_t storage_bytes(const QuantizedMatrix& q) {
  return uniform_storage_bytes(q.config, q.rows, q.cols);
}

double activation_objective(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
  require_same_shape(w, w_hat, "activation_objective");
  if (h.rows != h.cols || h.rows != w.rows)
    throw invalid_input("activation_objective: H must be N x N with N = rows of W");
  Eigen::MatrixXd delta = to_eigen_d(w_hat) - to_eigen_d(w);
  return (delta.transpose() * to_eigen_d(h) * delta).trace();
}

}  // namespace ocw
