#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ocw/matrix.hpp"

namespace ocw {

enum class Scheme { symmetric, asymmetric };
enum class Granularity { per_tensor, per_channel, per_group };
enum class ScaleMode { minmax, mse_grid };

// Integer code range for a scheme. Asymmetric is unsigned [0, 2^b-1];
// symmetric is the signed range [-(2^(b-1)-1), 2^(b-1)-1] with zero-point 0.
int scheme_qmin(int bits, Scheme scheme);
int scheme_qmax(int bits, Scheme scheme);

struct QuantConfig {
  int bits = 4;
  Scheme scheme = Scheme::symmetric;
  Granularity granularity = Granularity::per_group;
  size_t group_size = 128;  // per_group only; a short final group is allowed

  void validate() const;  // throws invalid_input
};

struct QuantGrid {
  float scale = 1.0f;  // fp16-representable when produced by calibrate_*
  int zero_point = 0;
  int qmin = 0;
  int qmax = 0;
};

// q = clamp(round(w/s) + z, qmin, qmax); w_hat = s*(q - z).
// Rounding is ties-to-even.
std::pair<int, float> quantize_scalar(float w, const QuantGrid& grid);
float dequantize_scalar(int code, const QuantGrid& grid);

// Min-max calibration. Scales are rounded to the nearest fp16 value so the
// in-memory grid matches the serialized one bit for bit. Constant input is
// degenerate in the defining formulas and maps to scale 1 with the
// zero-point (asymmetric) placed to decode the constant as well as possible.
QuantGrid calibrate_asymmetric(std::span<const float> values, int bits);
QuantGrid calibrate_symmetric(std::span<const float> values, int bits);
QuantGrid calibrate_grid(std::span<const float> values, int bits, Scheme scheme);

// MSE grid search: 100 candidate scales over [0.3, 1.0] x the min-max scale,
// argmin of the squared reconstruction error of `values`.
QuantGrid calibrate_grid_mse(std::span<const float> values, int bits, Scheme scheme);

struct QuantizedMatrix {
  size_t rows = 0;
  size_t cols = 0;
  QuantConfig config;
  std::vector<int16_t> codes;   // row-major, one code per element
  std::vector<QuantGrid> grids; // ordered by group index

  size_t group_count() const;
  size_t group_index(size_t i, size_t j) const;
};

// Group topology: per-tensor has one group; per-channel one per row;
// per-group splits each row into ceil(cols/G) consecutive runs.
size_t quant_group_count(const QuantConfig& cfg, size_t rows, size_t cols);
size_t quant_groups_per_row(const QuantConfig& cfg, size_t cols);

// Grids for every group of w under cfg, ordered by group index.
std::vector<QuantGrid> calibrate_grids(const Matrix& w, const QuantConfig& cfg, ScaleMode mode);

// Round-to-nearest quantization with per-group grids.
QuantizedMatrix quantize_matrix(const Matrix& w, const QuantConfig& cfg,
                                ScaleMode mode = ScaleMode::minmax);

Matrix dequantize(const QuantizedMatrix& q);

// Payload size in bytes: ceil(N*M*b/8) packed codes plus per-group metadata
// (2-byte fp16 scale, plus a 1-byte zero-point when asymmetric). Matches the
// container's serialized payload exactly.
size_t storage_bytes(const QuantizedMatrix& q);
size_t uniform_storage_bytes(const QuantConfig& cfg, size_t rows, size_t cols);

// ||X(What - W)||_F^2 expressed through the Gram matrix H = X^T X:
// tr((What - W)^T H (What - W)).
double activation_objective(const Matrix& w, const Matrix& w_hat, const Matrix& h);

}  // namespace ocw
