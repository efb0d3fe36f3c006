#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "ocw/binfact.hpp"
#include "ocw/matrix.hpp"
#include "ocw/model.hpp"
#include "ocw/preprocess.hpp"
#include "ocw/quant.hpp"

namespace ocw {

// Equivalence-preserving per-layer transform applied before quantization
// and undone when the dense weight is reconstructed:
//   W = diag(smooth) * R * diag(balance_row) * W_q * diag(balance_col)
// Rotations are regenerated from their kind and seed.
struct PreTransform {
  std::vector<float> smooth;  // empty = off
  RotationKind rotation = RotationKind::identity;
  uint64_t rotation_seed = 0;
  std::vector<float> balance_row;  // empty = off
  std::vector<float> balance_col;

  bool any() const;
  nlohmann::json to_json() const;
  static PreTransform from_json(const nlohmann::json& j);

  // right-multiplier M with X_q = X * M
  Matrix activation_matrix(size_t n) const;
  Matrix invert_on_weight(const Matrix& wq) const;  // quantization space -> model space
};

// Binary tensor container. Layout:
//   magic "OCW1" | u64 little-endian header length | UTF-8 JSON header | payload
// The header lists tensors with name, encoding, shape, payload offset and
// encoding params; offsets are ascending and non-overlapping and the payload
// length equals the sum of the per-tensor storage sizes.
enum class TensorEncoding { f32, uniform_quant, dbf, mdbf };

const char* tensor_encoding_name(TensorEncoding e);

struct TensorRecord {
  std::string name;
  TensorEncoding encoding = TensorEncoding::f32;
  std::vector<size_t> shape;
  nlohmann::json params;  // free-form encoding params (e.g. preprocess transforms)

  Matrix f32;
  QuantizedMatrix uniform;
  DbfMatrix dbf;
  MdbfMatrix mdbf;

  static TensorRecord from_f32(const std::string& name, const Matrix& m);
  static TensorRecord from_uniform(const std::string& name, const QuantizedMatrix& q);
  static TensorRecord from_dbf(const std::string& name, const DbfMatrix& f);
  static TensorRecord from_mdbf(const std::string& name, const MdbfMatrix& f);

  Matrix dense() const;         // dequantized values
  size_t payload_bytes() const; // serialized payload size
};

struct OcwContainer {
  std::vector<TensorRecord> tensors;  // file order
  nlohmann::json meta;

  const TensorRecord* find(const std::string& name) const;
  TensorRecord* find(const std::string& name);
};

std::vector<uint8_t> serialize_ocw(const OcwContainer& c);
OcwContainer deserialize_ocw(const std::vector<uint8_t>& bytes);

void store_ocw(const std::string& path, const OcwContainer& c);
OcwContainer load_ocw(const std::string& path);

// Model <-> container. Weight tensors may be stored quantized; the loader
// dequantizes them (and applies any recorded preprocessing transforms) into
// the dense model.
OcwContainer model_to_container(const ToyModel& m);
ToyModel model_from_container(const OcwContainer& c);

nlohmann::json model_config_to_json(const ToyModelConfig& cfg);
ToyModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace ocw
