#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "ocw/matrix.hpp"

namespace ocw {

// Minimal LLaMA-style decoder: pre-RMSNorm blocks with RoPE causal
// attention (optionally grouped-query) and a SiLU-gated feed-forward.
// Weights use the X*W convention: W has input rows and output columns.
struct ToyModelConfig {
  size_t L = 2;
  size_t d = 32;
  size_t H = 4;
  size_t H_kv = 2;
  size_t d_ff = 64;
  size_t vocab = 256;
  size_t T_max = 128;
  float rope_base = 10000.0f;
  float rms_eps = 1e-5f;

  size_t head_dim() const { return d / H; }
  size_t kv_dim() const { return head_dim() * H_kv; }
  void validate() const;
};

enum class LayerRole { q, k, v, o, gate, up, down };

const char* layer_role_name(LayerRole role);
LayerRole layer_role_from_name(const std::string& name);

struct LayerInfo {
  std::string id;  // "blocks.<i>.<role>"
  LayerRole role;
  size_t block = 0;
  size_t rows = 0;
  size_t cols = 0;
};

// Quantizable linear modules in forward execution order (7 per block).
struct LayerGraph {
  std::vector<LayerInfo> layers;

  const LayerInfo& find(const std::string& id) const;
  size_t weight_params() const;
};

struct BlockWeights {
  Matrix wq, wk, wv, wo, wgate, wup, wdown;
  std::vector<float> norm_attn, norm_ffn;  // RMSNorm gains
};

struct ToyModel {
  ToyModelConfig config;
  Matrix embedding;  // vocab x d; the output head is tied to its transpose
  std::vector<BlockWeights> blocks;
  std::vector<float> final_norm;

  static ToyModel seeded(const ToyModelConfig& cfg, uint64_t seed);

  Matrix& weight(const std::string& layer_id);
  const Matrix& weight(const std::string& layer_id) const;
  LayerGraph layer_graph() const;
  size_t param_count() const;  // embedding + blocks + norm gains (head is tied)
};

struct ForwardTaps {
  Matrix logits;                         // T x vocab
  std::vector<Matrix> hidden;            // block outputs, length L
  std::map<std::string, Matrix> inputs;  // layer id -> input rows to that module
};

Matrix forward(const ToyModel& model, std::span<const int> tokens);
ForwardTaps forward_with_taps(const ToyModel& model, std::span<const int> tokens);

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps);
Matrix rmsnorm_rows(const Matrix& x, std::span<const float> gain, float eps);

// In-place rotary embedding over heads of size head_dim; row t is position t.
void rope_in_place(Matrix& x, size_t head_dim, float base);

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace ocw
