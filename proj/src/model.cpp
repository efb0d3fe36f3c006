#include "ocw/model.hpp"

#include <algorithm>
#include <cmath>

#include "ocw/eigen_map.hpp"

namespace ocw {

void ToyModelConfig::validate() const {
  if (L == 0 || d == 0 || H == 0 || H_kv == 0 || d_ff == 0 || vocab == 0 || T_max == 0)
    throw invalid_input("ToyModelConfig: all dimensions must be positive");
  if (d % H != 0) throw invalid_input("ToyModelConfig: d must be divisible by H");
  if (H % H_kv != 0) throw invalid_input("ToyModelConfig: H_kv must divide H");
  if (!(rope_base > 0.0f) || !(rms_eps > 0.0f))
    throw invalid_input("ToyModelConfig: rope_base and rms_eps must be positive");
}

const char* layer_role_name(LayerRole role) {
  switch (role) {
    case LayerRole::q: return "q";
    case LayerRole::k: return "k";
    case LayerRole::v: return "v";
    case LayerRole::o: return "o";
    case LayerRole::gate: return "gate";
    case LayerRole::up: return "up";
    case LayerRole::down: return "down";
  }
  return "?";
}

LayerRole layer_role_from_name(const std::string& name) {
  for (LayerRole r : {LayerRole::q, LayerRole::k, LayerRole::v, LayerRole::o, LayerRole::gate,
                      LayerRole::up, LayerRole::down})
    if (name == layer_role_name(r)) return r;
  throw invalid_input("unknown layer role: " + name);
}

const LayerInfo& LayerGraph::find(const std::string& id) const {
  for (const auto& l : layers)
    if (l.id == id) return l;
  throw invalid_input("unknown layer id: " + id);
}

size_t LayerGraph::weight_params() const {
  size_t p = 0;
  for (const auto& l : layers) p += l.rows * l.cols;
  return p;
}

ToyModel ToyModel::seeded(const ToyModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ToyModel m;
  m.config = cfg;
  const float s = 1.0f / std::sqrt(float(cfg.d));
  uint64_t counter = 0;
  auto gauss = [&](size_t r, size_t c) { return random_gaussian(r, c, seed * 1000003ull + counter++, s); };
  m.embedding = gauss(cfg.vocab, cfg.d);
  m.blocks.resize(cfg.L);
  for (auto& b : m.blocks) {
    b.wq = gauss(cfg.d, cfg.d);
    b.wk = gauss(cfg.d, cfg.kv_dim());
    b.wv = gauss(cfg.d, cfg.kv_dim());
    b.wo = gauss(cfg.d, cfg.d);
    b.wgate = gauss(cfg.d, cfg.d_ff);
    b.wup = gauss(cfg.d, cfg.d_ff);
    b.wdown = gauss(cfg.d_ff, cfg.d);
    b.norm_attn.assign(cfg.d, 1.0f);
    b.norm_ffn.assign(cfg.d, 1.0f);
  }
  m.final_norm.assign(cfg.d, 1.0f);
  return m;
}

namespace {

struct LayerId {
  size_t block;
  LayerRole role;
};

LayerId parse_layer_id(const std::string& id) {
  // "blocks.<i>.<role>"
  const std::string prefix = "blocks.";
  if (id.rfind(prefix, 0) != 0) throw invalid_input("unknown layer id: " + id);
  const size_t dot = id.find('.', prefix.size());
  if (dot == std::string::npos) throw invalid_input("unknown layer id: " + id);
  size_t block = 0;
  try {
    block = std::stoul(id.substr(prefix.size(), dot - prefix.size()));
  } catch (const std::exception&) {
    throw invalid_input("unknown layer id: " + id);
  }
  return {block, layer_role_from_name(id.substr(dot + 1))};
}

}  // namespace

Matrix& ToyModel::weight(const std::string& layer_id) {
  return const_cast<Matrix&>(std::as_const(*this).weight(layer_id));
}

const Matrix& ToyModel::weight(const std::string& layer_id) const {
  const LayerId lid = parse_layer_id(layer_id);
  if (lid.block >= blocks.size()) throw invalid_input("unknown layer id: " + layer_id);
  const BlockWeights& b = blocks[lid.block];
  switch (lid.role) {
    case LayerRole::q: return b.wq;
    case LayerRole::k: return b.wk;
    case LayerRole::v: return b.wv;
    case LayerRole::o: return b.wo;
    case LayerRole::gate: return b.wgate;
    case LayerRole::up: return b.wup;
    case LayerRole::down: return b.wdown;
  }
  throw invalid_input("unknown layer id: " + layer_id);
}

LayerGraph ToyModel::layer_graph() const {
  LayerGraph g;
  for (size_t i = 0; i < blocks.size(); ++i) {
    auto add = [&](LayerRole role, const Matrix& w) {
      g.layers.push_back({"blocks." + std::to_string(i) + "." + layer_role_name(role), role, i,
                          w.rows, w.cols});
    };
    add(LayerRole::q, blocks[i].wq);
    add(LayerRole::k, blocks[i].wk);
    add(LayerRole::v, blocks[i].wv);
    add(LayerRole::o, blocks[i].wo);
    add(LayerRole::gate, blocks[i].wgate);
    add(LayerRole::up, blocks[i].wup);
    add(LayerRole::down, blocks[i].wdown);
  }
  return g;
}

size_t ToyModel::param_count() const {
  size_t p = embedding.size() + final_norm.size();
  for (const auto& b : blocks)
    p += b.wq.size() + b.wk.size() + b.wv.size() + b.wo.size() + b.wgate.size() + b.wup.size() +
         b.wdown.size() + b.norm_attn.size() + b.norm_ffn.size();
  return p;
}

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps) {
  if (x.size() != gain.size()) throw invalid_input("rmsnorm: gain length mismatch");
  double ms = 0.0;
  for (float v : x) ms += double(v) * double(v);
  ms /= double(x.size());
  const float inv = 1.0f / std::sqrt(float(ms) + eps);
  std::vector<float> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

Matrix rmsnorm_rows(const Matrix& x, std::span<const float> gain, float eps) {
  Matrix out(x.rows, x.cols);
  for (size_t t = 0; t < x.rows; ++t) {
    auto row = rmsnorm(std::span<const float>(x.row_ptr(t), x.cols), gain, eps);
    std::copy(row.begin(), row.end(), out.row_ptr(t));
  }
  return out;
}

void rope_in_place(Matrix& x, size_t head_dim, float base) {
  if (head_dim == 0 || head_dim % 2 != 0 || x.cols % head_dim != 0)
    throw invalid_input("rope: columns must be a multiple of an even head_dim");
  const size_t half = head_dim / 2;
  for (size_t t = 0; t < x.rows; ++t) {
    float* row = x.row_ptr(t);
    for (size_t h = 0; h < x.cols / head_dim; ++h) {
      float* head = row + h * head_dim;
      for (size_t i = 0; i < half; ++i) {
        const double theta = double(t) * std::pow(double(base), -2.0 * double(i) / double(head_dim));
        const float c = float(std::cos(theta)), s = float(std::sin(theta));
        const float a = head[2 * i], b = head[2 * i + 1];
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

namespace {

void softmax_causal_rows(Matrix& scores) {
  // row t attends to columns 0..t
  for (size_t t = 0; t < scores.rows; ++t) {
    float* row = scores.row_ptr(t);
    float mx = row[0];
    for (size_t j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j <= t; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const float inv = float(1.0 / sum);
    for (size_t j = 0; j <= t; ++j) row[j] *= inv;
    for (size_t j = t + 1; j < scores.cols; ++j) row[j] = 0.0f;
  }
}

struct BlockTrace {
  Matrix attn_in;    // input rows to q/k/v
  Matrix concat;     // input rows to o
  Matrix ffn_in;     // input rows to gate/up
  Matrix down_in;    // input rows to down
  Matrix block_out;  // residual stream after the block
};

Matrix run_block(const ToyModel& model, const BlockWeights& b, const Matrix& x_in,
                 BlockTrace* trace) {
  const auto& cfg = model.config;
  const size_t dk = cfg.head_dim();
  const size_t T = x_in.rows;

  Matrix xa = rmsnorm_rows(x_in, b.norm_attn, cfg.rms_eps);
  Matrix q = matmul(xa, b.wq);
  Matrix k = matmul(xa, b.wk);
  Matrix v = matmul(xa, b.wv);
  rope_in_place(q, dk, cfg.rope_base);
  rope_in_place(k, dk, cfg.rope_base);

  const size_t group = cfg.H / cfg.H_kv;
  Matrix concat(T, cfg.d);
  const float inv_sqrt_dk = 1.0f / std::sqrt(float(dk));
  for (size_t h = 0; h < cfg.H; ++h) {
    const size_t kvh = h / group;
    Matrix scores(T, T);
    for (size_t t = 0; t < T; ++t)
      for (size_t u = 0; u <= t; ++u) {
        double dot = 0.0;
        for (size_t i = 0; i < dk; ++i)
          dot += double(q.at(t, h * dk + i)) * double(k.at(u, kvh * dk + i));
        scores.at(t, u) = float(dot) * inv_sqrt_dk;
      }
    softmax_causal_rows(scores);
    for (size_t t = 0; t < T; ++t)
      for (size_t i = 0; i < dk; ++i) {
        double acc = 0.0;
        for (size_t u = 0; u <= t; ++u)
          acc += double(scores.at(t, u)) * double(v.at(u, kvh * dk + i));
        concat.at(t, h * dk + i) = float(acc);
      }
  }
  Matrix x_mid = x_in + matmul(concat, b.wo);

  Matrix xf = rmsnorm_rows(x_mid, b.norm_ffn, cfg.rms_eps);
  Matrix gate = matmul(xf, b.wgate);
  Matrix up = matmul(xf, b.wup);
  Matrix gated(T, cfg.d_ff);
  for (size_t i = 0; i < gated.size(); ++i) gated.data[i] = silu(gate.data[i]) * up.data[i];
  Matrix x_out = x_mid + matmul(gated, b.wdown);

  if (trace) {
    trace->attn_in = std::move(xa);
    trace->concat = std::move(concat);
    trace->ffn_in = std::move(xf);
    trace->down_in = std::move(gated);
    trace->block_out = x_out;
  }
  return x_out;
}

Matrix embed(const ToyModel& model, std::span<const int> tokens) {
  const auto& cfg = model.config;
  if (tokens.empty()) throw invalid_input("forward: empty token sequence");
  if (tokens.size() > cfg.T_max) throw invalid_input("forward: sequence longer than T_max");
  Matrix x(tokens.size(), cfg.d);
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || size_t(tokens[t]) >= cfg.vocab)
      throw invalid_input("forward: token id out of range");
    std::copy(model.embedding.row_ptr(size_t(tokens[t])),
              model.embedding.row_ptr(size_t(tokens[t])) + cfg.d, x.row_ptr(t));
  }
  return x;
}

Matrix head_logits(const ToyModel& model, const Matrix& x) {
  Matrix xn = rmsnorm_rows(x, model.final_norm, model.config.rms_eps);
  Matrix logits(x.rows, model.config.vocab);
  emap(logits).noalias() = emap(xn) * emap(model.embedding).transpose();
  return logits;
}

}  // namespace

Matrix forward(const ToyModel& model, std::span<const int> tokens) {
  Matrix x = embed(model, tokens);
  for (const auto& b : model.blocks) x = run_block(model, b, x, nullptr);
  return head_logits(model, x);
}

ForwardTaps forward_with_taps(const ToyModel& model, std::span<const int> tokens) {
  ForwardTaps taps;
  Matrix x = embed(model, tokens);
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    BlockTrace trace;
    x = run_block(model, model.blocks[i], x, &trace);
    const std::string p = "blocks." + std::to_string(i) + ".";
    taps.inputs[p + "q"] = trace.attn_in;
    taps.inputs[p + "k"] = trace.attn_in;
    taps.inputs[p + "v"] = std::move(trace.attn_in);
    taps.inputs[p + "o"] = std::move(trace.concat);
    taps.inputs[p + "gate"] = trace.ffn_in;
    taps.inputs[p + "up"] = std::move(trace.ffn_in);
    taps.inputs[p + "down"] = std::move(trace.down_in);
    taps.hidden.push_back(std::move(trace.block_out));
  }
  taps.logits = head_logits(model, x);
  return taps;
}

}  // namespace ocw
