#include "ocw/container.hpp"

#include <cstring>
#include <fstream>

#include "ocw/eigen_map.hpp"
#include "ocw/fp16.hpp"

namespace ocw {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'W', '1'};

struct BitWriter {
  std::vector<uint8_t>& out;
  uint32_t acc = 0;
  int nbits = 0;

  explicit BitWriter(std::vector<uint8_t>& o) : out(o) {}
  void put(uint32_t value, int bits) {
    acc |= value << nbits;
    nbits += bits;
    while (nbits >= 8) {
      out.push_back(uint8_t(acc & 0xff));
      acc >>= 8;
      nbits -= 8;
    }
  }
  void flush() {
    if (nbits > 0) out.push_back(uint8_t(acc & 0xff));
    acc = 0;
    nbits = 0;
  }
};

struct BitReader {
  const uint8_t* p;
  size_t len;
  size_t pos = 0;
  uint32_t acc = 0;
  int nbits = 0;

  BitReader(const uint8_t* data, size_t n) : p(data), len(n) {}
  uint32_t get(int bits) {
    while (nbits < bits) {
      if (pos >= len) throw io_error("container: truncated bit stream");
      acc |= uint32_t(p[pos++]) << nbits;
      nbits += 8;
    }
    const uint32_t v = acc & ((1u << bits) - 1u);
    acc >>= bits;
    nbits -= bits;
    return v;
  }
  void align() {
    acc = 0;
    nbits = 0;
  }
};

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

void put_fp16(std::vector<uint8_t>& out, float v) {
  const uint16_t h = fp16_encode(v);
  out.push_back(uint8_t(h & 0xff));
  out.push_back(uint8_t(h >> 8));
}

float get_fp16(const uint8_t* p) { return fp16_decode(uint16_t(p[0] | (uint16_t(p[1]) << 8))); }

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((bits >> (8 * i)) & 0xff));
}

float get_f32(const uint8_t* p) {
  uint32_t bits = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
                  uint32_t(p[3]) << 24;
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void pack_signs(std::vector<uint8_t>& out, const std::vector<int8_t>& s) {
  BitWriter bw(out);
  for (int8_t v : s) bw.put(v > 0 ? 1u : 0u, 1);
  bw.flush();
}

std::vector<int8_t> unpack_signs(BitReader& br, size_t count) {
  std::vector<int8_t> s(count);
  for (size_t i = 0; i < count; ++i) s[i] = br.get(1) ? int8_t(1) : int8_t(-1);
  br.align();
  return s;
}

std::string scheme_name(Scheme s) { return s == Scheme::symmetric ? "symmetric" : "asymmetric"; }
Scheme scheme_from(const std::string& s) {
  if (s == "symmetric") return Scheme::symmetric;
  if (s == "asymmetric") return Scheme::asymmetric;
  throw io_error("container: unknown scheme " + s);
}

std::string gran_name(Granularity g) {
  switch (g) {
    case Granularity::per_tensor: return "per-tensor";
    case Granularity::per_channel: return "per-channel";
    case Granularity::per_group: return "per-group";
  }
  return "?";
}
Granularity gran_from(const std::string& s) {
  if (s == "per-tensor") return Granularity::per_tensor;
  if (s == "per-channel") return Granularity::per_channel;
  if (s == "per-group") return Granularity::per_group;
  throw io_error("container: unknown granularity " + s);
}

std::vector<uint8_t> tensor_payload(const TensorRecord& t) {
  std::vector<uint8_t> out;
  switch (t.encoding) {
    case TensorEncoding::f32:
      for (float v : t.f32.data) put_f32(out, v);
      break;
    case TensorEncoding::uniform_quant: {
      const QuantizedMatrix& q = t.uniform;
      const int qmin = scheme_qmin(q.config.bits, q.config.scheme);
      BitWriter bw(out);
      for (int16_t c : q.codes) bw.put(uint32_t(int(c) - qmin), q.config.bits);
      bw.flush();
      for (const auto& g : q.grids) put_fp16(out, g.scale);
      if (q.config.scheme == Scheme::asymmetric)
        for (const auto& g : q.grids) out.push_back(uint8_t(g.zero_point));
      break;
    }
    case TensorEncoding::dbf: {
      pack_signs(out, t.dbf.s_a);
      pack_signs(out, t.dbf.s_b);
      for (float v : t.dbf.a) put_fp16(out, v);
      for (float v : t.dbf.m) put_fp16(out, v);
      for (float v : t.dbf.b) put_fp16(out, v);
      break;
    }
    case TensorEncoding::mdbf: {
      pack_signs(out, t.mdbf.s_a);
      pack_signs(out, t.mdbf.s_b);
      for (const Matrix* m : {&t.mdbf.a_env, &t.mdbf.q_env, &t.mdbf.b_env, &t.mdbf.g_env})
        for (float v : m->data) put_fp16(out, v);
      break;
    }
  }
  return out;
}

void parse_payload(TensorRecord& t, const uint8_t* p, size_t len) {
  const size_t rows = t.shape.at(0), cols = t.shape.at(1);
  switch (t.encoding) {
    case TensorEncoding::f32: {
      if (len != rows * cols * 4) throw io_error("container: f32 payload size mismatch");
      t.f32 = Matrix(rows, cols);
      for (size_t i = 0; i < rows * cols; ++i) t.f32.data[i] = get_f32(p + 4 * i);
      break;
    }
    case TensorEncoding::uniform_quant: {
      QuantizedMatrix& q = t.uniform;
      q.rows = rows;
      q.cols = cols;
      q.config.bits = t.params.at("bits").get<int>();
      q.config.scheme = scheme_from(t.params.at("scheme").get<std::string>());
      q.config.granularity = gran_from(t.params.at("granularity").get<std::string>());
      q.config.group_size = t.params.value("group_size", size_t(0));
      const int qmin = scheme_qmin(q.config.bits, q.config.scheme);
      const int qmax = scheme_qmax(q.config.bits, q.config.scheme);
      const size_t n_codes = rows * cols;
      const size_t code_bytes = (n_codes * size_t(q.config.bits) + 7) / 8;
      const size_t n_groups = q.group_count();
      BitReader br(p, code_bytes);
      q.codes.resize(n_codes);
      for (size_t i = 0; i < n_codes; ++i)
        q.codes[i] = int16_t(int(br.get(q.config.bits)) + qmin);
      const uint8_t* meta = p + code_bytes;
      q.grids.resize(n_groups);
      for (size_t g = 0; g < n_groups; ++g) {
        q.grids[g].scale = get_fp16(meta + 2 * g);
        q.grids[g].qmin = qmin;
        q.grids[g].qmax = qmax;
        q.grids[g].zero_point = 0;
      }
      if (q.config.scheme == Scheme::asymmetric) {
        const uint8_t* zp = meta + 2 * n_groups;
        for (size_t g = 0; g < n_groups; ++g) q.grids[g].zero_point = int(zp[g]);
      }
      if (len != storage_bytes(q)) throw io_error("container: uniform payload size mismatch");
      break;
    }
    case TensorEncoding::dbf: {
      DbfMatrix& f = t.dbf;
      f.rows = rows;
      f.cols = cols;
      f.rank = t.params.at("rank").get<size_t>();
      BitReader br(p, len);
      f.s_a = unpack_signs(br, rows * f.rank);
      f.s_b = unpack_signs(br, cols * f.rank);
      const uint8_t* meta = p + (rows * f.rank + 7) / 8 + (cols * f.rank + 7) / 8;
      f.a.resize(rows);
      f.m.resize(f.rank);
      f.b.resize(cols);
      size_t off = 0;
      for (auto* vec : {&f.a, &f.m, &f.b})
        for (auto& v : *vec) {
          v = get_fp16(meta + off);
          off += 2;
        }
      if (len != dbf_storage_bytes(f)) throw io_error("container: dbf payload size mismatch");
      break;
    }
    case TensorEncoding::mdbf: {
      MdbfMatrix& f = t.mdbf;
      f.rows = rows;
      f.cols = cols;
      f.rank = t.params.at("rank").get<size_t>();
      f.env_rank = t.params.at("env_rank").get<size_t>();
      BitReader br(p, len);
      f.s_a = unpack_signs(br, rows * f.rank);
      f.s_b = unpack_signs(br, cols * f.rank);
      const uint8_t* meta = p + (rows * f.rank + 7) / 8 + (cols * f.rank + 7) / 8;
      f.a_env = Matrix(rows, f.env_rank);
      f.q_env = Matrix(f.rank, f.env_rank);
      f.b_env = Matrix(cols, f.env_rank);
      f.g_env = Matrix(f.rank, f.env_rank);
      size_t off = 0;
      for (Matrix* m : {&f.a_env, &f.q_env, &f.b_env, &f.g_env})
        for (auto& v : m->data) {
          v = get_fp16(meta + off);
          off += 2;
        }
      if (len != mdbf_storage_bytes(f)) throw io_error("container: mdbf payload size mismatch");
      break;
    }
  }
}

}  // namespace

const char* tensor_encoding_name(TensorEncoding e) {
  switch (e) {
    case TensorEncoding::f32: return "f32";
    case TensorEncoding::uniform_quant: return "uniform-quant";
    case TensorEncoding::dbf: return "dbf";
    case TensorEncoding::mdbf: return "mdbf";
  }
  return "?";
}

namespace {
TensorEncoding encoding_from(const std::string& s) {
  if (s == "f32") return TensorEncoding::f32;
  if (s == "uniform-quant") return TensorEncoding::uniform_quant;
  if (s == "dbf") return TensorEncoding::dbf;
  if (s == "mdbf") return TensorEncoding::mdbf;
  throw io_error("container: unknown encoding " + s);
}
}  // namespace

TensorRecord TensorRecord::from_f32(const std::string& name, const Matrix& m) {
  TensorRecord t;
  t.name = name;
  t.encoding = TensorEncoding::f32;
  t.shape = {m.rows, m.cols};
  t.f32 = m;
  return t;
}

TensorRecord TensorRecord::from_uniform(const std::string& name, const QuantizedMatrix& q) {
  TensorRecord t;
  t.name = name;
  t.encoding = TensorEncoding::uniform_quant;
  t.shape = {q.rows, q.cols};
  t.uniform = q;
  t.params["bits"] = q.config.bits;
  t.params["scheme"] = scheme_name(q.config.scheme);
  t.params["granularity"] = gran_name(q.config.granularity);
  if (q.config.granularity == Granularity::per_group) t.params["group_size"] = q.config.group_size;
  return t;
}

TensorRecord TensorRecord::from_dbf(const std::string& name, const DbfMatrix& f) {
  TensorRecord t;
  t.name = name;
  t.encoding = TensorEncoding::dbf;
  t.shape = {f.rows, f.cols};
  t.dbf = f;
  t.params["rank"] = f.rank;
  return t;
}

TensorRecord TensorRecord::from_mdbf(const std::string& name, const MdbfMatrix& f) {
  TensorRecord t;
  t.name = name;
  t.encoding = TensorEncoding::mdbf;
  t.shape = {f.rows, f.cols};
  t.mdbf = f;
  t.params["rank"] = f.rank;
  t.params["env_rank"] = f.env_rank;
  return t;
}

Matrix TensorRecord::dense() const {
  switch (encoding) {
    case TensorEncoding::f32: return f32;
    case TensorEncoding::uniform_quant: return dequantize(uniform);
    case TensorEncoding::dbf: return dequantize_binfact(dbf);
    case TensorEncoding::mdbf: return dequantize_binfact(mdbf);
  }
  throw io_error("container: bad encoding");
}

size_t TensorRecord::payload_bytes() const {
  switch (encoding) {
    case TensorEncoding::f32: return shape.at(0) * shape.at(1) * 4;
    case TensorEncoding::uniform_quant: return storage_bytes(uniform);
    case TensorEncoding::dbf: return dbf_storage_bytes(dbf);
    case TensorEncoding::mdbf: return mdbf_storage_bytes(mdbf);
  }
  return 0;
}

const TensorRecord* OcwContainer::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

TensorRecord* OcwContainer::find(const std::string& name) {
  for (auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<uint8_t> serialize_ocw(const OcwContainer& c) {
  nlohmann::json header;
  header["meta"] = c.meta.is_null() ? nlohmann::json::object() : c.meta;
  nlohmann::json list = nlohmann::json::array();

  std::vector<uint8_t> payload;
  for (const auto& t : c.tensors) {
    nlohmann::json entry;
    entry["name"] = t.name;
    entry["encoding"] = tensor_encoding_name(t.encoding);
    entry["shape"] = t.shape;
    entry["offset"] = payload.size();
    if (!t.params.is_null() && !t.params.empty()) entry["params"] = t.params;
    const std::vector<uint8_t> bytes = tensor_payload(t);
    if (bytes.size() != t.payload_bytes())
      throw io_error("container: payload accounting mismatch for " + t.name);
    entry["bytes"] = bytes.size();
    payload.insert(payload.end(), bytes.begin(), bytes.end());
    list.push_back(std::move(entry));
  }
  header["tensors"] = std::move(list);

  const std::string header_str = header.dump();
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u64(out, header_str.size());
  out.insert(out.end(), header_str.begin(), header_str.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

OcwContainer deserialize_ocw(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw io_error("container: bad magic (not an OCW1 file)");
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= uint64_t(bytes[4 + i]) << (8 * i);
  if (12 + header_len > bytes.size()) throw io_error("container: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + ptrdiff_t(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("container: header parse failure: ") + e.what());
  }

  const uint8_t* payload = bytes.data() + 12 + header_len;
  const size_t payload_len = bytes.size() - 12 - header_len;

  OcwContainer c;
  c.meta = header.value("meta", nlohmann::json::object());
  size_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    TensorRecord t;
    t.name = entry.at("name").get<std::string>();
    t.encoding = encoding_from(entry.at("encoding").get<std::string>());
    t.shape = entry.at("shape").get<std::vector<size_t>>();
    t.params = entry.value("params", nlohmann::json::object());
    const size_t offset = entry.at("offset").get<size_t>();
    const size_t nbytes = entry.at("bytes").get<size_t>();
    if (offset != expected_offset)
      throw io_error("container: tensor offsets must be ascending and packed");
    if (offset + nbytes > payload_len) throw io_error("container: tensor exceeds payload");
    parse_payload(t, payload + offset, nbytes);
    expected_offset = offset + nbytes;
    c.tensors.push_back(std::move(t));
  }
  if (expected_offset != payload_len)
    throw io_error("container: payload length does not match tensor sizes");
  return c;
}

void store_ocw(const std::string& path, const OcwContainer& c) {
  const std::vector<uint8_t> bytes = serialize_ocw(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw io_error("write failure: " + path);
}

OcwContainer load_ocw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return deserialize_ocw(bytes);
}

bool PreTransform::any() const {
  return !smooth.empty() || rotation != RotationKind::identity || !balance_row.empty();
}

nlohmann::json PreTransform::to_json() const {
  nlohmann::json j;
  if (!smooth.empty()) j["smooth"] = smooth;
  if (rotation != RotationKind::identity) {
    j["rotation"] = {{"kind", rotation == RotationKind::hadamard ? "hadamard" : "random"},
                     {"seed", rotation_seed}};
  }
  if (!balance_row.empty()) {
    j["balance_row"] = balance_row;
    j["balance_col"] = balance_col;
  }
  return j;
}

PreTransform PreTransform::from_json(const nlohmann::json& j) {
  PreTransform p;
  if (j.contains("smooth")) p.smooth = j.at("smooth").get<std::vector<float>>();
  if (j.contains("rotation")) {
    const std::string kind = j.at("rotation").at("kind").get<std::string>();
    p.rotation = kind == "hadamard" ? RotationKind::hadamard : RotationKind::random_orthogonal;
    p.rotation_seed = j.at("rotation").at("seed").get<uint64_t>();
  }
  if (j.contains("balance_row")) {
    p.balance_row = j.at("balance_row").get<std::vector<float>>();
    p.balance_col = j.at("balance_col").get<std::vector<float>>();
  }
  return p;
}

Matrix PreTransform::activation_matrix(size_t n) const {
  Matrix m = identity(n);
  if (!smooth.empty()) {
    if (smooth.size() != n) throw invalid_input("PreTransform: smooth length mismatch");
    for (size_t i = 0; i < n; ++i) m.at(i, i) = smooth[i];
  }
  if (rotation != RotationKind::identity) {
    const Rotation r = rotation == RotationKind::hadamard
                           ? Rotation::hadamard(n)
                           : Rotation::random_orthogonal(n, rotation_seed);
    m = matmul(m, r.r);
  }
  if (!balance_row.empty()) {
    if (balance_row.size() != n) throw invalid_input("PreTransform: balance length mismatch");
    for (size_t i = 0; i < m.rows; ++i)
      for (size_t j = 0; j < m.cols; ++j) m.at(i, j) *= balance_row[j];
  }
  return m;
}

Matrix PreTransform::invert_on_weight(const Matrix& wq) const {
  Matrix w = matmul(activation_matrix(wq.rows), wq);
  if (!balance_col.empty()) {
    if (balance_col.size() != w.cols) throw invalid_input("PreTransform: balance_col mismatch");
    for (size_t i = 0; i < w.rows; ++i)
      for (size_t j = 0; j < w.cols; ++j) w.at(i, j) *= balance_col[j];
  }
  return w;
}

namespace {

void set_vector_tensor(OcwContainer& c, const std::string& name, const std::vector<float>& v) {
  Matrix m(1, v.size());
  std::copy(v.begin(), v.end(), m.data.begin());
  c.tensors.push_back(TensorRecord::from_f32(name, m));
}

std::vector<float> get_vector_tensor(const OcwContainer& c, const std::string& name) {
  const TensorRecord* t = c.find(name);
  if (!t) throw io_error("container: missing tensor " + name);
  Matrix m = t->dense();
  return m.data;
}

}  // namespace

nlohmann::json model_config_to_json(const ToyModelConfig& cfg) {
  return {{"L", cfg.L},         {"d", cfg.d},           {"H", cfg.H},
          {"H_kv", cfg.H_kv},   {"d_ff", cfg.d_ff},     {"vocab", cfg.vocab},
          {"T_max", cfg.T_max}, {"rope_base", cfg.rope_base}, {"rms_eps", cfg.rms_eps}};
}

ToyModelConfig model_config_from_json(const nlohmann::json& j) {
  ToyModelConfig cfg;
  cfg.L = j.at("L").get<size_t>();
  cfg.d = j.at("d").get<size_t>();
  cfg.H = j.at("H").get<size_t>();
  cfg.H_kv = j.at("H_kv").get<size_t>();
  cfg.d_ff = j.at("d_ff").get<size_t>();
  cfg.vocab = j.at("vocab").get<size_t>();
  cfg.T_max = j.at("T_max").get<size_t>();
  cfg.rope_base = j.at("rope_base").get<float>();
  cfg.rms_eps = j.at("rms_eps").get<float>();
  cfg.validate();
  return cfg;
}

OcwContainer model_to_container(const ToyModel& m) {
  OcwContainer c;
  c.meta["model_config"] = model_config_to_json(m.config);
  c.tensors.push_back(TensorRecord::from_f32("embedding", m.embedding));
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const auto& b = m.blocks[i];
    c.tensors.push_back(TensorRecord::from_f32(p + "q", b.wq));
    c.tensors.push_back(TensorRecord::from_f32(p + "k", b.wk));
    c.tensors.push_back(TensorRecord::from_f32(p + "v", b.wv));
    c.tensors.push_back(TensorRecord::from_f32(p + "o", b.wo));
    c.tensors.push_back(TensorRecord::from_f32(p + "gate", b.wgate));
    c.tensors.push_back(TensorRecord::from_f32(p + "up", b.wup));
    c.tensors.push_back(TensorRecord::from_f32(p + "down", b.wdown));
    set_vector_tensor(c, "norm." + std::to_string(i) + ".attn", b.norm_attn);
    set_vector_tensor(c, "norm." + std::to_string(i) + ".ffn", b.norm_ffn);
  }
  set_vector_tensor(c, "final_norm", m.final_norm);
  return c;
}

ToyModel model_from_container(const OcwContainer& c) {
  if (!c.meta.contains("model_config"))
    throw io_error("container: missing model_config in meta");
  ToyModel m;
  m.config = model_config_from_json(c.meta.at("model_config"));

  auto dense_weight = [&](const std::string& name) {
    const TensorRecord* t = c.find(name);
    if (!t) throw io_error("container: missing tensor " + name);
    Matrix w = t->dense();
    if (t->params.contains("pre")) w = PreTransform::from_json(t->params.at("pre")).invert_on_weight(w);
    return w;
  };

  m.embedding = dense_weight("embedding");
  m.blocks.resize(m.config.L);
  for (size_t i = 0; i < m.config.L; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& b = m.blocks[i];
    b.wq = dense_weight(p + "q");
    b.wk = dense_weight(p + "k");
    b.wv = dense_weight(p + "v");
    b.wo = dense_weight(p + "o");
    b.wgate = dense_weight(p + "gate");
    b.wup = dense_weight(p + "up");
    b.wdown = dense_weight(p + "down");
    b.norm_attn = get_vector_tensor(c, "norm." + std::to_string(i) + ".attn");
    b.norm_ffn = get_vector_tensor(c, "norm." + std::to_string(i) + ".ffn");
  }
  m.final_norm = get_vector_tensor(c, "final_norm");
  m.config.validate();
  return m;
}

}  // namespace ocw
