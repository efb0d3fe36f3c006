#include "ocw/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ocw/eigen_map.hpp"
#include "ocw/jointq.hpp"
#include "ocw/lpcd.hpp"

namespace ocw {

std::string InspectReport::text() const {
  std::ostringstream os;
  os << "quantizable modules: " << graph.layers.size() << "\n";
  for (const auto& l : graph.layers)
    os << "  " << l.id << "  " << l.rows << "x" << l.cols << "  (" << l.rows * l.cols
       << " params)\n";
  os << "quantizable params: " << quantizable_params << "\n";
  os << "total params:       " << total_params << "\n";
  os << "fp16 equivalent:    " << fp16_equivalent_bytes << " bytes\n";
  return os.str();
}

InspectReport inspect_model(const ToyModel& m) {
  InspectReport r;
  r.graph = m.layer_graph();
  r.total_params = m.param_count();
  r.quantizable_params = r.graph.weight_params();
  r.fp16_equivalent_bytes = 2 * r.total_params;
  return r;
}

WeightFormat weight_format_from_name(const std::string& name) {
  if (name == "uniform") return WeightFormat::uniform;
  if (name == "dbf") return WeightFormat::dbf;
  if (name == "mdbf") return WeightFormat::mdbf;
  throw invalid_input("unknown weight format: " + name);
}

namespace {

struct LayerPlanEntry {
  bool passthrough = false;
  QuantConfig config;
};

LayerPlanEntry resolve_layer(const SweepOptions& opts, const std::string& layer_id) {
  LayerPlanEntry e;
  if (opts.passthrough) {
    e.passthrough = true;
    return e;
  }
  if (opts.plan) {
    auto it = opts.plan->assignment.find(layer_id);
    if (it == opts.plan->assignment.end())
      throw invalid_input("plan does not cover layer " + layer_id);
    e.config = it->second.config;
  } else {
    e.config = opts.base.config;
  }
  if (e.config.bits >= 16) e.passthrough = true;  // keep in float
  return e;
}

// stacked full-precision and quantized-model inputs for one layer
struct LayerInputs {
  Matrix x_fp;
  Matrix x_hat;
};

LayerInputs collect_dual_inputs(const ToyModel& fp_model, const ToyModel& q_model,
                                const CalibSet& calib, const std::string& layer_id) {
  LayerInputs li;
  for (const auto& seq : calib.sequences) {
    ForwardTaps fp_taps = forward_with_taps(fp_model, seq);
    ForwardTaps q_taps = forward_with_taps(q_model, seq);
    const Matrix& xf = fp_taps.inputs.at(layer_id);
    const Matrix& xh = q_taps.inputs.at(layer_id);
    li.x_fp = li.x_fp.empty() ? xf : vstack(li.x_fp, xf);
    li.x_hat = li.x_hat.empty() ? xh : vstack(li.x_hat, xh);
  }
  return li;
}

uint64_t mix_seed(uint64_t seed, size_t layer_index) {
  return seed * 0x9e3779b97f4a7c15ull + 0x100000001b3ull * (layer_index + 1);
}

// Builds the per-layer preprocess transform and returns the weight already
// mapped into quantization space.
PreTransform build_pre(const PreprocessSettings& ps, size_t layer_index, const Matrix& x_hat,
                       Matrix& w) {
  PreTransform pre;
  if (ps.smooth_alpha) {
    ChannelScale cs = smooth_scale(x_hat, w, *ps.smooth_alpha);
    pre.smooth = cs.s;
    w = apply_channel_scale_to_weights(w, cs);
  }
  if (ps.rotation != RotationKind::identity) {
    pre.rotation = ps.rotation;
    pre.rotation_seed = mix_seed(ps.seed, layer_index);
    const Rotation rot = ps.rotation == RotationKind::hadamard
                             ? Rotation::hadamard(w.rows)
                             : Rotation::random_orthogonal(w.rows, pre.rotation_seed);
    w = apply_rotation(w, rot, RotationSide::input);
  }
  if (ps.balance) {
    SinkhornResult sr = sinkhorn_balance(w, *ps.balance);
    pre.balance_row = sr.row_scale;
    pre.balance_col = sr.col_scale;
    w = sr.balanced;
  }
  return pre;
}

}  // namespace

OcwContainer QuantizedModelState::to_container() const {
  OcwContainer c = model_to_container(model);
  for (auto& t : c.tensors) {
    auto pre_it = pre.find(t.name);
    const bool has_lowrank = lowrank.count(t.name) > 0;
    if (uniform.count(t.name) && !has_lowrank) {
      t = TensorRecord::from_uniform(t.name, uniform.at(t.name));
    } else if (dbf.count(t.name) && !has_lowrank) {
      t = TensorRecord::from_dbf(t.name, dbf.at(t.name));
    } else if (mdbf.count(t.name) && !has_lowrank) {
      t = TensorRecord::from_mdbf(t.name, mdbf.at(t.name));
    } else {
      continue;  // passthrough and low-rank-corrected tensors stay f32
    }
    if (pre_it != pre.end() && pre_it->second.any()) t.params["pre"] = pre_it->second.to_json();
  }
  return c;
}

QuantizedModelState state_from_container(const OcwContainer& c) {
  QuantizedModelState st;
  st.model = model_from_container(c);
  for (const auto& t : c.tensors) {
    if (t.encoding == TensorEncoding::uniform_quant) st.uniform[t.name] = t.uniform;
    if (t.encoding == TensorEncoding::dbf) st.dbf[t.name] = t.dbf;
    if (t.encoding == TensorEncoding::mdbf) st.mdbf[t.name] = t.mdbf;
    if (t.params.contains("pre")) st.pre[t.name] = PreTransform::from_json(t.params.at("pre"));
  }
  for (const auto& l : st.model.layer_graph().layers)
    if (!st.uniform.count(l.id) && !st.dbf.count(l.id) && !st.mdbf.count(l.id))
      st.passthrough.push_back(l.id);
  return st;
}

namespace {

Matrix transformed_activations(const Matrix& x, const PreTransform& pre) {
  if (!pre.any()) return x;
  return matmul(x, pre.activation_matrix(x.cols));
}

// dense model-space weight of an encoded layer, including low-rank
// corrections and the preprocess inversion
Matrix effective_dense(const QuantizedModelState& st, const std::string& id) {
  Matrix wq;
  if (st.uniform.count(id)) wq = dequantize(st.uniform.at(id));
  else if (st.dbf.count(id)) wq = dequantize_binfact(st.dbf.at(id));
  else if (st.mdbf.count(id)) wq = dequantize_binfact(st.mdbf.at(id));
  else throw invalid_input("effective_dense: layer " + id + " is not quantized");
  auto lr = st.lowrank.find(id);
  if (lr != st.lowrank.end() && lr->second.b.cols > 0)
    wq = wq + matmul(lr->second.b, lr->second.a);
  auto pre_it = st.pre.find(id);
  if (pre_it != st.pre.end() && pre_it->second.any())
    return pre_it->second.invert_on_weight(wq);
  return wq;
}

void install_layer(QuantizedModelState& st, const std::string& id) {
  st.model.weight(id) = effective_dense(st, id);
}

}  // namespace

QuantizedModelState run_layerwise_sweep(const ToyModel& fp_model, const CalibSet& calib,
                                        const SweepOptions& opts) {
  if (calib.sequences.empty()) throw invalid_input("run_layerwise_sweep: empty calibration set");
  const bool pre_enabled = opts.preprocess.smooth_alpha ||
                           opts.preprocess.rotation != RotationKind::identity ||
                           opts.preprocess.balance.has_value();
  if (opts.lpcd_iters > 0 && pre_enabled)
    throw invalid_input("run_layerwise_sweep: the submodule pass does not combine with "
                        "preprocessing transforms; disable one of them");
  if (opts.lpcd_iters > 0 && opts.format != WeightFormat::uniform)
    throw invalid_input("run_layerwise_sweep: the submodule pass requires the uniform format");

  QuantizedModelState st;
  st.model = fp_model;
  const LayerGraph graph = fp_model.layer_graph();

  for (size_t li = 0; li < graph.layers.size(); ++li) {
    const LayerInfo& info = graph.layers[li];
    const LayerPlanEntry entry = resolve_layer(opts, info.id);
    if (entry.passthrough) {
      st.passthrough.push_back(info.id);
      continue;
    }

    LayerInputs inputs = collect_dual_inputs(fp_model, st.model, calib, info.id);
    Matrix w = fp_model.weight(info.id);
    PreTransform pre = build_pre(opts.preprocess, li, inputs.x_hat, w);
    const Matrix x_hat = transformed_activations(inputs.x_hat, pre);
    const Matrix x_fp = transformed_activations(inputs.x_fp, pre);

    CalibStats stats(w.rows);
    accumulate_stats(stats, x_fp, x_hat);

    Matrix target = w;
    if (opts.base.qep) target = qep_target(w, stats, *opts.base.qep);

    if (opts.format == WeightFormat::uniform) {
      LayerQuantOptions lq = opts.base;
      lq.config = entry.config;
      lq.qep.reset();  // target correction already applied above
      QuantizedMatrix q = quantize_layer(target, stats, lq);
      st.uniform[info.id] = std::move(q);
    } else {
      const size_t rank =
          rank_for_bpw(w.rows, w.cols, opts.bpw,
                       opts.format == WeightFormat::dbf ? BinfactFormat::dbf : BinfactFormat::mdbf,
                       opts.env_rank);
      const Matrix gram = stats.gram_matrix();
      if (opts.format == WeightFormat::dbf) {
        DbfMatrix f = msvid_init_dbf(target, rank);
        refine_alternating(f, target, opts.binfact_outer, opts.binfact_inner, &gram);
        st.dbf[info.id] = std::move(f);
      } else {
        MdbfMatrix f = msvid_init(target, rank, opts.env_rank);
        refine_alternating(f, target, opts.binfact_outer, opts.binfact_inner, &gram);
        st.mdbf[info.id] = std::move(f);
      }
    }

    st.pre[info.id] = pre;
    st.targets[info.id] = target;
    install_layer(st, info.id);

    // recorded objective: || Xhat What - X W ||_F^2 in quantization space
    Matrix what_q;
    if (st.uniform.count(info.id)) what_q = dequantize(st.uniform.at(info.id));
    else if (st.dbf.count(info.id)) what_q = dequantize_binfact(st.dbf.at(info.id));
    else what_q = dequantize_binfact(st.mdbf.at(info.id));
    st.layer_objective[info.id] =
        squared_frobenius(matmul(x_hat, what_q) - matmul(x_fp, w));

    // per-block coordinate descent once the block is complete
    if (opts.lpcd_iters > 0 && info.role == LayerRole::down) {
      const size_t block = info.block;
      for (SubmoduleKind kind :
           {SubmoduleKind::qk, SubmoduleKind::vo, SubmoduleKind::gate_up_down}) {
        Submodule sub = kind == SubmoduleKind::qk
                            ? make_qk_submodule(fp_model, st.model, calib, block)
                            : kind == SubmoduleKind::vo
                                  ? make_vo_submodule(fp_model, st.model, calib, block)
                                  : make_gud_submodule(fp_model, st.model, calib, block);
        std::map<std::string, QuantizedMatrix> members;
        for (const auto& id : sub.members) members[id] = st.uniform.at(id);
        ProjectFn project = [&](const std::string& id, const Matrix& relaxed) {
          return quantize_matrix(relaxed, resolve_layer(opts, id).config, opts.base.scale_mode);
        };
        lpcd_refine(sub, members, project, opts.lpcd_iters);
        for (const auto& [id, q] : members) {
          st.uniform[id] = q;
          install_layer(st, id);
        }
      }
    }
  }
  return st;
}

FidelityReport evaluate_fidelity(const ToyModel& teacher, const ToyModel& student,
                                 const CalibSet& eval_set) {
  if (eval_set.sequences.empty()) throw invalid_input("evaluate_fidelity: empty evaluation set");
  FidelityReport rep;
  const size_t layers = teacher.config.L;
  std::vector<Matrix> t_hidden(layers), s_hidden(layers);
  Matrix t_logits, s_logits;
  double nll_sum = 0.0;
  size_t nll_count = 0;

  const LayerGraph graph = teacher.layer_graph();
  for (const auto& l : graph.layers) rep.layer_recon[l.id] = 0.0;

  for (const auto& seq : eval_set.sequences) {
    ForwardTaps tt = forward_with_taps(teacher, seq);
    ForwardTaps ss = forward_with_taps(student, seq);
    t_logits = t_logits.empty() ? tt.logits : vstack(t_logits, tt.logits);
    s_logits = s_logits.empty() ? ss.logits : vstack(s_logits, ss.logits);
    for (size_t l = 0; l < layers; ++l) {
      t_hidden[l] = t_hidden[l].empty() ? tt.hidden[l] : vstack(t_hidden[l], tt.hidden[l]);
      s_hidden[l] = s_hidden[l].empty() ? ss.hidden[l] : vstack(s_hidden[l], ss.hidden[l]);
    }
    if (seq.size() >= 2) {
      nll_sum += nll_from_logits(ss.logits, seq) * double(seq.size() - 1);
      nll_count += seq.size() - 1;
    }
    for (const auto& l : graph.layers) {
      const Matrix& xt = tt.inputs.at(l.id);
      const Matrix& xs = ss.inputs.at(l.id);
      rep.layer_recon[l.id] += squared_frobenius(
          matmul(xs, student.weight(l.id)) - matmul(xt, teacher.weight(l.id)));
    }
  }

  rep.kl = kl_divergence(t_logits, s_logits, 1.0);
  rep.hidden_cosine = hidden_alignment(t_hidden, s_hidden);
  rep.hidden_cosine_mean = mean(rep.hidden_cosine);
  rep.entropy = entropy(s_logits);
  rep.nll = nll_count ? nll_sum / double(nll_count) : 0.0;
  return rep;
}

nlohmann::json FidelityReport::to_json() const {
  return {{"kl", kl},
          {"hidden_cosine", hidden_cosine},
          {"hidden_cosine_mean", hidden_cosine_mean},
          {"entropy", entropy},
          {"nll", nll},
          {"layer_recon", layer_recon}};
}

std::string FidelityReport::text() const {
  std::ostringstream os;
  os << "kl                 " << kl << "\n";
  os << "hidden_cosine_mean " << hidden_cosine_mean << "\n";
  os << "entropy            " << entropy << "\n";
  os << "nll                " << nll << "\n";
  return os.str();
}

namespace {

Matrix layer_target(const QuantizedModelState& st, const ToyModel& fp_model,
                    const std::string& id) {
  auto it = st.targets.find(id);
  if (it != st.targets.end()) return it->second;
  // reconstructed pivot: fall back to the full-precision weight mapped into
  // quantization space
  Matrix w = fp_model.weight(id);
  auto pre_it = st.pre.find(id);
  if (pre_it == st.pre.end() || !pre_it->second.any()) return w;
  const PreTransform& pre = pre_it->second;
  Eigen::MatrixXd m = to_eigen_d(pre.activation_matrix(w.rows));
  Eigen::MatrixXd wq = m.partialPivLu().solve(to_eigen_d(w));
  Matrix out = from_eigen(wq);
  if (!pre.balance_col.empty())
    for (size_t i = 0; i < out.rows; ++i)
      for (size_t j = 0; j < out.cols; ++j) out.at(i, j) /= pre.balance_col[j];
  return out;
}

Matrix student_layer_inputs(const QuantizedModelState& st, const CalibSet& calib,
                            const std::string& id) {
  Matrix x = collect_layer_inputs(st.model, calib, id);
  auto pre_it = st.pre.find(id);
  if (pre_it != st.pre.end() && pre_it->second.any())
    x = transformed_activations(x, pre_it->second);
  return x;
}

void apply_jointq_refiner(QuantizedModelState& st, const ToyModel& fp_model,
                          const CalibSet& calib, const nlohmann::json& params) {
  JointqOptions opts;
  opts.lambda = params.value("lambda", 0.2);
  opts.max_passes = params.value("passes", 8);
  opts.move_radius = params.value("radius", 1);
  for (auto& [id, q] : st.uniform) {
    const Matrix x = student_layer_inputs(st, calib, id);
    const Matrix target = layer_target(st, fp_model, id);
    JointqResult res = jointq_refine(q, target, x, opts);
    q = std::move(res.refined);
    st.layer_objective[id] = res.objective_trace.back();
    install_layer(st, id);
  }
}

void apply_lpcd_refiner(QuantizedModelState& st, const ToyModel& fp_model, const CalibSet& calib,
                        const nlohmann::json& params) {
  for (const auto& [id, pre] : st.pre)
    if (pre.any())
      throw invalid_input("lpcd refiner: preprocessing transforms are not supported here");
  const int iters = params.value("iters", 3);
  for (size_t block = 0; block < st.model.config.L; ++block) {
    for (SubmoduleKind kind :
         {SubmoduleKind::qk, SubmoduleKind::vo, SubmoduleKind::gate_up_down}) {
      Submodule sub = kind == SubmoduleKind::qk
                          ? make_qk_submodule(fp_model, st.model, calib, block)
                          : kind == SubmoduleKind::vo
                                ? make_vo_submodule(fp_model, st.model, calib, block)
                                : make_gud_submodule(fp_model, st.model, calib, block);
      bool all_uniform = true;
      for (const auto& id : sub.members) all_uniform &= st.uniform.count(id) > 0;
      if (!all_uniform) continue;
      std::map<std::string, QuantizedMatrix> members;
      for (const auto& id : sub.members) members[id] = st.uniform.at(id);
      ProjectFn project = [&](const std::string& id, const Matrix& relaxed) {
        return quantize_matrix(relaxed, st.uniform.at(id).config);
      };
      lpcd_refine(sub, members, project, iters);
      for (const auto& [id, q] : members) {
        st.uniform[id] = q;
        install_layer(st, id);
      }
    }
  }
}

void apply_lowrank_refiner(QuantizedModelState& st, const ToyModel& fp_model,
                           const CalibSet& calib, const nlohmann::json& params) {
  const size_t rank = params.value("rank", 2);
  std::vector<std::string> ids;
  for (const auto& [id, q] : st.uniform) ids.push_back(id);
  for (const auto& [id, f] : st.dbf) ids.push_back(id);
  for (const auto& [id, f] : st.mdbf) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) {
    if (rank == 0) break;
    const Matrix x = student_layer_inputs(st, calib, id);
    const Matrix target = layer_target(st, fp_model, id);
    Matrix wq;
    if (st.uniform.count(id)) wq = dequantize(st.uniform.at(id));
    else if (st.dbf.count(id)) wq = dequantize_binfact(st.dbf.at(id));
    else wq = dequantize_binfact(st.mdbf.at(id));
    st.lowrank[id] = lowrank_residual_fit(target, wq, x, std::min(rank, std::min(wq.rows, wq.cols)));
    install_layer(st, id);
  }
}

void apply_binfact_refiner(QuantizedModelState& st, const ToyModel& fp_model,
                           const CalibSet& calib, const nlohmann::json& params) {
  const int outer = params.value("outer", 20);
  const int inner = params.value("inner", 2);
  for (auto& [id, f] : st.dbf) {
    const Matrix x = student_layer_inputs(st, calib, id);
    const Matrix gram = matmul(transpose(x), x);
    refine_alternating(f, layer_target(st, fp_model, id), outer, inner, &gram);
    install_layer(st, id);
  }
  for (auto& [id, f] : st.mdbf) {
    const Matrix x = student_layer_inputs(st, calib, id);
    const Matrix gram = matmul(transpose(x), x);
    refine_alternating(f, layer_target(st, fp_model, id), outer, inner, &gram);
    install_layer(st, id);
  }
}

}  // namespace

RefineResult run_refiners(const ToyModel& fp_model, QuantizedModelState pivot,
                          const CalibSet& calib, const std::vector<RefinerSpec>& refiners,
                          const CalibSet& eval_set) {
  RefineResult out;
  out.trace.push_back({"pivot", evaluate_fidelity(fp_model, pivot.model, eval_set)});
  for (const auto& spec : refiners) {
    if (spec.name == "jointq") {
      apply_jointq_refiner(pivot, fp_model, calib, spec.params);
    } else if (spec.name == "lpcd") {
      apply_lpcd_refiner(pivot, fp_model, calib, spec.params);
    } else if (spec.name == "lowrank") {
      apply_lowrank_refiner(pivot, fp_model, calib, spec.params);
    } else if (spec.name == "binfact-refine") {
      apply_binfact_refiner(pivot, fp_model, calib, spec.params);
    } else {
      throw invalid_input("unknown refiner: " + spec.name);
    }
    out.trace.push_back({spec.name, evaluate_fidelity(fp_model, pivot.model, eval_set)});
  }
  out.state = std::move(pivot);
  return out;
}

std::string stage_table_csv(const std::vector<StageTrace>& trace) {
  std::ostringstream os;
  os << "stage,metric,value\n";
  for (const auto& st : trace) {
    os << st.stage << ",kl," << st.report.kl << "\n";
    os << st.stage << ",hidden_cosine_mean," << st.report.hidden_cosine_mean << "\n";
    os << st.stage << ",entropy," << st.report.entropy << "\n";
    os << st.stage << ",nll," << st.report.nll << "\n";
  }
  return os.str();
}

nlohmann::json plan_to_json(const Plan& plan, size_t budget_bytes) {
  nlohmann::json mods = nlohmann::json::object();
  for (const auto& [id, cand] : plan.assignment) {
    mods[id] = {{"bits", cand.config.bits},
                {"granularity", cand.config.granularity == Granularity::per_channel
                                    ? "per-channel"
                                    : "per-group"},
                {"group_size", cand.config.group_size},
                {"scheme", cand.config.scheme == Scheme::symmetric ? "symmetric" : "asymmetric"},
                {"cost_bytes", cand.cost_bytes},
                {"err", cand.err}};
  }
  return {{"budget_bytes", budget_bytes},
          {"total_cost", plan.total_cost},
          {"total_err", plan.total_err},
          {"achieved_bpw", plan.achieved_bpw},
          {"modules", mods}};
}

Plan plan_from_json(const nlohmann::json& j) {
  Plan p;
  p.total_cost = j.value("total_cost", size_t(0));
  p.total_err = j.value("total_err", 0.0);
  p.achieved_bpw = j.value("achieved_bpw", 0.0);
  for (const auto& [id, m] : j.at("modules").items()) {
    ConfigCandidate c;
    c.config.bits = m.at("bits").get<int>();
    const std::string gran = m.at("granularity").get<std::string>();
    c.config.granularity =
        gran == "per-channel" ? Granularity::per_channel
        : gran == "per-tensor" ? Granularity::per_tensor : Granularity::per_group;
    c.config.group_size = m.value("group_size", size_t(128));
    c.config.scheme =
        m.value("scheme", std::string("symmetric")) == "asymmetric" ? Scheme::asymmetric
                                                                    : Scheme::symmetric;
    c.cost_bytes = m.value("cost_bytes", size_t(0));
    c.err = m.value("err", 0.0);
    p.assignment[id] = c;
  }
  return p;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.raw = j;
  c.seed = j.value("seed", uint64_t(1));
  if (const char* env = std::getenv("OCW_SEED")) c.seed = std::strtoull(env, nullptr, 10);
  return c;
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw invalid_input(std::string("config parse failure: ") + e.what());
  }
  return from_json(j);
}

namespace {

ToyModel model_from_config(const nlohmann::json& j, uint64_t default_seed) {
  if (j.contains("path")) return model_from_container(load_ocw(j.at("path").get<std::string>()));
  nlohmann::json init = j.value("init", nlohmann::json::object());
  ToyModelConfig cfg;
  cfg.L = init.value("L", cfg.L);
  cfg.d = init.value("d", cfg.d);
  cfg.H = init.value("H", cfg.H);
  cfg.H_kv = init.value("H_kv", cfg.H_kv);
  cfg.d_ff = init.value("d_ff", cfg.d_ff);
  cfg.vocab = init.value("vocab", cfg.vocab);
  cfg.T_max = init.value("T_max", cfg.T_max);
  cfg.rope_base = init.value("rope_base", cfg.rope_base);
  cfg.rms_eps = init.value("rms_eps", cfg.rms_eps);
  return ToyModel::seeded(cfg, init.value("seed", default_seed));
}

TokenCorpus corpus_from_config(const nlohmann::json& j, size_t vocab, uint64_t seed) {
  if (j.contains("corpus")) {
    const std::string path = j.at("corpus").get<std::string>();
    const std::string format = j.value("format", std::string("bytes"));
    if (format == "bytes") return TokenCorpus::from_byte_file(path);
    if (format == "u32") return TokenCorpus::from_u32_file(path, vocab);
    throw invalid_input("unknown corpus format: " + format);
  }
  const nlohmann::json synth = j.value("synthetic", nlohmann::json::object());
  return TokenCorpus::synthetic(synth.value("length", size_t(4096)), vocab,
                                synth.value("seed", seed));
}

}  // namespace

RunResult run_pipeline(const PipelineConfig& config) {
  const nlohmann::json& j = config.raw;
  ToyModel model = model_from_config(j.value("model", nlohmann::json::object()), config.seed);

  RunResult out;
  out.inspect = inspect_model(model);

  // calibration and held-out evaluation sets
  const nlohmann::json cj = j.value("calib", nlohmann::json::object());
  TokenCorpus corpus = corpus_from_config(cj, model.config.vocab, config.seed);
  const size_t n = cj.value("n", size_t(4));
  const size_t T = cj.value("T", size_t(16));
  const CalibStrategy strategy =
      calib_strategy_from_name(cj.value("strategy", std::string("concat_chunk")));
  CalibSet calib = sample_calib(corpus, strategy, n, T, cj.value("seed", config.seed));

  const nlohmann::json ej = j.value("eval", nlohmann::json::object());
  const size_t eval_n = ej.value("n", size_t(2));
  // held-out tail: chunks after the calibration prefix
  TokenCorpus tail;
  tail.vocab = corpus.vocab;
  const size_t used = n * T + (strategy == CalibStrategy::drop_head ? n * (T / 4) : 0);
  if (corpus.tokens.size() < used + eval_n * T)
    throw invalid_input("run: corpus too small for the held-out evaluation set");
  tail.tokens.assign(corpus.tokens.begin() + ptrdiff_t(used), corpus.tokens.end());
  CalibSet eval_set = sample_calib(tail, CalibStrategy::concat_chunk, eval_n, T, config.seed);

  // sweep options
  SweepOptions sweep;
  const nlohmann::json qj = j.value("quantize", nlohmann::json::object());
  sweep.format = weight_format_from_name(qj.value("format", std::string("uniform")));
  sweep.base.method = base_method_from_name(qj.value("method", std::string("gptq")));
  sweep.base.scale_mode = qj.value("mse_grid", false) ? ScaleMode::mse_grid : ScaleMode::minmax;
  sweep.base.gptq.actorder = qj.value("actorder", false);
  sweep.base.gptq.percdamp = qj.value("percdamp", 0.01);
  if (qj.value("qep", true))
    sweep.base.qep = QepOptions{qj.value("qep_alpha", 1.0), qj.value("qep_eta", 0.01)};
  sweep.lpcd_iters = qj.value("lpcd_iters", 0);
  sweep.bpw = qj.value("bpw", 1.5);
  sweep.env_rank = qj.value("envelope_rank", size_t(2));
  sweep.binfact_outer = qj.value("outer", 30);
  sweep.binfact_inner = qj.value("inner", 2);

  const nlohmann::json pj = j.value("preprocess", nlohmann::json::object());
  if (pj.contains("smooth_alpha") && !pj.at("smooth_alpha").is_null())
    sweep.preprocess.smooth_alpha = pj.at("smooth_alpha").get<float>();
  const std::string rot = pj.value("rotation", std::string("none"));
  if (rot == "random") sweep.preprocess.rotation = RotationKind::random_orthogonal;
  else if (rot == "hadamard") sweep.preprocess.rotation = RotationKind::hadamard;
  else if (rot != "none") throw invalid_input("unknown rotation kind: " + rot);
  const std::string bal = pj.value("balance", std::string("none"));
  if (bal == "l1") sweep.preprocess.balance = BalanceNorm::l1;
  else if (bal == "l2") sweep.preprocess.balance = BalanceNorm::l2;
  else if (bal != "none") throw invalid_input("unknown balance norm: " + bal);
  sweep.preprocess.seed = config.seed;

  // plan resolution
  const nlohmann::json plj = j.value("plan", nlohmann::json::object());
  if (plj.value("passthrough", false)) {
    sweep.passthrough = true;
  } else if (plj.contains("path")) {
    std::ifstream in(plj.at("path").get<std::string>());
    if (!in) throw io_error("cannot open plan: " + plj.at("path").get<std::string>());
    nlohmann::json pjson;
    in >> pjson;
    sweep.plan = plan_from_json(pjson);
  } else if (plj.contains("bpw")) {
    const ErrorMode mode = error_mode_from_name(plj.value("mode", std::string("act")));
    std::vector<ModuleCandidates> mods;
    for (const auto& l : out.inspect.graph.layers) {
      ModuleCandidates mc;
      mc.layer_id = l.id;
      mc.params = l.rows * l.cols;
      std::vector<double> diag(l.rows, 1.0);
      if (mode == ErrorMode::act_aware) {
        Matrix x = collect_layer_inputs(model, calib, l.id);
        for (size_t i = 0; i < l.rows; ++i) {
          double acc = 0.0;
          for (size_t t = 0; t < x.rows; ++t) acc += double(x.at(t, i)) * double(x.at(t, i));
          diag[i] = acc;
        }
      }
      mc.candidates = candidate_grid(model.weight(l.id), mode,
                                     mode == ErrorMode::act_aware ? &diag : nullptr);
      mods.push_back(std::move(mc));
    }
    const size_t budget = budget_from_bpw(out.inspect.graph, plj.at("bpw").get<double>());
    sweep.plan = plan_assignment(mods, budget,
                                 plan_solver_from_name(plj.value("solver", std::string("dp"))));
  } else if (plj.contains("uniform")) {
    const nlohmann::json u = plj.at("uniform");
    sweep.base.config.bits = u.value("bits", 4);
    sweep.base.config.scheme = u.value("scheme", std::string("symmetric")) == "asymmetric"
                                   ? Scheme::asymmetric
                                   : Scheme::symmetric;
    const size_t g = u.value("group_size", size_t(0));
    sweep.base.config.granularity = g ? Granularity::per_group : Granularity::per_channel;
    sweep.base.config.group_size = g ? g : 128;
  }

  QuantizedModelState pivot = run_layerwise_sweep(model, calib, sweep);

  std::vector<RefinerSpec> refiners;
  for (const auto& r : j.value("refiners", nlohmann::json::array())) {
    RefinerSpec spec;
    spec.name = r.at("name").get<std::string>();
    spec.params = r;
    refiners.push_back(std::move(spec));
  }
  out.refined = run_refiners(model, std::move(pivot), calib, refiners, eval_set);

  out.output_path = j.value("output", std::string(""));
  if (!out.output_path.empty()) store_ocw(out.output_path, out.refined.state.to_container());
  return out;
}

}  // namespace ocw
