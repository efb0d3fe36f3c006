#include "ocw/lpcd.hpp"

#include <cmath>

#include "ocw/eigen_map.hpp"

namespace ocw {

namespace {

double silu_d(double z) { return z / (1.0 + std::exp(-z)); }
double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

// Full-precision causal attention probabilities per query head, replicating
// the model's RoPE / scaling / masking.
std::vector<Eigen::MatrixXd> causal_probs(const ToyModelConfig& cfg, const Eigen::MatrixXd& xa,
                                          const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk) {
  const size_t dk = cfg.head_dim();
  auto rope = [&](Eigen::MatrixXd x) {
    for (Eigen::Index t = 0; t < x.rows(); ++t)
      for (Eigen::Index h = 0; h < x.cols() / Eigen::Index(dk); ++h)
        for (size_t i = 0; i < dk / 2; ++i) {
          const double th =
              double(t) * std::pow(double(cfg.rope_base), -2.0 * double(i) / double(dk));
          const Eigen::Index a = h * Eigen::Index(dk) + Eigen::Index(2 * i);
          const double va = x(t, a), vb = x(t, a + 1);
          x(t, a) = va * std::cos(th) - vb * std::sin(th);
          x(t, a + 1) = va * std::sin(th) + vb * std::cos(th);
        }
    return x;
  };
  Eigen::MatrixXd q = rope(xa * wq), k = rope(xa * wk);
  const size_t group = cfg.H / cfg.H_kv;
  std::vector<Eigen::MatrixXd> probs(cfg.H);
  for (size_t h = 0; h < cfg.H; ++h) {
    const size_t g = h / group;
    Eigen::MatrixXd s = q.middleCols(Eigen::Index(h * dk), Eigen::Index(dk)) *
                        k.middleCols(Eigen::Index(g * dk), Eigen::Index(dk)).transpose() /
                        std::sqrt(double(dk));
    for (Eigen::Index t = 0; t < s.rows(); ++t) {
      double mx = -1e300;
      for (Eigen::Index u = 0; u <= t; ++u) mx = std::max(mx, s(t, u));
      double sum = 0.0;
      for (Eigen::Index u = 0; u <= t; ++u) sum += std::exp(s(t, u) - mx);
      for (Eigen::Index u = 0; u < s.cols(); ++u)
        s(t, u) = u <= t ? std::exp(s(t, u) - mx) / sum : 0.0;
    }
    probs[h] = std::move(s);
  }
  return probs;
}

std::string member_id(size_t block, const char* role) {
  return "blocks." + std::to_string(block) + "." + std::string(role);
}

std::string role_of(const std::string& member) {
  const size_t dot = member.rfind('.');
  return dot == std::string::npos ? member : member.substr(dot + 1);
}

void fill_geometry(Submodule& sub, const ToyModelConfig& cfg) {
  sub.d = cfg.d;
  sub.head_dim = cfg.head_dim();
  sub.heads = cfg.H;
  sub.kv_heads = cfg.H_kv;
  sub.d_ff = cfg.d_ff;
}

// Accumulated normal equations for min_U sum_g || sum_h A_gh U B_gh - T_g ||^2.
struct NormalEquations {
  Eigen::Index n = 0, m = 0;
  Eigen::MatrixXd sys;
  Eigen::VectorXd rhs;

  NormalEquations(Eigen::Index rows, Eigen::Index cols) : n(rows), m(cols) {
    sys = Eigen::MatrixXd::Zero(n * m, n * m);
    rhs = Eigen::VectorXd::Zero(n * m);
  }

  void add_group(const std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>>& pairs,
                 const Eigen::MatrixXd& target) {
    for (const auto& [ah, bh] : pairs) {
      Eigen::MatrixXd atb = ah.transpose() * target * bh.transpose();  // n x m
      rhs += atb.reshaped();
      for (const auto& [ak, bk] : pairs) {
        const Eigen::MatrixXd bb = bh * bk.transpose();                // m x m
        const Eigen::MatrixXd aa = ah.transpose() * ak;                // n x n
        for (Eigen::Index j1 = 0; j1 < m; ++j1)
          for (Eigen::Index j2 = 0; j2 < m; ++j2)
            if (bb(j1, j2) != 0.0)
              sys.block(j1 * n, j2 * n, n, n).noalias() += bb(j1, j2) * aa;
      }
    }
  }

  Eigen::MatrixXd solve(bool* flagged) const {
    Eigen::MatrixXd reg = sys;
    const double tr = std::max(reg.trace() / double(n * m), 1e-30);
    reg.diagonal().array() += 1e-8 * tr;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(reg);
    Eigen::VectorXd sol = ldlt.solve(rhs);
    if (flagged && (ldlt.info() != Eigen::Success || !sol.allFinite())) *flagged = true;
    if (!sol.allFinite()) {
      reg.diagonal().array() += 1e-4 * tr;
      sol = reg.ldlt().solve(rhs);
    }
    return Eigen::Map<const Eigen::MatrixXd>(sol.data(), n, m);
  }
};

// one-sided: min_U sum_s || A_s U - T_s ||^2
Eigen::MatrixXd solve_one_sided(const std::vector<Eigen::MatrixXd>& as,
                                const std::vector<Eigen::MatrixXd>& ts, bool* flagged) {
  const Eigen::Index p = as.front().cols();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(p, ts.front().cols());
  for (size_t s = 0; s < as.size(); ++s) {
    gram.noalias() += as[s].transpose() * as[s];
    rhs.noalias() += as[s].transpose() * ts[s];
  }
  const double tr = std::max(gram.trace() / double(p), 1e-30);
  gram.diagonal().array() += 1e-8 * tr;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  Eigen::MatrixXd sol = ldlt.solve(rhs);
  if (flagged && (ldlt.info() != Eigen::Success || !sol.allFinite())) *flagged = true;
  return sol;
}

// column selector: U (d x kv_dim) -> head block g. sel is kv_dim x head_dim
Eigen::MatrixXd kv_selector(size_t kv_dim, size_t head_dim, size_t g) {
  Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(Eigen::Index(kv_dim), Eigen::Index(head_dim));
  for (size_t i = 0; i < head_dim; ++i)
    sel(Eigen::Index(g * head_dim + i), Eigen::Index(i)) = 1.0;
  return sel;
}

}  // namespace

Submodule make_qk_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                            const CalibSet& calib, size_t block) {
  Submodule sub;
  sub.kind = SubmoduleKind::qk;
  sub.block = block;
  sub.members = {member_id(block, "q"), member_id(block, "k")};
  fill_geometry(sub, fp_model.config);
  const size_t dk = sub.head_dim, group = sub.heads / sub.kv_heads;
  const Eigen::MatrixXd wq = to_eigen_d(fp_model.blocks[block].wq);
  const Eigen::MatrixXd wk = to_eigen_d(fp_model.blocks[block].wk);
  for (const auto& seq : calib.sequences) {
    ForwardTaps fp_taps = forward_with_taps(fp_model, seq);
    ForwardTaps q_taps = forward_with_taps(quant_model, seq);
    const Eigen::MatrixXd x_fp = to_eigen_d(fp_taps.inputs.at(member_id(block, "q")));
    sub.inputs.push_back(to_eigen_d(q_taps.inputs.at(member_id(block, "q"))));
    const Eigen::MatrixXd qh = x_fp * wq;
    const Eigen::MatrixXd kh = x_fp * wk;
    std::vector<Eigen::MatrixXd> heads;
    for (size_t h = 0; h < sub.heads; ++h) {
      const size_t g = h / group;
      heads.push_back(qh.middleCols(Eigen::Index(h * dk), Eigen::Index(dk)) *
                      kh.middleCols(Eigen::Index(g * dk), Eigen::Index(dk)).transpose() /
                      std::sqrt(double(dk)));
    }
    sub.score_targets.push_back(std::move(heads));
  }
  return sub;
}

Submodule make_vo_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                            const CalibSet& calib, size_t block) {
  Submodule sub;
  sub.kind = SubmoduleKind::vo;
  sub.block = block;
  sub.members = {member_id(block, "v"), member_id(block, "o")};
  fill_geometry(sub, fp_model.config);
  const Eigen::MatrixXd wq = to_eigen_d(fp_model.blocks[block].wq);
  const Eigen::MatrixXd wk = to_eigen_d(fp_model.blocks[block].wk);
  const Eigen::MatrixXd wo = to_eigen_d(fp_model.blocks[block].wo);
  for (const auto& seq : calib.sequences) {
    ForwardTaps fp_taps = forward_with_taps(fp_model, seq);
    ForwardTaps q_taps = forward_with_taps(quant_model, seq);
    const Eigen::MatrixXd x_fp = to_eigen_d(fp_taps.inputs.at(member_id(block, "q")));
    sub.inputs.push_back(to_eigen_d(q_taps.inputs.at(member_id(block, "q"))));
    sub.probs.push_back(causal_probs(fp_model.config, x_fp, wq, wk));
    // attention output before the residual add
    sub.targets.push_back(to_eigen_d(fp_taps.inputs.at(member_id(block, "o"))) * wo);
  }
  return sub;
}

Submodule make_gud_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                             const CalibSet& calib, size_t block) {
  Submodule sub;
  sub.kind = SubmoduleKind::gate_up_down;
  sub.block = block;
  sub.members = {member_id(block, "up"), member_id(block, "gate"), member_id(block, "down")};
  fill_geometry(sub, fp_model.config);
  const Eigen::MatrixXd wd = to_eigen_d(fp_model.blocks[block].wdown);
  for (const auto& seq : calib.sequences) {
    ForwardTaps fp_taps = forward_with_taps(fp_model, seq);
    ForwardTaps q_taps = forward_with_taps(quant_model, seq);
    sub.inputs.push_back(to_eigen_d(q_taps.inputs.at(member_id(block, "gate"))));
    // feed-forward output before the residual add
    sub.targets.push_back(to_eigen_d(fp_taps.inputs.at(member_id(block, "down"))) * wd);
  }
  return sub;
}

Submodule make_single_submodule(const std::string& member, const Matrix& x_hat,
                                const Matrix& target) {
  if (x_hat.rows != target.rows)
    throw invalid_input("make_single_submodule: row count mismatch");
  Submodule sub;
  sub.kind = SubmoduleKind::single;
  sub.members = {member};
  sub.inputs.push_back(to_eigen_d(x_hat));
  sub.targets.push_back(to_eigen_d(target));
  return sub;
}

namespace {

Eigen::MatrixXd weight_of(const std::map<std::string, Matrix>& weights, const std::string& id) {
  auto it = weights.find(id);
  if (it == weights.end()) throw invalid_input("lpcd: missing member weight " + id);
  return to_eigen_d(it->second);
}

double qk_objective(const Submodule& sub, const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk) {
  const size_t dk = sub.head_dim, group = sub.heads / sub.kv_heads;
  double j = 0.0;
  for (size_t s = 0; s < sub.inputs.size(); ++s) {
    const Eigen::MatrixXd q = sub.inputs[s] * wq;
    const Eigen::MatrixXd k = sub.inputs[s] * wk;
    for (size_t h = 0; h < sub.heads; ++h) {
      const size_t g = h / group;
      const Eigen::MatrixXd score =
          q.middleCols(Eigen::Index(h * dk), Eigen::Index(dk)) *
          k.middleCols(Eigen::Index(g * dk), Eigen::Index(dk)).transpose() /
          std::sqrt(double(dk));
      j += (score - sub.score_targets[s][h]).squaredNorm();
    }
  }
  return j;
}

Eigen::MatrixXd vo_concat(const Submodule& sub, size_t s, const Eigen::MatrixXd& wv) {
  const size_t dk = sub.head_dim, group = sub.heads / sub.kv_heads;
  const Eigen::MatrixXd v = sub.inputs[s] * wv;
  Eigen::MatrixXd concat(sub.inputs[s].rows(), Eigen::Index(sub.d));
  for (size_t h = 0; h < sub.heads; ++h) {
    const size_t g = h / group;
    concat.middleCols(Eigen::Index(h * dk), Eigen::Index(dk)) =
        sub.probs[s][h] * v.middleCols(Eigen::Index(g * dk), Eigen::Index(dk));
  }
  return concat;
}

double vo_objective(const Submodule& sub, const Eigen::MatrixXd& wv, const Eigen::MatrixXd& wo) {
  double j = 0.0;
  for (size_t s = 0; s < sub.inputs.size(); ++s)
    j += (vo_concat(sub, s, wv) * wo - sub.targets[s]).squaredNorm();
  return j;
}

double gud_objective_impl(const Submodule& sub, const Eigen::MatrixXd& wg,
                          const Eigen::MatrixXd& wu, const Eigen::MatrixXd& wd) {
  double j = 0.0;
  for (size_t s = 0; s < sub.inputs.size(); ++s) {
    Eigen::MatrixXd gate = sub.inputs[s] * wg;
    Eigen::MatrixXd up = sub.inputs[s] * wu;
    for (Eigen::Index i = 0; i < gate.size(); ++i)
      gate.reshaped()(i) = silu_d(gate.reshaped()(i)) * up.reshaped()(i);
    j += (gate * wd - sub.targets[s]).squaredNorm();
  }
  return j;
}

}  // namespace

double submodule_objective(const Submodule& sub, const std::map<std::string, Matrix>& weights) {
  switch (sub.kind) {
    case SubmoduleKind::qk:
      return qk_objective(sub, weight_of(weights, sub.members[0]),
                          weight_of(weights, sub.members[1]));
    case SubmoduleKind::vo:
      return vo_objective(sub, weight_of(weights, sub.members[0]),
                          weight_of(weights, sub.members[1]));
    case SubmoduleKind::gate_up_down:
      return gud_objective_impl(sub, weight_of(weights, sub.members[1]),
                                weight_of(weights, sub.members[0]),
                                weight_of(weights, sub.members[2]));
    case SubmoduleKind::single: {
      const Eigen::MatrixXd u = weight_of(weights, sub.members[0]);
      double j = 0.0;
      for (size_t s = 0; s < sub.inputs.size(); ++s)
        j += (sub.inputs[s] * u - sub.targets[s]).squaredNorm();
      return j;
    }
  }
  return 0.0;
}

double gate_objective(const std::vector<Eigen::MatrixXd>& xs, const Eigen::MatrixXd& gate,
                      const Eigen::MatrixXd& up, const Eigen::MatrixXd& down,
                      const std::vector<Eigen::MatrixXd>& targets) {
  double j = 0.0;
  for (size_t s = 0; s < xs.size(); ++s) {
    Eigen::MatrixXd z = xs[s] * gate;
    Eigen::MatrixXd b = xs[s] * up;
    for (Eigen::Index i = 0; i < z.size(); ++i)
      z.reshaped()(i) = silu_d(z.reshaped()(i)) * b.reshaped()(i);
    j += (z * down - targets[s]).squaredNorm();
  }
  return j;
}

Eigen::MatrixXd gate_gradient(const std::vector<Eigen::MatrixXd>& xs,
                              const Eigen::MatrixXd& gate, const Eigen::MatrixXd& up,
                              const Eigen::MatrixXd& down,
                              const std::vector<Eigen::MatrixXd>& targets) {
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(gate.rows(), gate.cols());
  for (size_t s = 0; s < xs.size(); ++s) {
    const Eigen::MatrixXd z = xs[s] * gate;
    const Eigen::MatrixXd b = xs[s] * up;
    Eigen::MatrixXd act = z;
    for (Eigen::Index i = 0; i < act.size(); ++i) act.reshaped()(i) = silu_d(act.reshaped()(i));
    const Eigen::MatrixXd err = act.cwiseProduct(b) * down - targets[s];
    Eigen::MatrixXd dz = (err * down.transpose()).cwiseProduct(b);
    for (Eigen::Index i = 0; i < dz.size(); ++i)
      dz.reshaped()(i) *= silu_grad(z.reshaped()(i));
    grad.noalias() += 2.0 * xs[s].transpose() * dz;
  }
  return grad;
}

namespace {

Eigen::MatrixXd relax_gate(const Submodule& sub, const std::map<std::string, Matrix>& weights) {
  const Eigen::MatrixXd wu = weight_of(weights, sub.members[0]);
  const Eigen::MatrixXd wd = weight_of(weights, sub.members[2]);
  Eigen::MatrixXd g = weight_of(weights, sub.members[1]);
  double j = gate_objective(sub.inputs, g, wu, wd, sub.targets);
  double lr = 1e-2;
  for (int step = 0; step < 200 && lr > 1e-12; ++step) {
    const Eigen::MatrixXd grad = gate_gradient(sub.inputs, g, wu, wd, sub.targets);
    const Eigen::MatrixXd trial = g - lr * grad;
    const double jt = gate_objective(sub.inputs, trial, wu, wd, sub.targets);
    if (jt < j) {
      g = trial;
      j = jt;
    } else {
      lr *= 0.5;
    }
  }
  return g;
}

}  // namespace

Matrix relax_member(const Submodule& sub, const std::string& member,
                    const std::map<std::string, Matrix>& weights) {
  const std::string role = role_of(member);
  bool flagged = false;
  Eigen::MatrixXd sol;

  if (sub.kind == SubmoduleKind::single) {
    sol = solve_one_sided(sub.inputs, sub.targets, &flagged);
  } else if (sub.kind == SubmoduleKind::qk) {
    const size_t dk = sub.head_dim, group = sub.heads / sub.kv_heads;
    const double inv = 1.0 / std::sqrt(double(dk));
    if (role == "q") {
      const Eigen::MatrixXd wk = weight_of(weights, sub.members[1]);
      NormalEquations ne(Eigen::Index(sub.d), Eigen::Index(sub.d));
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        const Eigen::MatrixXd kh = sub.inputs[s] * wk;
        for (size_t h = 0; h < sub.heads; ++h) {
          const size_t g = h / group;
          Eigen::MatrixXd sel = kv_selector(sub.d, dk, h);  // d x dk column selector
          Eigen::MatrixXd b =
              sel * kh.middleCols(Eigen::Index(g * dk), Eigen::Index(dk)).transpose() * inv;
          ne.add_group({{sub.inputs[s], b}}, sub.score_targets[s][h]);
        }
      }
      sol = ne.solve(&flagged);
    } else {
      const Eigen::MatrixXd wq = weight_of(weights, sub.members[0]);
      const size_t kv_dim = sub.kv_heads * dk;
      NormalEquations ne(Eigen::Index(sub.d), Eigen::Index(kv_dim));
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        const Eigen::MatrixXd qh = sub.inputs[s] * wq;
        for (size_t h = 0; h < sub.heads; ++h) {
          const size_t g = h / group;
          Eigen::MatrixXd b = kv_selector(kv_dim, dk, g) *
                              qh.middleCols(Eigen::Index(h * dk), Eigen::Index(dk)).transpose() *
                              inv;
          ne.add_group({{sub.inputs[s], b}},
                       Eigen::MatrixXd(sub.score_targets[s][h].transpose()));
        }
      }
      sol = ne.solve(&flagged);
    }
  } else if (sub.kind == SubmoduleKind::vo) {
    const size_t dk = sub.head_dim, group = sub.heads / sub.kv_heads;
    if (role == "v") {
      const Eigen::MatrixXd wo = weight_of(weights, sub.members[1]);
      const size_t kv_dim = sub.kv_heads * dk;
      NormalEquations ne(Eigen::Index(sub.d), Eigen::Index(kv_dim));
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> pairs;
        for (size_t h = 0; h < sub.heads; ++h) {
          const size_t g = h / group;
          pairs.emplace_back(sub.probs[s][h] * sub.inputs[s],
                             kv_selector(kv_dim, dk, g) *
                                 wo.middleRows(Eigen::Index(h * dk), Eigen::Index(dk)));
        }
        ne.add_group(pairs, sub.targets[s]);
      }
      sol = ne.solve(&flagged);
    } else {
      const Eigen::MatrixXd wv = weight_of(weights, sub.members[0]);
      std::vector<Eigen::MatrixXd> as, ts;
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        as.push_back(vo_concat(sub, s, wv));
        ts.push_back(sub.targets[s]);
      }
      sol = solve_one_sided(as, ts, &flagged);
    }
  } else {  // gate_up_down; members = {up, gate, down}
    if (role == "gate") {
      sol = relax_gate(sub, weights);
    } else if (role == "down") {
      const Eigen::MatrixXd wu = weight_of(weights, sub.members[0]);
      const Eigen::MatrixXd wg = weight_of(weights, sub.members[1]);
      std::vector<Eigen::MatrixXd> as, ts;
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        Eigen::MatrixXd act = sub.inputs[s] * wg;
        Eigen::MatrixXd up = sub.inputs[s] * wu;
        for (Eigen::Index i = 0; i < act.size(); ++i)
          act.reshaped()(i) = silu_d(act.reshaped()(i)) * up.reshaped()(i);
        as.push_back(std::move(act));
        ts.push_back(sub.targets[s]);
      }
      sol = solve_one_sided(as, ts, &flagged);
    } else {  // up: per-token two-sided terms with B_t = diag(silu_t) * Wd
      const Eigen::MatrixXd wg = weight_of(weights, sub.members[1]);
      const Eigen::MatrixXd wd = weight_of(weights, sub.members[2]);
      NormalEquations ne(Eigen::Index(sub.d), Eigen::Index(sub.d_ff));
      for (size_t s = 0; s < sub.inputs.size(); ++s) {
        const Eigen::MatrixXd act = sub.inputs[s] * wg;
        for (Eigen::Index t = 0; t < sub.inputs[s].rows(); ++t) {
          Eigen::VectorXd gate_row = act.row(t);
          for (Eigen::Index i = 0; i < gate_row.size(); ++i) gate_row(i) = silu_d(gate_row(i));
          ne.add_group({{Eigen::MatrixXd(sub.inputs[s].row(t)),
                         Eigen::MatrixXd(gate_row.asDiagonal() * wd)}},
                       Eigen::MatrixXd(sub.targets[s].row(t)));
        }
      }
      sol = ne.solve(&flagged);
    }
  }
  return from_eigen(sol);
}

LpcdReport lpcd_refine(const Submodule& sub, std::map<std::string, QuantizedMatrix>& members,
                       const ProjectFn& project, int iters) {
  if (iters < 1) throw invalid_input("lpcd_refine: iters must be >= 1");
  for (const auto& id : sub.members)
    if (!members.count(id))
      throw invalid_input("lpcd_refine: member " + id + " is not initialized");

  std::map<std::string, Matrix> weights;
  for (const auto& [id, q] : members) weights[id] = dequantize(q);

  LpcdReport report;
  double j = submodule_objective(sub, weights);
  report.objective_trace.push_back(j);
  report.step_labels.push_back("init");

  for (int t = 0; t < iters; ++t) {
    for (const auto& id : sub.members) {
      Matrix relaxed = relax_member(sub, id, weights);
      std::map<std::string, Matrix> trial = weights;
      trial[id] = relaxed;
      double j_relaxed = submodule_objective(sub, trial);
      if (j_relaxed > j) {
        // exact argmin should never regress; fall back to the current value
        report.regularized_fallback = true;
        relaxed = weights[id];
        j_relaxed = j;
      }
      j = j_relaxed;
      report.objective_trace.push_back(j);
      report.step_labels.push_back("relax:" + id);

      QuantizedMatrix q = project(id, relaxed);
      members[id] = q;
      weights[id] = dequantize(q);
      j = submodule_objective(sub, weights);
      report.objective_trace.push_back(j);
      report.step_labels.push_back("project:" + id);
    }
  }
  return report;
}

}  // namespace ocw
