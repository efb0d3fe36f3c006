#include "ocw/autobit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ocw {

ErrorMode error_mode_from_name(const std::string& name) {
  if (name == "naive") return ErrorMode::naive;
  if (name == "act" || name == "act_aware") return ErrorMode::act_aware;
  throw invalid_input("unknown error mode: " + name);
}

double estimate_error(const Matrix& w, const QuantConfig& cfg, ErrorMode mode,
                      const std::vector<double>* in_diag, const std::vector<double>* out_diag) {
  if (in_diag && in_diag->size() != w.rows)
    throw invalid_input("estimate_error: input diagonal length mismatch");
  if (out_diag && out_diag->size() != w.cols)
    throw invalid_input("estimate_error: output diagonal length mismatch");
  const Matrix w_hat = dequantize(quantize_matrix(w, cfg));
  double err = 0.0;
  for (size_t i = 0; i < w.rows; ++i)
    for (size_t j = 0; j < w.cols; ++j) {
      const double d = double(w_hat.at(i, j)) - double(w.at(i, j));
      if (mode == ErrorMode::naive) {
        err += d * d;
      } else {
        const double ai = in_diag ? (*in_diag)[i] : 1.0;
        const double bj = out_diag ? (*out_diag)[j] : 1.0;
        err += 0.5 * ai * bj * d * d;
      }
    }
  return err;
}

std::string ConfigCandidate::label() const {
  const std::string bits = std::to_string(config.bits) + "b";
  if (config.granularity == Granularity::per_channel) return bits + "/ch";
  if (config.granularity == Granularity::per_tensor) return bits + "/tensor";
  return bits + "/g" + std::to_string(config.group_size);
}

std::vector<ConfigCandidate> candidate_grid(const Matrix& w, ErrorMode mode,
                                            const std::vector<double>* in_diag) {
  std::vector<ConfigCandidate> out;
  for (int bits : {2, 3, 4, 5, 6, 7, 8}) {
    for (bool grouped : {true, false}) {
      ConfigCandidate c;
      c.config.bits = bits;
      c.config.scheme = Scheme::symmetric;
      c.config.granularity = grouped ? Granularity::per_group : Granularity::per_channel;
      c.config.group_size = 128;
      c.cost_bytes = uniform_storage_bytes(c.config, w.rows, w.cols);
      c.err = estimate_error(w, c.config, mode, in_diag, nullptr);
      out.push_back(c);
    }
  }
  return out;
}

PlanSolver plan_solver_from_name(const std::string& name) {
  if (name == "exhaustive") return PlanSolver::exhaustive;
  if (name == "dp") return PlanSolver::dp;
  if (name == "branch_bound" || name == "bb") return PlanSolver::branch_bound;
  throw invalid_input("unknown plan solver: " + name);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void validate_modules(const std::vector<ModuleCandidates>& modules, size_t budget) {
  if (modules.empty()) throw invalid_input("plan: no modules");
  size_t min_cost = 0;
  for (const auto& m : modules) {
    if (m.candidates.empty()) throw invalid_input("plan: module " + m.layer_id + " has no candidates");
    size_t lo = std::numeric_limits<size_t>::max();
    for (const auto& c : m.candidates) lo = std::min(lo, c.cost_bytes);
    min_cost += lo;
  }
  if (min_cost > budget)
    throw invalid_input("plan: budget of " + std::to_string(budget) +
                        " bytes is infeasible; minimal achievable cost is " +
                        std::to_string(min_cost) + " bytes");
}

Plan finish_plan(const std::vector<ModuleCandidates>& modules, const std::vector<size_t>& pick) {
  Plan p;
  size_t params = 0;
  for (size_t i = 0; i < modules.size(); ++i) {
    const ConfigCandidate& c = modules[i].candidates[pick[i]];
    p.assignment[modules[i].layer_id] = c;
    p.total_cost += c.cost_bytes;
    p.total_err += c.err;
    params += modules[i].params;
  }
  p.achieved_bpw = params ? 8.0 * double(p.total_cost) / double(params) : 0.0;
  return p;
}

Plan solve_exhaustive(const std::vector<ModuleCandidates>& modules, size_t budget) {
  double combos = 1.0;
  for (const auto& m : modules) combos *= double(m.candidates.size());
  if (combos > 2e6)
    throw invalid_input("plan: exhaustive solver limited to ~2e6 combinations; use dp");

  std::vector<size_t> pick(modules.size(), 0), best_pick;
  double best_err = kInf;
  std::function<void(size_t, size_t, double)> rec = [&](size_t idx, size_t cost, double err) {
    if (cost > budget) return;
    if (idx == modules.size()) {
      if (err < best_err) {
        best_err = err;
        best_pick = pick;
      }
      return;
    }
    for (size_t k = 0; k < modules[idx].candidates.size(); ++k) {
      pick[idx] = k;
      rec(idx + 1, cost + modules[idx].candidates[k].cost_bytes,
          err + modules[idx].candidates[k].err);
    }
  };
  rec(0, 0, 0.0);
  return finish_plan(modules, best_pick);
}

Plan solve_dp(const std::vector<ModuleCandidates>& modules, size_t budget) {
  // cap the cost axis: spending more than the sum of max costs never helps
  size_t cap = 0;
  for (const auto& m : modules) {
    size_t hi = 0;
    for (const auto& c : m.candidates) hi = std::max(hi, c.cost_bytes);
    cap += hi;
  }
  const size_t w = std::min(budget, cap);

  // dp[c] = min error with total cost <= c
  std::vector<double> dp(w + 1, kInf);
  std::vector<std::vector<uint16_t>> choice(modules.size(), std::vector<uint16_t>(w + 1, 0xffff));
  std::vector<double> prev(w + 1, 0.0);

  for (size_t i = 0; i < modules.size(); ++i) {
    std::fill(dp.begin(), dp.end(), kInf);
    for (size_t k = 0; k < modules[i].candidates.size(); ++k) {
      const size_t cost = modules[i].candidates[k].cost_bytes;
      const double err = modules[i].candidates[k].err;
      if (cost > w) continue;
      for (size_t c = cost; c <= w; ++c) {
        if (prev[c - cost] == kInf && i > 0) continue;
        const double cand = (i == 0 ? 0.0 : prev[c - cost]) + err;
        if (cand < dp[c]) {
          dp[c] = cand;
          choice[i][c] = uint16_t(k);
        }
      }
    }
    // prefix-min so dp[c] means "cost at most c"
    for (size_t c = 1; c <= w; ++c)
      if (dp[c - 1] < dp[c]) {
        dp[c] = dp[c - 1];
        choice[i][c] = choice[i][c - 1];
      }
    prev = dp;
  }

  // reconstruct
  std::vector<size_t> pick(modules.size());
  size_t c = w;
  for (size_t i = modules.size(); i-- > 0;) {
    // walk down to the cost where the choice was recorded
    while (choice[i][c] == 0xffff && c > 0) --c;
    const size_t k = choice[i][c];
    pick[i] = k;
    c -= modules[i].candidates[k].cost_bytes;
  }
  return finish_plan(modules, pick);
}

Plan solve_branch_bound(const std::vector<ModuleCandidates>& modules, size_t budget) {
  const size_t n = modules.size();
  // candidate order by increasing error within each module
  std::vector<std::vector<size_t>> order(n);
  for (size_t i = 0; i < n; ++i) {
    order[i].resize(modules[i].candidates.size());
    std::iota(order[i].begin(), order[i].end(), size_t(0));
    std::stable_sort(order[i].begin(), order[i].end(), [&](size_t a, size_t b) {
      return modules[i].candidates[a].err < modules[i].candidates[b].err;
    });
  }
  // suffix bounds
  std::vector<size_t> suffix_min_cost(n + 1, 0);
  std::vector<double> suffix_min_err(n + 1, 0.0);
  for (size_t i = n; i-- > 0;) {
    size_t lo_cost = std::numeric_limits<size_t>::max();
    double lo_err = kInf;
    for (const auto& c : modules[i].candidates) {
      lo_cost = std::min(lo_cost, c.cost_bytes);
      lo_err = std::min(lo_err, c.err);
    }
    suffix_min_cost[i] = suffix_min_cost[i + 1] + lo_cost;
    suffix_min_err[i] = suffix_min_err[i + 1] + lo_err;
  }

  std::vector<size_t> pick(n, 0), best_pick;
  double best_err = kInf;
  std::function<void(size_t, size_t, double)> rec = [&](size_t idx, size_t cost, double err) {
    if (cost + suffix_min_cost[idx] > budget) return;
    if (err + suffix_min_err[idx] >= best_err) return;
    if (idx == n) {
      best_err = err;
      best_pick = pick;
      return;
    }
    for (size_t k : order[idx]) {
      pick[idx] = k;
      rec(idx + 1, cost + modules[idx].candidates[k].cost_bytes,
          err + modules[idx].candidates[k].err);
    }
  };
  rec(0, 0, 0.0);
  return finish_plan(modules, best_pick);
}

}  // namespace

Plan plan_assignment(const std::vector<ModuleCandidates>& modules, size_t budget_bytes,
                     PlanSolver solver) {
  validate_modules(modules, budget_bytes);
  Plan p;
  switch (solver) {
    case PlanSolver::exhaustive: p = solve_exhaustive(modules, budget_bytes); break;
    case PlanSolver::dp: p = solve_dp(modules, budget_bytes); break;
    case PlanSolver::branch_bound: p = solve_branch_bound(modules, budget_bytes); break;
  }
  if (p.total_cost > budget_bytes) throw numeric_error("plan: solver violated the budget");
  return p;
}

size_t budget_from_bpw(const LayerGraph& graph, double target_bpw) {
  if (!(target_bpw > 0.0)) throw invalid_input("budget_from_bpw: target must be positive");
  if (target_bpw < 2.0)
    throw invalid_input("budget_from_bpw: mixed-precision planning below 2.0 bits per weight "
                        "is not supported; use a binary-factor format instead");
  double budget = 0.0;
  for (const auto& l : graph.layers) budget += double(l.rows * l.cols) * target_bpw / 8.0;
  return size_t(std::llround(budget));
}

std::string uniform_equivalent(double target_bpw) {
  for (int b = 2; b <= 8; ++b) {
    if (std::fabs(target_bpw - (double(b) + 0.16)) < 5e-3)
      return std::to_string(b) + "b/g128";
    if (std::fabs(target_bpw - double(b)) < 5e-3) return std::to_string(b) + "b/ch";
  }
  return "";
}

}  // namespace ocw
