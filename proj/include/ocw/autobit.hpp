#pragma once

#include <map>
#include <string>
#include <vector>

#include "ocw/model.hpp"
#include "ocw/quant.hpp"

namespace ocw {

enum class ErrorMode { naive, act_aware };

ErrorMode error_mode_from_name(const std::string& name);

// Predicted quantization error for an RTN proxy under cfg.
//   naive:     ||dW||_F^2
//   act_aware: 1/2 * sum_ij in_diag[i] * out_diag[j] * dW[i][j]^2
// (the diagonal Kronecker-factored curvature; identity diagonals reduce it
// to half the naive value). Missing diagonals default to all-ones.
double estimate_error(const Matrix& w, const QuantConfig& cfg, ErrorMode mode,
                      const std::vector<double>* in_diag = nullptr,
                      const std::vector<double>* out_diag = nullptr);

struct ConfigCandidate {
  QuantConfig config;
  size_t cost_bytes = 0;
  double err = 0.0;

  std::string label() const;  // "4b/g128", "4b/ch"
};

struct ModuleCandidates {
  std::string layer_id;
  size_t params = 0;
  std::vector<ConfigCandidate> candidates;
};

// Default candidate grid: bits {2..8} x {group-128, per-channel}, symmetric.
std::vector<ConfigCandidate> candidate_grid(const Matrix& w, ErrorMode mode,
                                            const std::vector<double>* in_diag = nullptr);

enum class PlanSolver { exhaustive, dp, branch_bound };

PlanSolver plan_solver_from_name(const std::string& name);

struct Plan {
  std::map<std::string, ConfigCandidate> assignment;
  size_t total_cost = 0;
  double total_err = 0.0;
  double achieved_bpw = 0.0;
};

// Minimizes total predicted error subject to sum(cost) <= budget_bytes.
// All three solvers are exact; dp runs over byte costs, branch_bound uses
// suffix bounds. Infeasible budgets raise invalid_input naming the minimal
// achievable cost.
Plan plan_assignment(const std::vector<ModuleCandidates>& modules, size_t budget_bytes,
                     PlanSolver solver = PlanSolver::dp);

// Budget in bytes for an average bits-per-weight target over the graph's
// quantizable parameters. Targets below 2.0 bpw are rejected.
size_t budget_from_bpw(const LayerGraph& graph, double target_bpw);

// Uniform configuration equivalent to a bpw target when one exists
// (b + 0.16 <-> b-bit/group-128, integral b <-> b-bit/per-channel); empty
// string otherwise.
std::string uniform_equivalent(double target_bpw);

}  // namespace ocw
