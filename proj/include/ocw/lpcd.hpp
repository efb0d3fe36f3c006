#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ocw/calib.hpp"
#include "ocw/model.hpp"
#include "ocw/quant.hpp"

namespace ocw {

enum class SubmoduleKind { qk, vo, gate_up_down, single };

// Coupled-layer unit with the cached inputs and full-precision targets its
// reconstruction objective needs. Members are listed in relax order:
// (q, k), (v, o), (up, gate, down).
struct Submodule {
  SubmoduleKind kind = SubmoduleKind::single;
  size_t block = 0;
  std::vector<std::string> members;

  // model geometry
  size_t d = 0, head_dim = 0, heads = 0, kv_heads = 0, d_ff = 0;

  // per-sequence quantized-model inputs to the submodule
  std::vector<Eigen::MatrixXd> inputs;
  // qk: per-sequence, per-query-head scaled score targets (T x T)
  std::vector<std::vector<Eigen::MatrixXd>> score_targets;
  // vo: per-sequence, per-query-head full-precision attention probabilities
  std::vector<std::vector<Eigen::MatrixXd>> probs;
  // vo / gate_up_down / single: per-sequence output targets
  std::vector<Eigen::MatrixXd> targets;
};

// Builders cache everything from a full-precision model, the current
// (partially quantized) model, and the calibration set.
Submodule make_qk_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                            const CalibSet& calib, size_t block);
Submodule make_vo_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                            const CalibSet& calib, size_t block);
Submodule make_gud_submodule(const ToyModel& fp_model, const ToyModel& quant_model,
                             const CalibSet& calib, size_t block);
// Single linear member with J = ||Xhat U - target||_F^2.
Submodule make_single_submodule(const std::string& member_id, const Matrix& x_hat,
                                const Matrix& target);

// Submodule objective J evaluated at the given member weights.
double submodule_objective(const Submodule& sub,
                           const std::map<std::string, Matrix>& weights);

// Exact continuous minimizer of J over one member with the others fixed
// (closed-form regularized least squares for the quadratic members; the
// gate member runs damped analytic-gradient descent).
Matrix relax_member(const Submodule& sub, const std::string& member,
                    const std::map<std::string, Matrix>& weights);

// Gate-member objective and its analytic gradient (manual chain rule
// through SiLU); exposed for finite-difference verification.
double gate_objective(const std::vector<Eigen::MatrixXd>& xs, const Eigen::MatrixXd& gate,
                      const Eigen::MatrixXd& up, const Eigen::MatrixXd& down,
                      const std::vector<Eigen::MatrixXd>& targets);
Eigen::MatrixXd gate_gradient(const std::vector<Eigen::MatrixXd>& xs,
                              const Eigen::MatrixXd& gate, const Eigen::MatrixXd& up,
                              const Eigen::MatrixXd& down,
                              const std::vector<Eigen::MatrixXd>& targets);

using ProjectFn =
    std::function<QuantizedMatrix(const std::string& member, const Matrix& relaxed)>;

struct LpcdReport {
  std::vector<double> objective_trace;  // J after init and after each relax / project
  std::vector<std::string> step_labels;
  bool regularized_fallback = false;
};

// Cyclic relax-then-project block coordinate descent. `members` holds the
// already-quantized initialization and receives the refined members.
LpcdReport lpcd_refine(const Submodule& sub, std::map<std::string, QuantizedMatrix>& members,
                       const ProjectFn& project, int iters);

}  // namespace ocw
