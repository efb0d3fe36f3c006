#include "ocw/jointq.hpp"

#include <algorithm>
#include <cmath>

#include "ocw/eigen_map.hpp"
#include "ocw/fp16.hpp"

namespace ocw {

namespace {

struct GroupCells {
  // rows touched by the group and, per row, the column span [j0, j1)
  std::vector<size_t> rows;
  size_t j0 = 0, j1 = 0;
};

GroupCells group_cells(const QuantizedMatrix& q, size_t group) {
  GroupCells c;
  switch (q.config.granularity) {
    case Granularity::per_tensor:
      c.rows.resize(q.rows);
      for (size_t i = 0; i < q.rows; ++i) c.rows[i] = i;
      c.j0 = 0;
      c.j1 = q.cols;
      break;
    case Granularity::per_channel:
      c.rows = {group};
      c.j0 = 0;
      c.j1 = q.cols;
      break;
    case Granularity::per_group: {
      const size_t gpr = quant_groups_per_row(q.config, q.cols);
      c.rows = {group / gpr};
      c.j0 = (group % gpr) * q.config.group_size;
      c.j1 = std::min(q.cols, c.j0 + q.config.group_size);
      break;
    }
  }
  return c;
}

void validate_input(const QuantizedMatrix& q, const Matrix& w, const Matrix& x) {
  q.config.validate();
  if (q.rows != w.rows || q.cols != w.cols)
    throw invalid_input("jointq: quantized shape does not match W");
  if (x.cols != w.rows) throw invalid_input("jointq: X cols must equal W rows");
  if (q.codes.size() != q.rows * q.cols || q.grids.size() != q.group_count())
    throw invalid_input("jointq: malformed quantized matrix (expect the uniform GPTQ format)");
  for (size_t i = 0; i < q.rows; ++i)
    for (size_t j = 0; j < q.cols; ++j) {
      const QuantGrid& g = q.grids[q.group_index(i, j)];
      const int code = q.codes[i * q.cols + j];
      if (code < g.qmin || code > g.qmax)
        throw invalid_input("jointq: code outside the codebook range");
    }
}

// Local search state for the regularized activation-aware objective
// expressed through H_eff = X^T X + n*lambda*I.
struct Search {
  const Matrix& w;
  QuantizedMatrix q;
  Eigen::MatrixXd h;  // H_eff
  Eigen::MatrixXd e;  // deq(q) - w
  Eigen::MatrixXd g;  // h * e
  double obj = 0.0;

  Search(const QuantizedMatrix& q0, const Matrix& w_in, const Matrix& x, double lambda)
      : w(w_in), q(q0) {
    const Eigen::MatrixXd xd = to_eigen_d(x);
    h = xd.transpose() * xd;
    h.diagonal().array() += double(x.rows) * lambda;
    e = to_eigen_d(dequantize(q)) - to_eigen_d(w);
    g = h * e;
    obj = (e.array() * g.array()).sum();
  }

  // Optimal scale for `group` given codes `c(i, j)` and zero-point z.
  // E_j(s) = F_j + s * C_j with F the residual with the group's dequantized
  // contribution removed; the minimizer is -sum_j C_j^T H F_j / sum_j C_j^T H C_j.
  template <typename CodeFn>
  double optimal_scale(size_t group, const CodeFn& code_at, int z) const {
    const GroupCells cells = group_cells(q, group);
    double num = 0.0, den = 0.0;
    for (size_t j = cells.j0; j < cells.j1; ++j) {
      for (size_t a = 0; a < cells.rows.size(); ++a) {
        const size_t i = cells.rows[a];
        const double c = double(code_at(i, j) - z);
        if (c == 0.0) continue;
        // (H F_j)_i = G_ij - sum_k in group H_ik * what_kj
        double hf = g(Eigen::Index(i), Eigen::Index(j));
        for (size_t k : cells.rows) {
          const double what = e(Eigen::Index(k), Eigen::Index(j)) + double(w.at(k, j));
          hf -= h(Eigen::Index(i), Eigen::Index(k)) * what;
        }
        num += c * hf;
        for (size_t k : cells.rows) {
          const double ck = double(code_at(k, j) - z);
          den += c * h(Eigen::Index(i), Eigen::Index(k)) * ck;
        }
      }
    }
    // den accumulated c_i H_ik c_k once per (i,k) pair via the double loop
    if (den <= 0.0) return 0.0;
    return -num / den;
  }

  // Objective change if the group's cells take dequantized values
  // s*(code - z) with the given code function.
  template <typename CodeFn>
  double delta_for(size_t group, const CodeFn& code_at, float s, int z,
                   std::vector<std::pair<size_t, double>>& scratch) const {
    const GroupCells cells = group_cells(q, group);
    double delta = 0.0;
    for (size_t j = cells.j0; j < cells.j1; ++j) {
      scratch.clear();
      for (size_t i : cells.rows) {
        const double fresh = double(s) * double(code_at(i, j) - z) - double(w.at(i, j));
        const double d = fresh - e(Eigen::Index(i), Eigen::Index(j));
        if (d != 0.0) scratch.emplace_back(i, d);
      }
      for (auto [i, d] : scratch) {
        delta += 2.0 * d * g(Eigen::Index(i), Eigen::Index(j));
        for (auto [k, dk] : scratch)
          delta += d * h(Eigen::Index(i), Eigen::Index(k)) * dk;
      }
    }
    return delta;
  }

  template <typename CodeFn>
  void apply(size_t group, const CodeFn& code_at, float s, int z) {
    const GroupCells cells = group_cells(q, group);
    for (size_t j = cells.j0; j < cells.j1; ++j) {
      for (size_t i : cells.rows) {
        const double fresh = double(s) * double(code_at(i, j) - z) - double(w.at(i, j));
        const double d = fresh - e(Eigen::Index(i), Eigen::Index(j));
        if (d == 0.0) continue;
        e(Eigen::Index(i), Eigen::Index(j)) = fresh;
        g.col(Eigen::Index(j)).noalias() += h.col(Eigen::Index(i)) * d;
      }
    }
    q.grids[group].scale = s;
    q.grids[group].zero_point = z;
  }
};

}  // namespace

double jointq_objective(const QuantizedMatrix& q, const Matrix& w, const Matrix& x,
                        double lambda) {
  if (lambda < 0.0) throw invalid_input("jointq_objective: lambda must be >= 0");
  const Matrix what = dequantize(q);
  const Eigen::MatrixXd diff = to_eigen_d(what) - to_eigen_d(w);
  const Eigen::MatrixXd xd = to_eigen_d(x);
  return (xd * diff).squaredNorm() + double(x.rows) * lambda * diff.squaredNorm();
}

double jointq_optimal_group_scale(const QuantizedMatrix& q, const Matrix& w, const Matrix& x,
                                  double lambda, size_t group) {
  validate_input(q, w, x);
  Search s(q, w, x, lambda);
  auto code_at = [&](size_t i, size_t j) { return int(q.codes[i * q.cols + j]); };
  return s.optimal_scale(group, code_at, q.grids[group].zero_point);
}

JointqResult jointq_refine(const QuantizedMatrix& q0, const Matrix& w, const Matrix& x,
                           const JointqOptions& opts) {
  validate_input(q0, w, x);
  if (opts.lambda < 0.0) throw invalid_input("jointq_refine: lambda must be >= 0");
  if (opts.move_radius < 1) throw invalid_input("jointq_refine: move_radius must be >= 1");

  Search s(q0, w, x, opts.lambda);
  JointqResult res;
  res.objective_trace.push_back(s.obj);

  std::vector<std::pair<size_t, double>> scratch;
  const double tol = 1e-10;

  // deltas in the order -1, +1, -2, +2, ...
  std::vector<int> deltas;
  for (int r = 1; r <= opts.move_radius; ++r) {
    deltas.push_back(-r);
    deltas.push_back(+r);
  }

  auto try_move = [&](size_t group, auto&& code_at, int z) -> bool {
    const double raw = s.optimal_scale(group, code_at, z);
    float s_new = fp16_round(float(raw));
    if (!(s_new > 0.0f)) {
      if (raw > 0.0) s_new = kFp16MinPositive;
      else return false;
    }
    const double delta = s.delta_for(group, code_at, s_new, z, scratch);
    if (delta >= -tol * (1.0 + std::fabs(s.obj))) return false;
    s.apply(group, code_at, s_new, z);
    s.obj += delta;
    res.objective_trace.push_back(s.obj);
    ++res.accepted_moves;
    return true;
  };

  for (int pass = 0; pass < opts.max_passes; ++pass) {
    size_t accepted_in_pass = 0;
    // pure scale refits (code delta 0) so a poor initial calibration cannot
    // pin the search
    {
      auto code_at = [&](size_t ii, size_t jj) { return int(s.q.codes[ii * s.q.cols + jj]); };
      for (size_t group = 0; group < s.q.grids.size(); ++group)
        if (try_move(group, code_at, s.q.grids[group].zero_point)) ++accepted_in_pass;
    }
    // code moves, row-major
    for (size_t i = 0; i < s.q.rows; ++i) {
      for (size_t j = 0; j < s.q.cols; ++j) {
        const size_t group = s.q.group_index(i, j);
        const QuantGrid& grid = s.q.grids[group];
        for (int d : deltas) {
          const int c_new = int(s.q.codes[i * s.q.cols + j]) + d;
          if (c_new < grid.qmin || c_new > grid.qmax) continue;
          auto code_at = [&](size_t ii, size_t jj) {
            if (ii == i && jj == j) return c_new;
            return int(s.q.codes[ii * s.q.cols + jj]);
          };
          if (try_move(group, code_at, grid.zero_point)) {
            s.q.codes[i * s.q.cols + j] = int16_t(c_new);
            ++accepted_in_pass;
            break;
          }
        }
      }
    }
    // zero-point moves (asymmetric only; symmetric keeps z = 0)
    if (s.q.config.scheme == Scheme::asymmetric) {
      auto code_at = [&](size_t ii, size_t jj) { return int(s.q.codes[ii * s.q.cols + jj]); };
      for (size_t group = 0; group < s.q.grids.size(); ++group) {
        const QuantGrid& grid = s.q.grids[group];
        for (int dz : {-1, +1}) {
          const int z_new = grid.zero_point + dz;
          if (z_new < grid.qmin || z_new > grid.qmax) continue;
          if (try_move(group, code_at, z_new)) {
            ++accepted_in_pass;
            break;
          }
        }
      }
    }
    res.passes = pass + 1;
    if (accepted_in_pass == 0) break;
  }

  res.refined = std::move(s.q);
  return res;
}

}  // namespace ocw
