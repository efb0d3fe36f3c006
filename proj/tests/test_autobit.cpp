#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "ocw/autobit.hpp"
#include "ocw/eigen_map.hpp"
#include "ocw/rng.hpp"

using namespace ocw;

namespace {

ModuleCandidates synthetic_module(const std::string& id, std::vector<size_t> costs,
                                  std::vector<double> errs) {
  ModuleCandidates m;
  m.layer_id = id;
  m.params = 1;
  for (size_t i = 0; i < costs.size(); ++i) {
    ConfigCandidate c;
    c.cost_bytes = costs[i];
    c.err = errs[i];
    c.config.bits = int(i) + 2;
    m.candidates.push_back(c);
  }
  return m;
}

std::vector<ModuleCandidates> random_instance(uint64_t seed, size_t modules, size_t cands) {
  Rng rng(seed);
  std::vector<ModuleCandidates> out;
  for (size_t i = 0; i < modules; ++i) {
    std::vector<size_t> costs;
    std::vector<double> errs;
    for (size_t k = 0; k < cands; ++k) {
      costs.push_back(1 + rng.below(20));
      errs.push_back(rng.uniform() * 10.0);
    }
    out.push_back(synthetic_module("m" + std::to_string(i), costs, errs));
  }
  return out;
}

}  // namespace

TEST_CASE("predicted error modes") {
  Matrix w = random_gaussian(4, 4, 1);
  QuantConfig cfg{3, Scheme::symmetric, Granularity::per_channel, 0};

  SUBCASE("identity diagonals reduce to half the naive value") {
    const double naive = estimate_error(w, cfg, ErrorMode::naive);
    const double aware = estimate_error(w, cfg, ErrorMode::act_aware);
    CHECK(aware == doctest::Approx(0.5 * naive).epsilon(1e-9));
  }
  SUBCASE("exactly representable weights have zero error") {
    Matrix grid(2, 3);
    grid.data = {1.0f, -2.0f, 3.0f, 0.0f, 2.0f, -3.0f};
    CHECK(estimate_error(grid, cfg, ErrorMode::naive) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("matches the dense trace formula with diagonal curvature") {
    std::vector<double> a{4.0, 1.0, 0.5, 2.0};
    std::vector<double> b{1.0, 3.0, 0.1, 1.5};
    const double err = estimate_error(w, cfg, ErrorMode::act_aware, &a, &b);

    Matrix w_hat = dequantize(quantize_matrix(w, cfg));
    Eigen::MatrixXd delta = to_eigen_d(w_hat) - to_eigen_d(w);
    Eigen::MatrixXd ad = Eigen::Vector4d(a[0], a[1], a[2], a[3]).asDiagonal();
    Eigen::MatrixXd bd = Eigen::Vector4d(b[0], b[1], b[2], b[3]).asDiagonal();
    const double dense = 0.5 * (bd * delta.transpose() * ad * delta).trace();
    CHECK(err == doctest::Approx(dense).epsilon(1e-9));
  }
  SUBCASE("a dominant input channel dominates the error") {
    std::vector<double> a{100.0, 1.0, 1.0, 1.0};
    const double full = estimate_error(w, cfg, ErrorMode::act_aware, &a, nullptr);
    Matrix w_hat = dequantize(quantize_matrix(w, cfg));
    double row0 = 0.0;
    for (size_t j = 0; j < 4; ++j) {
      const double d = double(w_hat.at(0, j)) - double(w.at(0, j));
      row0 += 0.5 * 100.0 * d * d;
    }
    CHECK(row0 / full >= 0.5);  // row 0 carries at least half the estimate
  }
}

TEST_CASE("hand-checkable assignment") {
  std::vector<ModuleCandidates> mods{
      synthetic_module("L1", {2, 4}, {10.0, 1.0}),
      synthetic_module("L2", {2, 4}, {3.0, 1.0}),
  };
  Plan p = plan_assignment(mods, 6, PlanSolver::exhaustive);
  CHECK(p.assignment.at("L1").cost_bytes == 4);
  CHECK(p.assignment.at("L2").cost_bytes == 2);
  CHECK(p.total_err == doctest::Approx(4.0));
  CHECK(p.total_cost == 6);
}

TEST_CASE("unconstrained budgets take the lowest-error candidates") {
  auto mods = random_instance(5, 4, 5);
  Plan p = plan_assignment(mods, 1000000, PlanSolver::dp);
  for (const auto& m : mods) {
    double lo = 1e300;
    for (const auto& c : m.candidates) lo = std::min(lo, c.err);
    CHECK(p.assignment.at(m.layer_id).err == doctest::Approx(lo));
  }
}

TEST_CASE("infeasible budgets report the minimal achievable cost") {
  auto mods = random_instance(6, 3, 3);
  size_t min_cost = 0;
  for (const auto& m : mods) {
    size_t lo = SIZE_MAX;
    for (const auto& c : m.candidates) lo = std::min(lo, c.cost_bytes);
    min_cost += lo;
  }
  try {
    plan_assignment(mods, min_cost - 1, PlanSolver::dp);
    FAIL("expected invalid_input");
  } catch (const invalid_input& e) {
    CHECK(std::string(e.what()).find(std::to_string(min_cost)) != std::string::npos);
  }
}

TEST_CASE("all three solvers agree exactly") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto mods = random_instance(1000 + seed, 5, 5);
    size_t total_max = 0;
    for (const auto& m : mods)
      for (const auto& c : m.candidates) total_max = std::max(total_max, c.cost_bytes);
    const size_t budget = 5 * (3 + seed % 12);
    Plan a, b, c;
    bool feasible = true;
    try {
      a = plan_assignment(mods, budget, PlanSolver::exhaustive);
    } catch (const invalid_input&) {
      feasible = false;
    }
    if (!feasible) continue;
    b = plan_assignment(mods, budget, PlanSolver::dp);
    c = plan_assignment(mods, budget, PlanSolver::branch_bound);
    CHECK(b.total_err == doctest::Approx(a.total_err).epsilon(1e-12));
    CHECK(c.total_err == doctest::Approx(a.total_err).epsilon(1e-12));
    CHECK(b.total_cost <= budget);
    CHECK(c.total_cost <= budget);
  }
}

TEST_CASE("total error is monotone in the budget") {
  auto mods = random_instance(77, 6, 4);
  double prev = 1e300;
  for (size_t budget = 30; budget <= 120; budget += 10) {
    try {
      Plan p = plan_assignment(mods, budget, PlanSolver::dp);
      CHECK(p.total_err <= prev + 1e-12);
      CHECK(p.total_cost <= budget);
      prev = p.total_err;
    } catch (const invalid_input&) {
      // infeasible at small budgets
    }
  }
}

TEST_CASE("bpw budgets") {
  ToyModelConfig cfg;
  cfg.L = 1;
  cfg.d = 128;
  cfg.H = 4;
  cfg.H_kv = 4;
  cfg.d_ff = 128;
  cfg.vocab = 64;
  ToyModel m = ToyModel::seeded(cfg, 1);
  LayerGraph g = m.layer_graph();

  SUBCASE("16 bpw is exactly two bytes per parameter") {
    CHECK(budget_from_bpw(g, 16.0) == 2 * g.weight_params());
  }
  SUBCASE("halving the target halves the budget") {
    CHECK(budget_from_bpw(g, 8.0) == budget_from_bpw(g, 4.0) * 2);
  }
  SUBCASE("4.16 matches uniform 4-bit group-128 storage within 1%") {
    // every row length is a multiple of 128 in this config
    size_t uniform_bytes = 0;
    QuantConfig qc{4, Scheme::symmetric, Granularity::per_group, 128};
    for (const auto& l : g.layers) uniform_bytes += uniform_storage_bytes(qc, l.rows, l.cols);
    const double budget = double(budget_from_bpw(g, 4.16));
    CHECK(std::fabs(budget - double(uniform_bytes)) / double(uniform_bytes) <= 0.01);
    CHECK(uniform_equivalent(4.16) == "4b/g128");
    CHECK(uniform_equivalent(4.0) == "4b/ch");
    CHECK(uniform_equivalent(4.5) == "");
  }
  SUBCASE("very low targets are rejected") {
    CHECK_THROWS_AS(budget_from_bpw(g, 1.5), invalid_input);
  }
}

TEST_CASE("candidate grid covers the documented range") {
  Matrix w = random_gaussian(16, 16, 3);
  auto cands = candidate_grid(w, ErrorMode::naive);
  CHECK(cands.size() == 14);  // bits {2..8} x {group-128, per-channel}
  for (const auto& c : cands) {
    CHECK(c.cost_bytes > 0);
    CHECK(c.err >= 0.0);
  }
  CHECK(cands[0].label() == "2b/g128");
  CHECK(cands[1].label() == "2b/ch");
}
