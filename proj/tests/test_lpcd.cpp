#include <doctest.h>

#include <cmath>

#include "ocw/eigen_map.hpp"
#include "ocw/layerwise.hpp"
#include "ocw/lpcd.hpp"
#include "ocw/rng.hpp"

using namespace ocw;

namespace {

ToyModelConfig small_cfg() {
  ToyModelConfig cfg;
  cfg.L = 1;
  cfg.d = 16;
  cfg.H = 4;
  cfg.H_kv = 2;
  cfg.d_ff = 24;
  cfg.vocab = 64;
  return cfg;
}

CalibSet small_calib(size_t vocab, uint64_t seed, size_t n = 2, size_t T = 8) {
  TokenCorpus corpus = TokenCorpus::synthetic(4 * n * T, vocab, seed);
  return sample_calib(corpus, CalibStrategy::concat_chunk, n, T, seed);
}

QuantConfig proj_cfg(int bits) {
  return QuantConfig{bits, Scheme::symmetric, Granularity::per_channel, 0};
}

std::map<std::string, QuantizedMatrix> quantize_members(const ToyModel& model,
                                                        const Submodule& sub, int bits) {
  std::map<std::string, QuantizedMatrix> members;
  for (const auto& id : sub.members) members[id] = quantize_matrix(model.weight(id), proj_cfg(bits));
  return members;
}

}  // namespace

TEST_CASE("single-member refinement reproduces the error-propagation target") {
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    const size_t n = 10, m = 6;
    Matrix w = random_gaussian(n, m, seed);
    Matrix x_fp = random_gaussian(24, n, seed + 10);
    Matrix x_hat = x_fp;
    Rng noise(seed + 20);
    for (auto& v : x_hat.data) v += 0.05f * float(noise.gaussian());

    // route A: explicit target correction followed by the projection
    CalibStats stats(n);
    accumulate_stats(stats, x_fp, x_hat);
    Matrix corrected = qep_target(w, stats, {1.0, 1e-8});
    QuantizedMatrix a = quantize_matrix(corrected, proj_cfg(4));

    // route B: one relax-project iteration on the single-member submodule
    Submodule sub = make_single_submodule("w", x_hat, matmul(x_fp, w));
    std::map<std::string, QuantizedMatrix> members{{"w", quantize_matrix(w, proj_cfg(4))}};
    ProjectFn project = [&](const std::string&, const Matrix& relaxed) {
      return quantize_matrix(relaxed, proj_cfg(4));
    };
    lpcd_refine(sub, members, project, 1);

    CHECK(members.at("w").codes == a.codes);
  }
}

TEST_CASE("gate gradient matches central finite differences") {
  Rng rng(50);
  std::vector<Eigen::MatrixXd> xs{to_eigen_d(random_gaussian(6, 5, 51))};
  Eigen::MatrixXd g = to_eigen_d(random_gaussian(5, 7, 52));
  Eigen::MatrixXd u = to_eigen_d(random_gaussian(5, 7, 53));
  Eigen::MatrixXd d = to_eigen_d(random_gaussian(7, 4, 54));
  std::vector<Eigen::MatrixXd> ys{to_eigen_d(random_gaussian(6, 4, 55))};

  const Eigen::MatrixXd grad = gate_gradient(xs, g, u, d, ys);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index i = Eigen::Index(rng.below(size_t(g.rows())));
    const Eigen::Index j = Eigen::Index(rng.below(size_t(g.cols())));
    Eigen::MatrixXd gp = g, gm = g;
    gp(i, j) += h;
    gm(i, j) -= h;
    const double fd = (gate_objective(xs, gp, u, d, ys) - gate_objective(xs, gm, u, d, ys)) /
                      (2.0 * h);
    const double scale = std::max(1.0, std::fabs(fd));
    CHECK(std::fabs(grad(i, j) - fd) / scale <= 1e-4);
  }
}

TEST_CASE("relaxation never increases the objective") {
  ToyModel model = ToyModel::seeded(small_cfg(), 60);
  CalibSet calib = small_calib(model.config.vocab, 61);

  for (auto kind : {SubmoduleKind::qk, SubmoduleKind::vo, SubmoduleKind::gate_up_down}) {
    Submodule sub = kind == SubmoduleKind::qk ? make_qk_submodule(model, model, calib, 0)
                    : kind == SubmoduleKind::vo
                        ? make_vo_submodule(model, model, calib, 0)
                        : make_gud_submodule(model, model, calib, 0);
    auto members = quantize_members(model, sub, 3);
    ProjectFn project = [&](const std::string&, const Matrix& relaxed) {
      return quantize_matrix(relaxed, proj_cfg(3));
    };
    LpcdReport rep = lpcd_refine(sub, members, project, 2);
    // every relax step is non-increasing versus the preceding state
    for (size_t i = 1; i < rep.objective_trace.size(); ++i)
      if (rep.step_labels[i].rfind("relax:", 0) == 0)
        CHECK(rep.objective_trace[i] <= rep.objective_trace[i - 1] * (1.0 + 1e-9) + 1e-12);
  }
}

TEST_CASE("member order follows the relax schedule") {
  ToyModel model = ToyModel::seeded(small_cfg(), 70);
  CalibSet calib = small_calib(model.config.vocab, 71);
  Submodule qk = make_qk_submodule(model, model, calib, 0);
  CHECK(qk.members == std::vector<std::string>{"blocks.0.q", "blocks.0.k"});
  Submodule vo = make_vo_submodule(model, model, calib, 0);
  CHECK(vo.members == std::vector<std::string>{"blocks.0.v", "blocks.0.o"});
  Submodule gud = make_gud_submodule(model, model, calib, 0);
  CHECK(gud.members ==
        std::vector<std::string>{"blocks.0.up", "blocks.0.gate", "blocks.0.down"});
}

TEST_CASE("coordinate descent beats independent quantization on most seeds") {
  int wins = 0;
  const int trials = 10;  // smoke version; the acceptance suite runs 50
  for (uint64_t seed = 0; seed < trials; ++seed) {
    ToyModel model = ToyModel::seeded(small_cfg(), 700 + seed);
    CalibSet calib = small_calib(model.config.vocab, 800 + seed);
    Submodule sub = make_gud_submodule(model, model, calib, 0);
    auto members = quantize_members(model, sub, 3);

    std::map<std::string, Matrix> indep;
    for (const auto& [id, q] : members) indep[id] = dequantize(q);
    const double j_indep = submodule_objective(sub, indep);

    ProjectFn project = [&](const std::string&, const Matrix& relaxed) {
      return quantize_matrix(relaxed, proj_cfg(3));
    };
    lpcd_refine(sub, members, project, 3);
    std::map<std::string, Matrix> refined;
    for (const auto& [id, q] : members) refined[id] = dequantize(q);
    if (submodule_objective(sub, refined) <= j_indep) ++wins;
  }
  CHECK(wins >= 8);
}

TEST_CASE("uninitialized members are rejected") {
  ToyModel model = ToyModel::seeded(small_cfg(), 90);
  CalibSet calib = small_calib(model.config.vocab, 91);
  Submodule sub = make_qk_submodule(model, model, calib, 0);
  std::map<std::string, QuantizedMatrix> members;  // empty
  ProjectFn project = [&](const std::string&, const Matrix& relaxed) {
    return quantize_matrix(relaxed, proj_cfg(3));
  };
  CHECK_THROWS_AS(lpcd_refine(sub, members, project, 1), invalid_input);
}
