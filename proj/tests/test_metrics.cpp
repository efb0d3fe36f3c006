#include <doctest.h>

#include <cmath>

#include "ocw/eigen_map.hpp"
#include "ocw/metrics.hpp"
#include "ocw/quant.hpp"
#include "ocw/rng.hpp"

using namespace ocw;

TEST_CASE("kl divergence") {
  SUBCASE("identical logits give zero") {
    Matrix l = random_gaussian(6, 10, 1);
    CHECK(kl_divergence(l, l, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("matches a direct summation oracle") {
    Matrix t = random_gaussian(4, 8, 2, 2.0f);
    Matrix s = random_gaussian(4, 8, 3, 2.0f);
    for (double tau : {1.0, 2.0}) {
      double expected = 0.0;
      for (size_t r = 0; r < t.rows; ++r) {
        // independent softmax + sum
        double zt = 0.0, zs = 0.0;
        for (size_t v = 0; v < t.cols; ++v) {
          zt += std::exp(double(t.at(r, v)) / tau);
          zs += std::exp(double(s.at(r, v)) / tau);
        }
        for (size_t v = 0; v < t.cols; ++v) {
          const double p = std::exp(double(t.at(r, v)) / tau) / zt;
          const double q = std::exp(double(s.at(r, v)) / tau) / zs;
          expected += p * std::log(p / q);
        }
      }
      expected /= double(t.rows);
      CHECK(kl_divergence(t, s, tau) == doctest::Approx(expected).epsilon(1e-9));
    }
  }
  SUBCASE("nonnegative on random pairs") {
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      Matrix t = random_gaussian(1, 6, seed);
      Matrix s = random_gaussian(1, 6, seed + 5000);
      CHECK(kl_divergence(t, s, 1.0) >= -1e-12);
    }
  }
}

TEST_CASE("hidden state alignment") {
  Matrix h = random_gaussian(5, 7, 10);
  SUBCASE("identical taps give zero distance") {
    auto d = hidden_alignment({h, h}, {h, h});
    for (double v : d) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("antipodal taps give distance two") {
    Matrix neg = h;
    for (auto& v : neg.data) v = -v;
    auto d = hidden_alignment({h}, {neg});
    CHECK(d[0] == doctest::Approx(2.0).epsilon(1e-9));
  }
  SUBCASE("positive scaling leaves distances unchanged") {
    Matrix other = random_gaussian(5, 7, 11);
    auto base = hidden_alignment({h}, {other});
    Matrix scaled = other;
    for (auto& v : scaled.data) v *= 3.5f;
    auto d = hidden_alignment({h}, {scaled});
    CHECK(d[0] == doctest::Approx(base[0]).epsilon(1e-6));
  }
}

TEST_CASE("entropy of softmaxed logits") {
  Matrix uniform(3, 16, 0.0f);
  CHECK(entropy(uniform) == doctest::Approx(std::log(16.0)).epsilon(1e-9));

  Matrix peaked(1, 16, 0.0f);
  peaked.at(0, 5) = 50.0f;
  CHECK(entropy(peaked) == doctest::Approx(0.0).epsilon(1e-6));

  Matrix l = random_gaussian(4, 12, 20);
  Matrix shifted = l;
  for (size_t r = 0; r < l.rows; ++r)
    for (size_t v = 0; v < l.cols; ++v) shifted.at(r, v) += 7.0f;
  CHECK(entropy(shifted) == doctest::Approx(entropy(l)).epsilon(1e-6));
}

TEST_CASE("smooth rounding surrogate") {
  SUBCASE("midpoints are fixed points") {
    for (double k : {0.5, 2.0, 50.0}) CHECK(smooth_ste(1.5, k).first == doctest::Approx(1.5));
  }
  SUBCASE("high temperature approaches hard rounding") {
    CHECK(smooth_ste(1.3, 1000.0).first == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(smooth_ste(1.7, 1000.0).first == doctest::Approx(2.0).epsilon(1e-3));
  }
  SUBCASE("derivative matches central finite differences") {
    Rng rng(33);
    for (int i = 0; i < 100; ++i) {
      const double x = std::floor(rng.uniform() * 10.0 - 5.0) + 0.05 + 0.9 * rng.uniform();
      const double k = 0.5 + rng.uniform() * 10.0;
      const double h = 1e-6;
      const double fd = (smooth_ste(x + h, k).first - smooth_ste(x - h, k).first) / (2.0 * h);
      CHECK(smooth_ste(x, k).second == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  SUBCASE("monotone non-decreasing in x") {
    for (double k : {1.0, 5.0, 30.0}) {
      double prev = -1e300;
      for (double x = -2.0; x <= 2.0; x += 0.01) {
        const double v = smooth_ste(x, k).first;
        CHECK(v >= prev - 1e-12);
        prev = v;
      }
    }
  }
}

TEST_CASE("temperature annealing schedule") {
  CHECK(psta_schedule(0, 10) == doctest::Approx(2.0));
  CHECK(psta_schedule(9, 10) == doctest::Approx(20.0));
  CHECK(psta_schedule(5, 11) == doctest::Approx(11.0));  // midpoint
  CHECK_THROWS_AS(psta_schedule(0, 1), invalid_input);
}

TEST_CASE("low-rank residual correction") {
  const size_t n = 8, m = 6;
  Matrix w = random_gaussian(n, m, 40);
  QuantConfig cfg{3, Scheme::symmetric, Granularity::per_channel, 0};
  Matrix w_hat = dequantize(quantize_matrix(w, cfg));
  Matrix x = random_gaussian(20, n, 41);

  SUBCASE("rank zero changes nothing") {
    LowRankCorrection c = lowrank_residual_fit(w, w_hat, x, 0);
    CHECK(c.b.cols == 0);
    CHECK(lowrank_objective(w, w_hat, x, c) ==
          doctest::Approx(squared_frobenius(matmul(x, w_hat - w))).epsilon(1e-6));
  }
  SUBCASE("full rank recovers the residual exactly") {
    LowRankCorrection c = lowrank_residual_fit(w, w_hat, x, m);
    CHECK(lowrank_objective(w, w_hat, x, c) <= 1e-8);
  }
  SUBCASE("rank one strictly improves a nonzero residual") {
    LowRankCorrection c = lowrank_residual_fit(w, w_hat, x, 1);
    const double base = squared_frobenius(matmul(x, w_hat - w));
    CHECK(lowrank_objective(w, w_hat, x, c) < base);

    // oracle: the optimum cannot beat the best rank-1 approximation of the
    // whitened residual (Eckart-Young on the exact-Gram whitening)
    Eigen::MatrixXd xd = to_eigen_d(x);
    Eigen::MatrixXd lt = Eigen::LLT<Eigen::MatrixXd>(
                             Eigen::MatrixXd(xd.transpose() * xd)).matrixU();
    Eigen::MatrixXd g = lt * (to_eigen_d(w_hat) - to_eigen_d(w));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(g);
    double tail = 0.0;
    for (Eigen::Index i = 1; i < svd.singularValues().size(); ++i)
      tail += svd.singularValues()(i) * svd.singularValues()(i);
    CHECK(lowrank_objective(w, w_hat, x, c) == doctest::Approx(tail).epsilon(1e-4));
  }
  SUBCASE("objective is non-increasing in rank") {
    double prev = 1e300;
    for (size_t r = 0; r <= m; ++r) {
      LowRankCorrection c = lowrank_residual_fit(w, w_hat, x, r);
      const double obj = lowrank_objective(w, w_hat, x, c);
      CHECK(obj <= prev + 1e-9);
      prev = obj;
    }
  }
}

TEST_CASE("next-token negative log-likelihood") {
  Matrix logits(3, 4, 0.0f);
  std::vector<int> toks{0, 1, 2};
  // uniform logits: nll = ln 4 per position
  CHECK(nll_from_logits(logits, toks) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}
