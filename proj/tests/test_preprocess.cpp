#include <doctest.h>

#include <cmath>

#include "ocw/preprocess.hpp"
#include "ocw/quant.hpp"
#include "ocw/rng.hpp"

using namespace ocw;

TEST_CASE("smoothing scales follow the channel-maxima formula") {
  Matrix x(2, 2);
  x.data = {4.0f, 1.0f, -2.0f, 0.5f};  // max|X_:0| = 4, max|X_:1| = 1
  Matrix w(2, 3, 1.0f);                // max|W_j:| = 1
  ChannelScale cs = smooth_scale(x, w, 0.5f);
  CHECK(cs.s[0] == doctest::Approx(2.0));
  CHECK(cs.s[1] == doctest::Approx(1.0));
}

TEST_CASE("equal maxima make the smoothing transform the identity") {
  Matrix x(3, 4);
  Matrix w(4, 5);
  Rng rng(3);
  for (auto& v : x.data) v = float(rng.uniform() * 2.0 - 1.0);
  for (auto& v : w.data) v = float(rng.uniform() * 2.0 - 1.0);
  // force per-channel maxima to 1 in both
  for (size_t j = 0; j < 4; ++j) {
    x.at(0, j) = 1.0f;
    w.at(j, 0) = 1.0f;
  }
  ChannelScale cs = smooth_scale(x, w, 0.77f);
  for (float s : cs.s) CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("smoothing preserves the product exactly") {
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    Matrix x = random_gaussian(6, 8, seed);
    Matrix w = random_gaussian(8, 5, seed + 100);
    Matrix ref = matmul(x, w);
    for (float alpha : {0.0f, 0.3f, 0.5f, 1.0f}) {
      ChannelScale cs = smooth_scale(x, w, alpha);
      Matrix prod = matmul(apply_channel_scale_to_activations(x, cs),
                           apply_channel_scale_to_weights(w, cs));
      CHECK(max_abs(prod - ref) <= 1e-5 * std::max(1.0, max_abs(ref)));
    }
  }
}

TEST_CASE("zero channels fall back to unit scale") {
  Matrix x(2, 2, 0.0f);
  Matrix w(2, 2, 1.0f);
  ChannelScale cs = smooth_scale(x, w, 0.5f);
  CHECK(cs.s[0] == 1.0f);
  CHECK(cs.s[1] == 1.0f);
}

TEST_CASE("rotations are orthogonal and equivalence-preserving") {
  for (uint64_t seed : {10, 11, 12}) {
    Rotation rot = Rotation::random_orthogonal(16, seed);
    CHECK(is_orthogonal(rot.r, 1e-6));
    Matrix w = random_gaussian(16, 8, seed);
    Matrix x = random_gaussian(5, 16, seed + 50);
    Matrix ref = matmul(x, w);
    Matrix prod = matmul(rotate_activations(x, rot), apply_rotation(w, rot, RotationSide::input));
    CHECK(max_abs(prod - ref) <= 1e-5 * std::max(1.0, max_abs(ref)));
    // orthogonal invariance of the Frobenius norm
    CHECK(frobenius_norm(apply_rotation(w, rot, RotationSide::input)) ==
          doctest::Approx(frobenius_norm(w)).epsilon(1e-5));
  }
}

TEST_CASE("identity rotation leaves weights unchanged") {
  Matrix w = random_gaussian(8, 4, 1);
  Rotation rot = Rotation::make_identity(8);
  Matrix out = apply_rotation(w, rot, RotationSide::input);
  for (size_t i = 0; i < w.size(); ++i) CHECK(out.data[i] == doctest::Approx(w.data[i]));
}

TEST_CASE("non-orthogonal matrices are rejected") {
  Rotation rot = Rotation::make_identity(4);
  rot.r.at(0, 1) = 0.5f;
  Matrix w = random_gaussian(4, 4, 2);
  CHECK_THROWS_AS(apply_rotation(w, rot, RotationSide::input), invalid_input);
}

TEST_CASE("hadamard transform is a scaled involution") {
  Rotation h = Rotation::hadamard(8);
  CHECK(is_orthogonal(h.r, 1e-6));
  Matrix w = random_gaussian(8, 3, 3);
  Matrix twice = apply_rotation(apply_rotation(w, h, RotationSide::input), h, RotationSide::input);
  // Sylvester Hadamard is symmetric, so applying it twice returns W
  CHECK(max_abs(twice - w) <= 1e-5);
  CHECK_THROWS_AS(Rotation::hadamard(12), invalid_input);
}

TEST_CASE("incoherence metric") {
  Matrix c(4, 4, 2.5f);
  CHECK(incoherence(c) == doctest::Approx(1.0));

  Matrix spike(4, 8, 0.0f);
  spike.at(1, 3) = -3.0f;
  CHECK(incoherence(spike) == doctest::Approx(std::sqrt(32.0)));

  for (uint64_t seed = 0; seed < 20; ++seed)
    CHECK(incoherence(random_gaussian(5, 7, seed)) >= 1.0 - 1e-9);

  Matrix zero(3, 3, 0.0f);
  CHECK_THROWS_AS(incoherence(zero), invalid_input);
}

TEST_CASE("random rotation spreads a spike matrix") {
  int reduced = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Matrix w(16, 16, 0.01f);
    w.at(3, 5) = 4.0f;  // concentrated outlier
    const double mu0 = incoherence(w);
    Rotation rot = Rotation::random_orthogonal(16, seed);
    const double mu1 = incoherence(apply_rotation(w, rot, RotationSide::input));
    if (mu1 < mu0) ++reduced;
  }
  CHECK(reduced >= 48);
}

TEST_CASE("sinkhorn balances row and column norms") {
  SUBCASE("already balanced input is a fixed point") {
    Matrix w = identity(4);
    for (auto& v : w.data) v *= 2.0f;
    SinkhornResult r = sinkhorn_balance(w, BalanceNorm::l2);
    CHECK(r.converged);
    for (float s : r.row_scale) CHECK(s == doctest::Approx(1.0).epsilon(0.2));
    for (float s : r.col_scale) CHECK(s == doctest::Approx(1.0).epsilon(0.2));
  }
  SUBCASE("diagonal 1/100 is equalized and reconstructs") {
    Matrix w(2, 2, 0.0f);
    w.at(0, 0) = 1.0f;
    w.at(1, 1) = 100.0f;
    SinkhornResult r = sinkhorn_balance(w, BalanceNorm::l2);
    CHECK(r.converged);
    double n0 = 0.0, n1 = 0.0;
    for (size_t j = 0; j < 2; ++j) {
      n0 += double(r.balanced.at(0, j)) * double(r.balanced.at(0, j));
      n1 += double(r.balanced.at(1, j)) * double(r.balanced.at(1, j));
    }
    CHECK(std::sqrt(n0) == doctest::Approx(std::sqrt(n1)).epsilon(1e-2));
    // W = diag(row) * balanced * diag(col)
    for (size_t i = 0; i < 2; ++i)
      for (size_t j = 0; j < 2; ++j)
        CHECK(double(r.row_scale[i]) * double(r.balanced.at(i, j)) * double(r.col_scale[j]) ==
              doctest::Approx(double(w.at(i, j))).epsilon(1e-5));
  }
  SUBCASE("scales stay finite on valid input") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Matrix w = random_gaussian(6, 9, seed);
      for (BalanceNorm n : {BalanceNorm::l1, BalanceNorm::l2}) {
        SinkhornResult r = sinkhorn_balance(w, n);
        for (float s : r.row_scale) CHECK(std::isfinite(s));
        for (float s : r.col_scale) CHECK(std::isfinite(s));
        for (float v : r.balanced.data) CHECK(std::isfinite(v));
      }
    }
  }
}

TEST_CASE("balancing helps quantization of outlier-heavy matrices") {
  int better = 0;
  const int trials = 50;
  for (uint64_t seed = 0; seed < trials; ++seed) {
    Rng rng(seed);
    const size_t n = 16, m = 16;
    Matrix w = random_gaussian(n, m, seed + 1000);
    // heavy-tailed row and column magnitudes
    for (size_t i = 0; i < n; ++i) {
      const float rs = std::exp(float(rng.gaussian()) * 1.5f);
      for (size_t j = 0; j < m; ++j) w.at(i, j) *= rs;
    }
    for (size_t j = 0; j < m; ++j) {
      const float csc = std::exp(float(rng.gaussian()) * 1.5f);
      for (size_t i = 0; i < n; ++i) w.at(i, j) *= csc;
    }
    Matrix x = random_gaussian(8, n, seed + 2000);
    QuantConfig cfg{4, Scheme::symmetric, Granularity::per_tensor, 0};

    Matrix direct = dequantize(quantize_matrix(w, cfg));
    double err_direct = squared_frobenius(matmul(x, direct - w));

    SinkhornResult r = sinkhorn_balance(w, BalanceNorm::l2);
    Matrix qb = dequantize(quantize_matrix(r.balanced, cfg));
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < m; ++j) qb.at(i, j) *= r.row_scale[i] * r.col_scale[j];
    double err_balanced = squared_frobenius(matmul(x, qb - w));
    if (err_balanced < err_direct) ++better;
  }
  CHECK(better >= 40);  // 80% of 50
}
