#pragma once

#include <cstdint>
#include <vector>

#include "ocw/matrix.hpp"

namespace ocw {

// W_hat = diag(a) S_a diag(m) S_b^T diag(b) with sign matrices S_a, S_b.
struct DbfMatrix {
  size_t rows = 0, cols = 0, rank = 0;
  std::vector<int8_t> s_a;  // rows x rank, row-major, entries +-1
  std::vector<int8_t> s_b;  // cols x rank, row-major, entries +-1
  std::vector<float> a;     // rows
  std::vector<float> m;     // rank
  std::vector<float> b;     // cols
};

// W_hat = (S_a ⊙ A Q^T)(S_b ⊙ B G^T)^T with rank-l magnitude envelopes.
struct MdbfMatrix {
  size_t rows = 0, cols = 0, rank = 0, env_rank = 0;
  std::vector<int8_t> s_a;  // rows x rank
  std::vector<int8_t> s_b;  // cols x rank
  Matrix a_env;             // rows x l
  Matrix q_env;             // rank x l
  Matrix b_env;             // cols x l
  Matrix g_env;             // rank x l
};

Matrix dequantize_binfact(const DbfMatrix& f);
Matrix dequantize_binfact(const MdbfMatrix& f);

enum class BinfactFormat { dbf, mdbf };

// Total encoded size: sign bits plus 16-bit real parameters.
size_t binfact_bits(size_t n, size_t m, size_t rank, BinfactFormat fmt, size_t env_rank);
size_t dbf_storage_bytes(const DbfMatrix& f);
size_t mdbf_storage_bytes(const MdbfMatrix& f);

// Largest rank whose full encoding fits within 1.02 x target_bpw average
// bits per weight. Throws when even rank 1 does not fit.
size_t rank_for_bpw(size_t n, size_t m, double target_bpw, BinfactFormat fmt,
                    size_t env_rank = 1);

// Multi-envelope sign-value decomposition: truncated rank-R SVD of W gives
// the two factors; each factor contributes its sign pattern, and a rank-l
// truncated SVD of its entrywise absolute values gives the envelope.
// Zero entries take sign +1.
MdbfMatrix msvid_init(const Matrix& w, size_t rank, size_t env_rank);
DbfMatrix msvid_init_dbf(const Matrix& w, size_t rank);  // the l = 1 path

struct BinfactRefineResult {
  std::vector<double> objective_trace;  // recorded after every accepted step
  size_t accepted_flips = 0;
};

// Alternates exact least-squares updates of the real-valued parameters with
// coordinate sign-flip sweeps (inner_iters sweeps per outer iteration),
// accepting only strictly improving flips. Objective is ||W - W_hat||_F^2,
// or the Gram-weighted tr((W - W_hat)^T H (W - W_hat)) when gram is given.
BinfactRefineResult refine_alternating(DbfMatrix& f, const Matrix& w, int outer_iters,
                                       int inner_iters, const Matrix* gram = nullptr);
BinfactRefineResult refine_alternating(MdbfMatrix& f, const Matrix& w, int outer_iters,
                                       int inner_iters, const Matrix* gram = nullptr);

}  // namespace ocw
