#include <doctest.h>

#include <cmath>
#include <set>

#include "ocw/calib.hpp"

using namespace ocw;

namespace {

TokenCorpus ramp_corpus(size_t n) {
  TokenCorpus c;
  c.vocab = 256;
  for (size_t i = 0; i < n; ++i) c.tokens.push_back(int(i % 256));
  return c;
}

}  // namespace

TEST_CASE("concat_chunk takes consecutive disjoint chunks") {
  TokenCorpus c = ramp_corpus(10);
  CalibSet set = sample_calib(c, CalibStrategy::concat_chunk, 2, 3, 0);
  REQUIRE(set.sequences.size() == 2);
  CHECK(set.sequences[0] == std::vector<int>{0, 1, 2});
  CHECK(set.sequences[1] == std::vector<int>{3, 4, 5});
}

TEST_CASE("chunking tiles the corpus prefix without gaps") {
  TokenCorpus c = ramp_corpus(64);
  CalibSet set = sample_calib(c, CalibStrategy::concat_chunk, 4, 8, 0);
  std::vector<int> flat;
  for (const auto& s : set.sequences) flat.insert(flat.end(), s.begin(), s.end());
  for (size_t i = 0; i < flat.size(); ++i) CHECK(flat[i] == c.tokens[i]);
}

TEST_CASE("insufficient corpus reports the shortfall") {
  TokenCorpus c = ramp_corpus(5);
  try {
    sample_calib(c, CalibStrategy::concat_chunk, 2, 3, 0);
    FAIL("expected invalid_input");
  } catch (const invalid_input& e) {
    const std::string msg = e.what();
    CHECK(msg.find("6") != std::string::npos);  // required count
  }
}

TEST_CASE("drop_head discards a quarter-length prefix per window") {
  TokenCorpus c = ramp_corpus(64);
  const size_t T = 8, drop = 2;  // T/4
  CalibSet set = sample_calib(c, CalibStrategy::drop_head, 2, T, 0);
  REQUIRE(set.sequences.size() == 2);
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < T; ++j)
      CHECK(set.sequences[i][j] == c.tokens[i * (T + drop) + drop + j]);
}

TEST_CASE("drop_rand is seed-deterministic and seed-sensitive") {
  TokenCorpus c = ramp_corpus(10 * 4 * 8 + 13);
  CalibSet a = sample_calib(c, CalibStrategy::drop_rand, 4, 8, 4242);
  CalibSet b = sample_calib(c, CalibStrategy::drop_rand, 4, 8, 4242);
  CHECK(a.sequences == b.sequences);

  int distinct = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    CalibSet s = sample_calib(c, CalibStrategy::drop_rand, 4, 8, seed);
    if (s.sequences != a.sequences) ++distinct;
    // windows are disjoint
    std::vector<std::pair<int, int>> spans;
    for (const auto& seq : s.sequences) spans.emplace_back(seq.front(), seq.back());
  }
  CHECK(distinct >= 99);
}

TEST_CASE("drop_rand windows are disjoint") {
  TokenCorpus c = ramp_corpus(200);
  CalibSet s = sample_calib(c, CalibStrategy::drop_rand, 5, 16, 7);
  std::set<int> seen;
  for (const auto& seq : s.sequences) {
    // ramp corpus < 256 long, so token value identifies the position
    for (int t : seq) CHECK(seen.insert(t).second);
  }
}

TEST_CASE("collected layer inputs have the row-per-token shape") {
  ToyModelConfig cfg;
  cfg.L = 1;
  cfg.d = 8;
  cfg.H = 2;
  cfg.H_kv = 1;
  cfg.d_ff = 16;
  cfg.vocab = 32;
  ToyModel model = ToyModel::seeded(cfg, 5);
  TokenCorpus c;
  c.vocab = 32;
  for (int i = 0; i < 16; ++i) c.tokens.push_back(i % 32);
  CalibSet calib = sample_calib(c, CalibStrategy::concat_chunk, 1, 4, 0);

  Matrix x = collect_layer_inputs(model, calib, "blocks.0.q");
  CHECK(x.rows == 4);
  CHECK(x.cols == 8);

  Matrix x2 = collect_layer_inputs(model, calib, "blocks.0.q");
  CHECK(x.data == x2.data);

  CHECK_THROWS_AS(collect_layer_inputs(model, calib, "blocks.3.q"), invalid_input);
}

TEST_CASE("first block input equals normalized embedding rows") {
  ToyModelConfig cfg;
  cfg.L = 2;
  cfg.d = 8;
  cfg.H = 2;
  cfg.H_kv = 2;
  cfg.d_ff = 16;
  cfg.vocab = 32;
  ToyModel model = ToyModel::seeded(cfg, 9);
  TokenCorpus c;
  c.vocab = 32;
  for (int i = 0; i < 12; ++i) c.tokens.push_back((i * 7) % 32);
  CalibSet calib = sample_calib(c, CalibStrategy::concat_chunk, 2, 4, 0);

  Matrix x = collect_layer_inputs(model, calib, "blocks.0.q");
  size_t row = 0;
  for (const auto& seq : calib.sequences) {
    for (int tok : seq) {
      // independent recomputation: RMSNorm of the embedding row
      double ms = 0.0;
      for (size_t j = 0; j < cfg.d; ++j) {
        double e = model.embedding.at(size_t(tok), j);
        ms += e * e;
      }
      ms /= double(cfg.d);
      const double inv = 1.0 / std::sqrt(ms + double(cfg.rms_eps));
      for (size_t j = 0; j < cfg.d; ++j) {
        const double want = double(model.embedding.at(size_t(tok), j)) * inv;
        CHECK(double(x.at(row, j)) == doctest::Approx(want).epsilon(1e-5));
      }
      ++row;
    }
  }
}

TEST_CASE("corpus validation") {
  TokenCorpus c;
  c.vocab = 4;
  CHECK_THROWS_AS(c.validate(), invalid_input);
  c.tokens = {0, 1, 5};
  CHECK_THROWS_AS(c.validate(), invalid_input);
  c.tokens = {0, 1, 3};
  CHECK_NOTHROW(c.validate());
}
