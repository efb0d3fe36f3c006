#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ocw/matrix.hpp"
#include "ocw/model.hpp"

namespace ocw {

struct TokenCorpus {
  std::vector<int> tokens;
  size_t vocab = 256;

  void validate() const;

  // Binary file of 32-bit little-endian token ids.
  static TokenCorpus from_u32_file(const std::string& path, size_t vocab);
  // Text mode: each byte is a token id (vocab 256).
  static TokenCorpus from_byte_file(const std::string& path);
  // Seeded synthetic corpus for demos and tests.
  static TokenCorpus synthetic(size_t length, size_t vocab, uint64_t seed);
};

enum class CalibStrategy { concat_chunk, drop_head, drop_rand };

CalibStrategy calib_strategy_from_name(const std::string& name);
const char* calib_strategy_name(CalibStrategy s);

struct CalibSet {
  std::vector<std::vector<int>> sequences;  // n sequences of exactly T ids
  CalibStrategy strategy = CalibStrategy::concat_chunk;
  uint64_t seed = 0;
};

// Deterministic function of (corpus, strategy, n, T, seed).
//  concat_chunk: consecutive disjoint chunks [i*T, (i+1)*T)
//  drop_head:    windows of T + T/4 tokens with the first T/4 discarded
//  drop_rand:    n uniformly random disjoint windows of length T
CalibSet sample_calib(const TokenCorpus& corpus, CalibStrategy strategy, size_t n, size_t T,
                      uint64_t seed);

// Stacked row-per-token inputs to one quantizable module under a
// full-precision forward over all calibration sequences: (n*T) x N.
Matrix collect_layer_inputs(const ToyModel& model, const CalibSet& calib,
                            const std::string& layer_id);

}  // namespace ocw
