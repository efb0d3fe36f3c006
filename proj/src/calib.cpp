#include "ocw/calib.hpp"

#include <algorithm>
#include <fstream>

#include "ocw/rng.hpp"

namespace ocw {

void TokenCorpus::validate() const {
  if (tokens.empty()) throw invalid_input("TokenCorpus: empty corpus");
  for (int t : tokens)
    if (t < 0 || size_t(t) >= vocab) throw invalid_input("TokenCorpus: token id out of range");
}

TokenCorpus TokenCorpus::from_u32_file(const std::string& path, size_t vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open corpus file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw io_error("u32 corpus file size is not a multiple of 4: " + path);
  TokenCorpus c;
  c.vocab = vocab;
  c.tokens.reserve(bytes.size() / 4);
  for (size_t i = 0; i < bytes.size(); i += 4) {
    uint32_t v = uint32_t(bytes[i]) | uint32_t(bytes[i + 1]) << 8 | uint32_t(bytes[i + 2]) << 16 |
                 uint32_t(bytes[i + 3]) << 24;
    c.tokens.push_back(int(v));
  }
  c.validate();
  return c;
}

TokenCorpus TokenCorpus::from_byte_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open corpus file: " + path);
  TokenCorpus c;
  c.vocab = 256;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it)
    c.tokens.push_back(int(static_cast<unsigned char>(*it)));
  c.validate();
  return c;
}

TokenCorpus TokenCorpus::synthetic(size_t length, size_t vocab, uint64_t seed) {
  if (length == 0 || vocab == 0) throw invalid_input("synthetic corpus: empty");
  TokenCorpus c;
  c.vocab = vocab;
  c.tokens.resize(length);
  Rng rng(seed);
  for (auto& t : c.tokens) t = int(rng.below(vocab));
  return c;
}

CalibStrategy calib_strategy_from_name(const std::string& name) {
  if (name == "concat_chunk") return CalibStrategy::concat_chunk;
  if (name == "drop_head") return CalibStrategy::drop_head;
  if (name == "drop_rand") return CalibStrategy::drop_rand;
  throw invalid_input("unknown calibration strategy: " + name);
}

const char* calib_strategy_name(CalibStrategy s) {
  switch (s) {
    case CalibStrategy::concat_chunk: return "concat_chunk";
    case CalibStrategy::drop_head: return "drop_head";
    case CalibStrategy::drop_rand: return "drop_rand";
  }
  return "?";
}

namespace {

void require_tokens(size_t have, size_t need, const char* strategy) {
  if (have < need)
    throw invalid_input(std::string("sample_calib(") + strategy + "): corpus has " +
                        std::to_string(have) + " tokens but needs at least " +
                        std::to_string(need));
}

}  // namespace

CalibSet sample_calib(const TokenCorpus& corpus, CalibStrategy strategy, size_t n, size_t T,
                      uint64_t seed) {
  corpus.validate();
  if (n == 0 || T == 0) throw invalid_input("sample_calib: n and T must be positive");
  CalibSet set;
  set.strategy = strategy;
  set.seed = seed;
  set.sequences.reserve(n);
  const auto& toks = corpus.tokens;

  switch (strategy) {
    case CalibStrategy::concat_chunk: {
      require_tokens(toks.size(), n * T, "concat_chunk");
      for (size_t i = 0; i < n; ++i)
        set.sequences.emplace_back(toks.begin() + ptrdiff_t(i * T),
                                   toks.begin() + ptrdiff_t((i + 1) * T));
      break;
    }
    case CalibStrategy::drop_head: {
      const size_t drop = T / 4;
      const size_t window = T + drop;
      require_tokens(toks.size(), n * window, "drop_head");
      for (size_t i = 0; i < n; ++i) {
        const size_t start = i * window + drop;
        set.sequences.emplace_back(toks.begin() + ptrdiff_t(start),
                                   toks.begin() + ptrdiff_t(start + T));
      }
      break;
    }
    case CalibStrategy::drop_rand: {
      require_tokens(toks.size(), n * T, "drop_rand");
      Rng rng(seed);
      std::vector<size_t> starts;
      size_t attempts = 0;
      const size_t max_attempts = 1000 * n + 1000;
      while (starts.size() < n) {
        if (++attempts > max_attempts)
          throw invalid_input("sample_calib(drop_rand): could not place " + std::to_string(n) +
                              " disjoint windows; corpus too small");
        const size_t s = size_t(rng.below(toks.size() - T + 1));
        bool overlap = false;
        for (size_t prev : starts)
          if (s < prev + T && prev < s + T) {
            overlap = true;
            break;
          }
        if (!overlap) starts.push_back(s);
      }
      for (size_t s : starts)
        set.sequences.emplace_back(toks.begin() + ptrdiff_t(s), toks.begin() + ptrdiff_t(s + T));
      break;
    }
  }
  return set;
}

Matrix collect_layer_inputs(const ToyModel& model, const CalibSet& calib,
                            const std::string& layer_id) {
  if (calib.sequences.empty()) throw invalid_input("collect_layer_inputs: empty calibration set");
  Matrix stacked;
  for (const auto& seq : calib.sequences) {
    ForwardTaps taps = forward_with_taps(model, seq);
    auto it = taps.inputs.find(layer_id);
    if (it == taps.inputs.end()) throw invalid_input("unknown layer id: " + layer_id);
    stacked = stacked.empty() ? it->second : vstack(stacked, it->second);
  }
  return stacked;
}

}  // namespace ocw
