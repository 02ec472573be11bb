#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <random>
#include <vector>

#include "cachecraft/kv_cache.hpp"
#include "cachecraft/prefill.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::testing {

struct Prompt {
  std::vector<TokenIds> chunks;
  TokenIds question;

  TokenIds flat() const {
    TokenIds out;
    for (const auto& c : chunks) out.insert(out.end(), c.begin(), c.end());
    out.insert(out.end(), question.begin(), question.end());
    return out;
  }
  model::TokenSpan chunk_span(std::size_t i) const {
    std::size_t begin = 0;
    for (std::size_t j = 0; j < i; ++j) begin += chunks[j].size();
    return {begin, chunks[i].size()};
  }
  model::TokenSpan question_span() const {
    std::size_t begin = 0;
    for (const auto& c : chunks) begin += c.size();
    return {begin, question.size()};
  }
};

inline TokenIds random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab = 256) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  TokenIds out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

inline Prompt random_prompt(std::mt19937_64& rng, std::size_t n_chunks, std::size_t chunk_len,
                            std::size_t question_len) {
  Prompt p;
  for (std::size_t i = 0; i < n_chunks; ++i) p.chunks.push_back(random_tokens(rng, chunk_len));
  p.question = random_tokens(rng, question_len);
  return p;
}

// Chunks with a cache are reused; recompute[i] lists the chunk-relative
// tokens that are computed anyway. Chunks without a cache are fresh.
inline model::PrefillRequest reuse_request(const Prompt& p,
                                           const std::vector<std::shared_ptr<const model::ChunkCache>>& caches,
                                           const std::vector<std::vector<std::size_t>>& recompute = {}) {
  model::PrefillRequest req;
  for (std::size_t i = 0; i < p.chunks.size(); ++i) {
    const bool cached = i < caches.size() && caches[i] != nullptr;
    req.segments.push_back({p.chunks[i], cached ? caches[i] : nullptr});
    for (std::size_t t = 0; t < p.chunks[i].size(); ++t) {
      bool on = !cached;
      if (cached && i < recompute.size()) {
        for (std::size_t r : recompute[i]) on = on || r == t;
      }
      req.recompute_mask.push_back(on);
    }
  }
  req.segments.push_back({p.question, nullptr});
  req.recompute_mask.insert(req.recompute_mask.end(), p.question.size(), true);
  req.positions.resize(req.recompute_mask.size());
  std::iota(req.positions.begin(), req.positions.end(), std::size_t{0});
  req.question = p.question_span();
  return req;
}

inline double relative_error(const Matrix& got, const Matrix& want) {
  return (got - want).norm() / want.norm();
}

}  // namespace cachecraft::testing
