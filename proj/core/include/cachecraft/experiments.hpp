#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "cachecraft/model.hpp"
#include "cachecraft/recompute_planner.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::harness {

// A prompt whose chunks were cached in other contexts. Layout of the new
// prompt: fresh_prefix (computed), chunks (reused), question (computed).
// Chunk i's cache was created as plain prefill of creation_prefix[i]
// followed by the chunk.
struct ReusePrompt {
  TokenIds fresh_prefix;
  std::vector<TokenIds> chunks;
  std::vector<TokenIds> creation_prefix;
  TokenIds question;
};

ReusePrompt random_reuse_prompt(std::mt19937_64& rng, std::size_t n_chunks, std::size_t chunk_len,
                                std::size_t creation_prefix_len, std::size_t question_len,
                                std::size_t vocab);

struct PreparedReuse {
  planner::PlanRequest request;
  // Every reused chunk is a hit with an empty recompute set; the fresh
  // prefix, when present, is chunk 0 and a miss.
  planner::InferencePlan plan;
  std::vector<double> cci;  // per reused chunk, from its creation context
  Matrix oracle;            // full-recompute question hidden states
};

// Builds the chunk caches, their token scores and CCI, and the oracle.
// `block_size` > 0 pads each cached payload to whole blocks.
PreparedReuse prepare_reuse(const model::Model& model, const ReusePrompt& prompt,
                            std::size_t block_size = 0);

// Index of the first reused chunk inside prepared.plan.chunks.
std::size_t first_reused(const PreparedReuse& prepared);

// Question deviation when each reused chunk recomputes the given tokens
// (one chunk-relative index list per reused chunk).
double reuse_deviation(const model::Model& model, const PreparedReuse& prepared,
                       const std::vector<std::vector<std::size_t>>& recompute);

// ceil(fraction * n) tokens per chunk ranked by stored token scores.
std::vector<std::vector<std::size_t>> targeted_selection(const PreparedReuse& prepared, double fraction);
// The same number of tokens per chunk chosen uniformly at random.
std::vector<std::vector<std::size_t>> random_selection(const PreparedReuse& prepared, double fraction,
                                                       std::mt19937_64& rng);

}  // namespace cachecraft::harness
