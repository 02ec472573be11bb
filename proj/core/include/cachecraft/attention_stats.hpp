#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "cachecraft/prefill.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::stats {

struct ChunkSpan {
  ChunkHash chunk_id;
  std::size_t start = 0;
  std::size_t length = 0;

  std::size_t end() const { return start + length; }
};

// Throws ArgumentError unless spans are ordered, disjoint and non-empty.
void validate_spans(std::span<const ChunkSpan> spans);

// All attention quantities below use head-averaged probabilities.

// Attention mass flowing from queries in chunk j onto keys in chunk i at one
// layer. Requires i < j; throws ArgumentError otherwise.
double inter(const model::AttentionRecord& attn, std::span<const ChunkSpan> spans,
             std::size_t i, std::size_t j, std::size_t layer);

// Mass from each token of chunk i onto strictly earlier tokens of the same
// chunk (the diagonal is not included).
double intra(const model::AttentionRecord& attn, std::span<const ChunkSpan> spans,
             std::size_t i, std::size_t layer);

// Per token of chunk i: mass onto all earlier chunks, summed over layers.
// Zero vector for the first chunk.
std::vector<double> token_inter_scores(const model::AttentionRecord& attn,
                                       std::span<const ChunkSpan> spans, std::size_t i);

struct LayerStats {
  // inter(i, j) at [i][j] for i < j; zero elsewhere.
  Matrix inter;
  std::vector<double> intra;
  // Self-attention mass (query token onto its own key).
  std::vector<double> diagonal;
  // Mass onto prompt tokens that belong to no span.
  std::vector<double> outside;
  // false when some query row of the chunk was not computed at this layer;
  // the chunk's entries are then zero.
  std::vector<bool> complete;
};

struct AttentionStats {
  std::vector<LayerStats> layers;
  // Layer-summed token_inter_scores per chunk (empty for incomplete chunks).
  std::vector<std::vector<double>> token_inter;
  std::vector<double> a_bar;
  std::vector<double> b_bar;

  std::size_t n_chunks() const { return a_bar.size(); }
  // inter(i, j) summed over layers.
  double inter_total(std::size_t i, std::size_t j) const;
  bool complete(std::size_t chunk) const;
};

// One pass over every recorded row; equivalent to calling inter/intra per
// pair but O(layers * rows * keys) overall.
AttentionStats compute_stats(const model::AttentionRecord& attn,
                             std::span<const ChunkSpan> spans);

// (a_bar, b_bar) for chunk i: per layer
//   a = sum_{j<i} inter(j, i) / (|C_i| |C_j|),  b = intra(i) / |C_i|^2,
// averaged over layers.
std::pair<double, double> context_ratios(const AttentionStats& stats,
                                         std::span<const ChunkSpan> spans, std::size_t i);

}  // namespace cachecraft::stats
