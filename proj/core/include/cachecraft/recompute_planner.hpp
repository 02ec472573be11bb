#pragma once

#include <cstddef>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cachecraft/cache_store.hpp"
#include "cachecraft/prefill.hpp"
#include "cachecraft/reuse_scoring.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::planner {

inline constexpr std::size_t kDefaultFocusWindow = 3;

// Indices of the ceil(cfo * n) highest scores, ties to the lower index,
// returned in ascending order. Throws ArgumentError if cfo is outside [0, 1].
std::vector<std::size_t> select_tokens(std::span<const double> scores, double cfo);

struct FocusResult {
  std::vector<std::size_t> focused;  // chunk indices, ascending
  std::size_t cutoff_layer = 0;      // 1-based layer count L*
  bool degenerate = false;           // fewer than three chunks
};

// The focused set chosen from one layer's cumulative question->chunk
// scores: sort descending, normalise successive gaps into a distribution,
// and cut where the running entropy jumps the most. All-equal scores keep
// every chunk. Requires at least three chunks.
std::vector<std::size_t> focused_at_layer(std::span<const double> cumulative);

// Layer-by-layer focused-chunk detector. Feed one vector of per-chunk
// question attention per layer; returns a result as soon as the focused set
// has been identical for `window` consecutive layers.
class FocusTracker {
 public:
  FocusTracker(std::size_t n_chunks, std::size_t window, std::size_t n_layers);

  std::optional<FocusResult> observe(std::span<const double> layer_scores);
  // Result after all layers were observed without stabilising.
  FocusResult fallback() const;

  std::size_t layers_seen() const { return history_.size(); }
  const std::vector<double>& cumulative() const { return cumulative_; }

 private:
  std::size_t n_chunks_;
  std::size_t window_;
  std::size_t n_layers_;
  std::vector<double> cumulative_;
  std::vector<std::vector<std::size_t>> history_;
  std::optional<FocusResult> done_;
};

// stream[l][i] = attention mass from the question onto chunk i at layer l.
FocusResult predict_focused(const std::vector<std::vector<double>>& stream, std::size_t window,
                            std::size_t n_layers);

enum class ChunkStatus { kMiss, kHit };

struct ChunkPlan {
  ChunkHash chunk;
  model::TokenSpan span;
  ChunkStatus status = ChunkStatus::kMiss;
  // Populated for hits only.
  VariantId variant = 0;
  scoring::ReuseScore score;
  std::vector<std::size_t> recompute;  // chunk-relative, ascending
  std::vector<double> token_scores;
  std::size_t cutoff_layer = 0;  // layers run by recomputed tokens
  std::size_t payload_bytes = 0;
  std::shared_ptr<const model::ChunkCache> payload;
};

struct InferencePlan {
  std::vector<ChunkPlan> chunks;
  model::TokenSpan question;
  std::vector<std::size_t> positions;
  std::size_t n_layers = 0;
  std::size_t focus_window = kDefaultFocusWindow;

  std::size_t total_tokens() const { return positions.size(); }
  std::size_t hits() const;
  // Tokens computed for at least one layer (misses, recomputed, question).
  std::size_t computed_tokens() const;
  // Sum over tokens of layers computed.
  std::size_t computed_token_layers() const;
  // Tokens computed at a given 0-based layer.
  std::size_t computed_tokens_at(std::size_t layer) const;
  std::vector<ChunkHash> chunk_ids() const;
};

struct PlanRequest {
  std::vector<TokenIds> chunks;
  TokenIds question;
};

// Classifies every chunk as hit/miss against the store, picks the stored
// variant with the lowest CFO for the chunk's new prefix (lowest id on
// ties) and selects its recompute tokens.
InferencePlan build_plan(const PlanRequest& request, const store::CacheStore& store,
                         double alpha, std::size_t n_layers,
                         std::size_t focus_window = kDefaultFocusWindow);

// Unfocused hit chunks stop recomputing after focus.cutoff_layer layers.
InferencePlan apply_early_termination(InferencePlan plan, const FocusResult& focus);

// Overrides every hit's CFO with a fixed fraction and reselects tokens from
// the variant's stored scores.
InferencePlan with_fixed_fraction(InferencePlan plan, double fraction);

model::PrefillRequest to_prefill_request(const InferencePlan& plan, const PlanRequest& request);

// Per-chunk question attention of one layer: sum of head-averaged mass from
// the question rows onto each chunk span.
std::vector<double> question_chunk_attention(const model::LayerAttention& layer,
                                             const InferencePlan& plan);

// Layer hook that runs the focus tracker during prefill and applies early
// termination to unfocused hit chunks once the focused set is stable.
// `result` receives the focus decision when one is made.
model::LayerHook make_focus_hook(const InferencePlan& plan,
                                 std::shared_ptr<std::optional<FocusResult>> result);

void write_plan_json(std::ostream& out, const InferencePlan& plan);
// Restores everything except payload pointers.
InferencePlan read_plan_json(std::istream& in);

}  // namespace cachecraft::planner
