#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cachecraft/kv_cache.hpp"
#include "cachecraft/model.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::model {

// Half-open token range [begin, begin + length).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t length = 0;

  std::size_t end() const { return begin + length; }
  bool contains(std::size_t t) const { return t >= begin && t < end(); }
};

// A run of prompt tokens. With `cache` set the segment is a reused chunk:
// tokens whose recompute flag is false take their keys/values from it.
struct Segment {
  TokenIds tokens;
  std::shared_ptr<const ChunkCache> cache;
};

struct PrefillRequest {
  std::vector<Segment> segments;
  // Absolute position of every token after concatenation, strictly increasing.
  std::vector<std::size_t> positions;
  // true: query/key/value computed for this token.
  std::vector<bool> recompute_mask;
  // Optional per-token layer cutoff for recomputed tokens: a token with
  // cutoff c computes layers [0, c) and reads its cache for the rest.
  // Empty means every recomputed token runs all layers.
  std::vector<std::size_t> layer_cutoff;
  TokenSpan question;

  std::size_t n_tokens() const;

  // All-fresh request over `tokens` at positions 0..n-1; the last
  // `question_len` tokens form the question span.
  static PrefillRequest plain(const TokenIds& tokens, std::size_t question_len = 1);
};

// Attention probabilities of one layer. Rows are the tokens that had a
// query at this layer, columns are all prompt tokens (padding excluded).
struct LayerAttention {
  std::vector<std::size_t> query_rows;
  std::vector<Matrix> heads;  // [query_rows.size() x n_tokens] per head

  Matrix head_mean() const;
  // Index into query_rows for token t, or -1 when t had no query here.
  std::ptrdiff_t row_of(std::size_t t) const;
};

struct AttentionRecord {
  std::vector<LayerAttention> layers;
};

struct PrefillResult {
  TokenIds tokens;
  std::vector<std::size_t> positions;
  // Last-layer hidden states; row t is meaningful iff has_final_hidden[t].
  Matrix hidden;
  std::vector<bool> has_final_hidden;
  // Position-free keys and values of every token: fresh where the token was
  // computed at that layer, otherwise the injected cache rows.
  std::vector<KVCacheLayer> kv;
  AttentionRecord attention;
  // Per layer: concatenated per-head attention outputs (before the output
  // projection), one row per query row. Filled only on request.
  std::vector<Matrix> context;
  // Per layer: values actually attended to, [n_tokens x d_model].
  // Filled together with `context`.
  std::vector<Matrix> attended_values;
  // Number of layers each token was computed for.
  std::vector<std::size_t> computed_layers;

  Matrix rows(TokenSpan span) const { return hidden.middleRows(span.begin, span.length); }

  // Rows of kv for one token range as a standalone cache.
  ChunkCache extract_cache(TokenSpan span) const;
};

// Called after every layer with that layer's attention. The hook may lower
// layer_cutoff entries (never below layer + 1) to stop recomputing tokens
// that have an injected cache.
using LayerHook =
    std::function<void(std::size_t layer, const LayerAttention& attention,
                       std::vector<std::size_t>& layer_cutoff)>;

struct PrefillOptions {
  bool record_attention = true;
  bool record_context = false;
  LayerHook on_layer;
};

// Throws PlanError on inconsistent requests (cache/token count mismatch,
// mask-false token without cache, question token not recomputed,
// non-increasing positions).
PrefillResult prefill(const Model& model, const PrefillRequest& request,
                      const PrefillOptions& options = {});

// Plain causal prefill of `tokens` at positions 0..n-1.
PrefillResult plain_prefill(const Model& model, const TokenIds& tokens,
                            std::size_t question_len = 1,
                            const PrefillOptions& options = {});

struct DecodeState {
  std::vector<KVCacheLayer> kv;  // position-free
  std::vector<std::size_t> positions;
  RowVector last_hidden;

  // Requires the last prompt token to have a final hidden state.
  static DecodeState from(const PrefillResult& result);
};

// Greedy decoding. Every generated token is fed back, extending kv by one
// row per step. max_steps == 0 yields an empty sequence.
TokenIds decode(const Model& model, DecodeState& state, std::size_t max_steps);

// Mean per-token L2 distance between two hidden-state blocks.
double mean_row_distance(const Matrix& a, const Matrix& b);

}  // namespace cachecraft::model
