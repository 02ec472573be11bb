#include "cachecraft/experiments.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

#include "cachecraft/attention_stats.hpp"
#include "cachecraft/cache_store.hpp"
#include "cachecraft/errors.hpp"
#include "cachecraft/prefill.hpp"
#include "cachecraft/reuse_scoring.hpp"

namespace cachecraft::harness {
namespace {

TokenIds random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> token(0, static_cast<TokenId>(vocab - 1));
  TokenIds out(n);
  for (auto& t : out) t = token(rng);
  return out;
}

}  // namespace

ReusePrompt random_reuse_prompt(std::mt19937_64& rng, std::size_t n_chunks, std::size_t chunk_len,
                                std::size_t creation_prefix_len, std::size_t question_len,
                                std::size_t vocab) {
  ReusePrompt p;
  for (std::size_t i = 0; i < n_chunks; ++i) {
    p.chunks.push_back(random_tokens(rng, chunk_len, vocab));
    p.creation_prefix.push_back(random_tokens(rng, creation_prefix_len, vocab));
  }
  p.question = random_tokens(rng, question_len, vocab);
  return p;
}

PreparedReuse prepare_reuse(const model::Model& model, const ReusePrompt& prompt, std::size_t block_size) {
  if (prompt.chunks.size() != prompt.creation_prefix.size()) {
    throw ArgumentError("prepare_reuse: one creation prefix per chunk required");
  }
  if (prompt.question.empty()) throw ArgumentError("prepare_reuse: empty question");
  const std::size_t n_layers = model.config().n_layers;

  PreparedReuse out;
  auto& plan = out.plan;
  plan.n_layers = n_layers;
  std::size_t cursor = 0;
  if (!prompt.fresh_prefix.empty()) {
    out.request.chunks.push_back(prompt.fresh_prefix);
    planner::ChunkPlan cp;
    cp.chunk = store::chunk_hash(prompt.fresh_prefix);
    cp.span = {0, prompt.fresh_prefix.size()};
    cp.cutoff_layer = n_layers;
    plan.chunks.push_back(std::move(cp));
    cursor = prompt.fresh_prefix.size();
  }

  model::PrefillOptions options;
  for (std::size_t i = 0; i < prompt.chunks.size(); ++i) {
    const auto& chunk = prompt.chunks[i];
    const auto& before = prompt.creation_prefix[i];
    TokenIds tokens = before;
    tokens.insert(tokens.end(), chunk.begin(), chunk.end());
    const auto created = model::plain_prefill(model, tokens, 1, options);

    std::vector<stats::ChunkSpan> spans;
    if (!before.empty()) spans.push_back({store::chunk_hash(before), 0, before.size()});
    spans.push_back({store::chunk_hash(chunk), before.size(), chunk.size()});
    const auto st = stats::compute_stats(created.attention, spans);
    const std::size_t self = spans.size() - 1;
    const auto [a, b] = stats::context_ratios(st, spans, self);

    model::ChunkCache cache = created.extract_cache({before.size(), chunk.size()});
    if (block_size > 0) cache = store::pad_to_blocks(cache, block_size);

    planner::ChunkPlan cp;
    cp.chunk = store::chunk_hash(chunk);
    cp.span = {cursor, chunk.size()};
    cp.status = planner::ChunkStatus::kHit;
    cp.variant = i + 1;
    cp.cutoff_layer = n_layers;
    cp.token_scores = st.token_inter[self];
    cp.score.cci = scoring::cci(a, b);
    cp.payload = std::make_shared<const model::ChunkCache>(std::move(cache));
    cp.payload_bytes = cp.payload->payload_bytes();
    out.cci.push_back(cp.score.cci);
    plan.chunks.push_back(std::move(cp));
    out.request.chunks.push_back(chunk);
    cursor += chunk.size();
  }
  out.request.question = prompt.question;
  plan.question = {cursor, prompt.question.size()};
  plan.positions.resize(cursor + prompt.question.size());
  std::iota(plan.positions.begin(), plan.positions.end(), std::size_t{0});

  TokenIds all;
  for (const auto& c : out.request.chunks) all.insert(all.end(), c.begin(), c.end());
  all.insert(all.end(), prompt.question.begin(), prompt.question.end());
  model::PrefillOptions quiet;
  quiet.record_attention = false;
  out.oracle = model::plain_prefill(model, all, prompt.question.size(), quiet).rows(plan.question);
  return out;
}

std::size_t first_reused(const PreparedReuse& prepared) {
  std::size_t i = 0;
  while (i < prepared.plan.chunks.size() && prepared.plan.chunks[i].status != planner::ChunkStatus::kHit) ++i;
  return i;
}

double reuse_deviation(const model::Model& model, const PreparedReuse& prepared,
                       const std::vector<std::vector<std::size_t>>& recompute) {
  const std::size_t first = first_reused(prepared);
  if (recompute.size() != prepared.plan.chunks.size() - first) {
    throw ArgumentError("reuse_deviation: one recompute list per reused chunk required");
  }
  planner::InferencePlan plan = prepared.plan;
  for (std::size_t i = 0; i < recompute.size(); ++i) {
    auto sel = recompute[i];
    std::sort(sel.begin(), sel.end());
    plan.chunks[first + i].recompute = std::move(sel);
  }
  model::PrefillOptions quiet;
  quiet.record_attention = false;
  const auto result = model::prefill(model, planner::to_prefill_request(plan, prepared.request), quiet);
  return model::mean_row_distance(result.rows(plan.question), prepared.oracle);
}

std::vector<std::vector<std::size_t>> targeted_selection(const PreparedReuse& prepared, double fraction) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = first_reused(prepared); i < prepared.plan.chunks.size(); ++i) {
    out.push_back(planner::select_tokens(prepared.plan.chunks[i].token_scores, fraction));
  }
  return out;
}

std::vector<std::vector<std::size_t>> random_selection(const PreparedReuse& prepared, double fraction,
                                                       std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = first_reused(prepared); i < prepared.plan.chunks.size(); ++i) {
    const std::size_t n = prepared.plan.chunks[i].span.length;
    const std::vector<double> flat(n, 0.0);
    const std::size_t count = planner::select_tokens(flat, fraction).size();
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count);
    std::sort(all.begin(), all.end());
    out.push_back(std::move(all));
  }
  return out;
}

}  // namespace cachecraft::harness
