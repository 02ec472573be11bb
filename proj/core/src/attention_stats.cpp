#include "cachecraft/attention_stats.hpp"

#include <string>

#include "cachecraft/errors.hpp"

namespace cachecraft::stats {
namespace {

const model::LayerAttention& layer_at(const model::AttentionRecord& attn, std::size_t layer) {
  if (layer >= attn.layers.size()) {
    throw ArgumentError("attention record has no layer " + std::to_string(layer));
  }
  return attn.layers[layer];
}

// Head-mean row for query token t; throws if t had no query at this layer.
RowVector mean_row(const model::LayerAttention& la, std::size_t t) {
  const auto r = la.row_of(t);
  if (r < 0) throw ArgumentError("token " + std::to_string(t) + " has no recorded query row");
  RowVector row = la.heads.front().row(r);
  for (std::size_t h = 1; h < la.heads.size(); ++h) row += la.heads[h].row(r);
  return row / static_cast<double>(la.heads.size());
}

void check_chunk(std::span<const ChunkSpan> spans, std::size_t i) {
  if (i >= spans.size()) throw ArgumentError("chunk index " + std::to_string(i) + " out of range");
}

}  // namespace

void validate_spans(std::span<const ChunkSpan> spans) {
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].length == 0) throw ArgumentError("chunk span of length 0");
    if (i > 0 && spans[i].start < spans[i - 1].end()) {
      throw ArgumentError("chunk spans overlap or are out of order");
    }
  }
}

double inter(const model::AttentionRecord& attn, std::span<const ChunkSpan> spans,
             std::size_t i, std::size_t j, std::size_t layer) {
  if (i >= j) throw ArgumentError("inter(i, j) requires i < j");
  check_chunk(spans, j);
  const auto& la = layer_at(attn, layer);
  double total = 0.0;
  for (std::size_t t = spans[j].start; t < spans[j].end(); ++t) {
    const RowVector row = mean_row(la, t);
    total += row.segment(static_cast<Eigen::Index>(spans[i].start),
                         static_cast<Eigen::Index>(spans[i].length)).sum();
  }
  return total;
}

double intra(const model::AttentionRecord& attn, std::span<const ChunkSpan> spans,
             std::size_t i, std::size_t layer) {
  check_chunk(spans, i);
  const auto& la = layer_at(attn, layer);
  double total = 0.0;
  for (std::size_t t = spans[i].start; t < spans[i].end(); ++t) {
    const RowVector row = mean_row(la, t);
    total += row.segment(static_cast<Eigen::Index>(spans[i].start),
                         static_cast<Eigen::Index>(t - spans[i].start)).sum();
  }
  return total;
}

std::vector<double> token_inter_scores(const model::AttentionRecord& attn,
                                       std::span<const ChunkSpan> spans, std::size_t i) {
  check_chunk(spans, i);
  std::vector<double> scores(spans[i].length, 0.0);
  if (i == 0) return scores;
  for (const auto& la : attn.layers) {
    for (std::size_t k = 0; k < spans[i].length; ++k) {
      const RowVector row = mean_row(la, spans[i].start + k);
      for (std::size_t j = 0; j < i; ++j) {
        scores[k] += row.segment(static_cast<Eigen::Index>(spans[j].start),
                                 static_cast<Eigen::Index>(spans[j].length)).sum();
      }
    }
  }
  return scores;
}

double AttentionStats::inter_total(std::size_t i, std::size_t j) const {
  double total = 0.0;
  for (const auto& l : layers) total += l.inter(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return total;
}

bool AttentionStats::complete(std::size_t chunk) const {
  for (const auto& l : layers) {
    if (!l.complete[chunk]) return false;
  }
  return true;
}

AttentionStats compute_stats(const model::AttentionRecord& attn,
                             std::span<const ChunkSpan> spans) {
  validate_spans(spans);
  const std::size_t k = spans.size();
  AttentionStats stats;
  stats.token_inter.assign(k, {});
  std::vector<std::vector<double>> token_acc(k);
  for (std::size_t c = 0; c < k; ++c) token_acc[c].assign(spans[c].length, 0.0);

  std::size_t n_tokens = spans.empty() ? 0 : spans.back().end();
  if (!attn.layers.empty() && !attn.layers.front().heads.empty()) {
    n_tokens = std::max<std::size_t>(n_tokens,
                                     static_cast<std::size_t>(attn.layers.front().heads.front().cols()));
  }
  std::vector<std::ptrdiff_t> chunk_of(n_tokens, -1);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t t = spans[c].start; t < spans[c].end(); ++t) chunk_of[t] = static_cast<std::ptrdiff_t>(c);
  }

  for (const auto& la : attn.layers) {
    LayerStats ls;
    ls.inter = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    ls.intra.assign(k, 0.0);
    ls.diagonal.assign(k, 0.0);
    ls.outside.assign(k, 0.0);
    ls.complete.assign(k, true);
    const Matrix mean = la.head_mean();

    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t t = spans[c].start; t < spans[c].end(); ++t) {
        if (la.row_of(t) < 0) {
          ls.complete[c] = false;
          break;
        }
      }
    }

    for (std::size_t r = 0; r < la.query_rows.size(); ++r) {
      const std::size_t t = la.query_rows[r];
      const auto owner = chunk_of[t];
      if (owner < 0) continue;
      const auto j = static_cast<std::size_t>(owner);
      if (!ls.complete[j]) continue;
      const double* row = mean.row(static_cast<Eigen::Index>(r)).data();
      for (std::size_t s = 0; s <= t; ++s) {
        const double a = row[s];
        const auto c = chunk_of[s];
        if (c == owner) {
          (s < t ? ls.intra[j] : ls.diagonal[j]) += a;
        } else if (c >= 0) {
          ls.inter(c, owner) += a;
          token_acc[j][t - spans[j].start] += a;
        } else {
          ls.outside[j] += a;
        }
      }
    }
    stats.layers.push_back(std::move(ls));
  }

  stats.a_bar.assign(k, 0.0);
  stats.b_bar.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    if (stats.complete(c)) {
      stats.token_inter[c] = std::move(token_acc[c]);
      std::tie(stats.a_bar[c], stats.b_bar[c]) = context_ratios(stats, spans, c);
    }
  }
  return stats;
}

std::pair<double, double> context_ratios(const AttentionStats& stats,
                                         std::span<const ChunkSpan> spans, std::size_t i) {
  check_chunk(spans, i);
  if (stats.layers.empty()) return {0.0, 0.0};
  const double len_i = static_cast<double>(spans[i].length);
  double a_sum = 0.0;
  double b_sum = 0.0;
  for (const auto& l : stats.layers) {
    for (std::size_t j = 0; j < i; ++j) {
      a_sum += l.inter(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) /
               (len_i * static_cast<double>(spans[j].length));
    }
    b_sum += l.intra[i] / (len_i * len_i);
  }
  const double n_layers = static_cast<double>(stats.layers.size());
  return {a_sum / n_layers, b_sum / n_layers};
}

}  // namespace cachecraft::stats
