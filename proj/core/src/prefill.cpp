#include "cachecraft/prefill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cachecraft/errors.hpp"
#include "cachecraft/rope.hpp"

namespace cachecraft::model {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

Matrix feed_forward(const LayerWeights& w, const Matrix& x) {
  Matrix up = rms_norm(x) * w.w_up;
  up.rowwise() += w.b_up;
  Matrix down = gelu(up) * w.w_down;
  down.rowwise() += w.b_down;
  return down;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const double mx = row.maxCoeff();
    // A row with no admissible key cannot occur: every query sees itself.
    // Vectorised exp may return a denormal for -inf; masked keys must be 0.
    row = (row.array() == kNegInf).select(0.0, (row.array() - mx).exp());
    row /= row.sum();
  }
}

// Key/value slot layout: every token owns one slot; padded caches add
// masked slots right after their segment's tokens.
struct SlotLayout {
  std::vector<std::ptrdiff_t> slot_token;  // -1 for padding
  std::vector<std::size_t> slot_position;
  std::vector<std::size_t> token_slot;
  // For padding slots: owning segment and row inside its cache.
  std::vector<std::size_t> pad_segment;
  std::vector<std::size_t> pad_row;
};

struct TokenOrigin {
  std::size_t segment = 0;
  std::size_t row = 0;
};

}  // namespace

std::size_t PrefillRequest::n_tokens() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.tokens.size();
  return n;
}

PrefillRequest PrefillRequest::plain(const TokenIds& tokens, std::size_t question_len) {
  PrefillRequest req;
  req.segments.push_back({tokens, nullptr});
  req.positions.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) req.positions[i] = i;
  req.recompute_mask.assign(tokens.size(), true);
  question_len = std::min(question_len, tokens.size());
  req.question = {tokens.size() - question_len, question_len};
  return req;
}

Matrix LayerAttention::head_mean() const {
  if (heads.empty()) return {};
  Matrix m = heads.front();
  for (std::size_t h = 1; h < heads.size(); ++h) m += heads[h];
  return m / static_cast<double>(heads.size());
}

std::ptrdiff_t LayerAttention::row_of(std::size_t t) const {
  const auto it = std::lower_bound(query_rows.begin(), query_rows.end(), t);
  if (it == query_rows.end() || *it != t) return -1;
  return it - query_rows.begin();
}

ChunkCache PrefillResult::extract_cache(TokenSpan span) const {
  ChunkCache cache;
  cache.n_tokens = span.length;
  cache.layers.reserve(kv.size());
  const auto b = static_cast<Eigen::Index>(span.begin);
  const auto n = static_cast<Eigen::Index>(span.length);
  for (const auto& layer : kv) {
    cache.layers.push_back({layer.keys.middleRows(b, n), layer.values.middleRows(b, n)});
  }
  return cache;
}

PrefillResult prefill(const Model& model, const PrefillRequest& request,
                      const PrefillOptions& options) {
  const auto& cfg = model.config();
  const std::size_t L = cfg.n_layers;
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.d_head;
  const std::size_t n = request.n_tokens();

  if (n == 0) throw PlanError("prefill: empty request");
  if (request.positions.size() != n) throw PlanError("prefill: positions length != token count");
  if (request.recompute_mask.size() != n) throw PlanError("prefill: mask length != token count");
  if (!request.layer_cutoff.empty() && request.layer_cutoff.size() != n) {
    throw PlanError("prefill: layer_cutoff length != token count");
  }
  for (std::size_t t = 1; t < n; ++t) {
    if (request.positions[t] <= request.positions[t - 1]) {
      throw PlanError("prefill: positions must be strictly increasing");
    }
  }
  if (request.question.end() > n) throw PlanError("prefill: question span out of range");

  std::vector<TokenOrigin> origin(n);
  PrefillResult result;
  result.tokens.reserve(n);
  for (std::size_t s = 0, t = 0; s < request.segments.size(); ++s) {
    const auto& seg = request.segments[s];
    if (seg.cache) {
      if (seg.cache->n_tokens != seg.tokens.size()) {
        throw PlanError("prefill: injected cache has " + std::to_string(seg.cache->n_tokens) +
                        " tokens, segment declares " + std::to_string(seg.tokens.size()));
      }
      if (seg.cache->n_layers() != L || seg.cache->d_model() != d) {
        throw PlanError("prefill: injected cache shape does not match the model");
      }
      seg.cache->check_shape();
    }
    for (std::size_t r = 0; r < seg.tokens.size(); ++r, ++t) {
      if (seg.tokens[r] < 0 || static_cast<std::size_t>(seg.tokens[r]) >= cfg.vocab_size) {
        throw PlanError("prefill: token id out of vocabulary");
      }
      origin[t] = {s, r};
      result.tokens.push_back(seg.tokens[r]);
    }
  }

  std::vector<std::size_t> depth(n, 0);
  for (std::size_t t = 0; t < n; ++t) {
    if (request.recompute_mask[t]) {
      depth[t] = request.layer_cutoff.empty() ? L : std::min(L, request.layer_cutoff[t]);
    }
  }
  auto has_cache = [&](std::size_t t) {
    return static_cast<bool>(request.segments[origin[t].segment].cache);
  };
  auto check_depths = [&] {
    for (std::size_t t = 0; t < n; ++t) {
      if (depth[t] < L && !has_cache(t)) {
        throw PlanError("prefill: token " + std::to_string(t) +
                        " is not fully recomputed but has no injected cache");
      }
      if (request.question.contains(t) && depth[t] != L) {
        throw PlanError("prefill: question token " + std::to_string(t) + " must be recomputed");
      }
    }
  };
  check_depths();

  SlotLayout slots;
  slots.token_slot.resize(n);
  for (std::size_t s = 0, t = 0; s < request.segments.size(); ++s) {
    const auto& seg = request.segments[s];
    for (std::size_t r = 0; r < seg.tokens.size(); ++r, ++t) {
      slots.token_slot[t] = slots.slot_token.size();
      slots.slot_token.push_back(static_cast<std::ptrdiff_t>(t));
      slots.slot_position.push_back(request.positions[t]);
    }
    if (seg.cache && seg.cache->pad > 0) {
      const std::size_t anchor = t > 0 ? request.positions[t - 1] : 0;
      for (std::size_t p = 0; p < seg.cache->pad; ++p) {
        slots.slot_token.push_back(-1);
        slots.slot_position.push_back(anchor);
        slots.pad_segment.push_back(s);
        slots.pad_row.push_back(seg.cache->n_tokens + p);
      }
    }
  }
  const std::size_t n_slots = slots.slot_token.size();

  result.positions = request.positions;
  result.hidden = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t t = 0; t < n; ++t) {
    if (depth[t] > 0) {
      result.hidden.row(static_cast<Eigen::Index>(t)) =
          model.embedding().row(result.tokens[t]);
    }
  }
  result.kv.resize(L);
  if (options.record_context) {
    result.context.resize(L);
    result.attended_values.resize(L);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < L; ++l) {
    const auto& w = model.layers()[l];
    std::vector<std::size_t> active;
    for (std::size_t t = 0; t < n; ++t) {
      if (depth[t] > l) active.push_back(t);
    }
    const auto na = static_cast<Eigen::Index>(active.size());

    const Matrix x = gather_rows(result.hidden, active);
    const Matrix xn = rms_norm(x);
    const Matrix q = xn * w.wq;
    const Matrix k = xn * w.wk;
    const Matrix v = xn * w.wv;

    auto& kv = result.kv[l];
    kv.keys.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    kv.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t t = 0, a = 0; t < n; ++t) {
      const auto row = static_cast<Eigen::Index>(t);
      if (a < active.size() && active[a] == t) {
        kv.keys.row(row) = k.row(static_cast<Eigen::Index>(a));
        kv.values.row(row) = v.row(static_cast<Eigen::Index>(a));
        ++a;
      } else {
        const auto& src = request.segments[origin[t].segment].cache->layers[l];
        kv.keys.row(row) = src.keys.row(static_cast<Eigen::Index>(origin[t].row));
        kv.values.row(row) = src.values.row(static_cast<Eigen::Index>(origin[t].row));
      }
    }

    Matrix slot_keys(static_cast<Eigen::Index>(n_slots), static_cast<Eigen::Index>(d));
    Matrix slot_values(static_cast<Eigen::Index>(n_slots), static_cast<Eigen::Index>(d));
    for (std::size_t s = 0, p = 0; s < n_slots; ++s) {
      const auto row = static_cast<Eigen::Index>(s);
      if (slots.slot_token[s] >= 0) {
        const auto t = static_cast<Eigen::Index>(slots.slot_token[s]);
        slot_keys.row(row) = kv.keys.row(t);
        slot_values.row(row) = kv.values.row(t);
      } else {
        const auto& src = request.segments[slots.pad_segment[p]].cache->layers[l];
        slot_keys.row(row) = src.keys.row(static_cast<Eigen::Index>(slots.pad_row[p]));
        slot_values.row(row) = src.values.row(static_cast<Eigen::Index>(slots.pad_row[p]));
        ++p;
      }
    }
    const Matrix keys_rot = apply_rpe(slot_keys, slots.slot_position, dh, cfg.rpe_base);
    std::vector<std::size_t> q_pos(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) q_pos[a] = request.positions[active[a]];
    const Matrix q_rot = apply_rpe(q, q_pos, dh, cfg.rpe_base);

    LayerAttention layer_attn;
    layer_attn.query_rows = active;
    Matrix ctx(na, static_cast<Eigen::Index>(d));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * dh);
      const auto hd = static_cast<Eigen::Index>(dh);
      Matrix scores = (q_rot.middleCols(off, hd) * keys_rot.middleCols(off, hd).transpose()) * scale;
      for (Eigen::Index a = 0; a < na; ++a) {
        const auto t = static_cast<std::ptrdiff_t>(active[static_cast<std::size_t>(a)]);
        for (std::size_t s = 0; s < n_slots; ++s) {
          const auto st = slots.slot_token[s];
          if (st < 0 || st > t) scores(a, static_cast<Eigen::Index>(s)) = kNegInf;
        }
      }
      softmax_rows(scores);
      ctx.middleCols(off, hd) = scores * slot_values.middleCols(off, hd);
      if (options.record_attention || options.on_layer) {
        Matrix probs(na, static_cast<Eigen::Index>(n));
        for (std::size_t t = 0; t < n; ++t) {
          probs.col(static_cast<Eigen::Index>(t)) =
              scores.col(static_cast<Eigen::Index>(slots.token_slot[t]));
        }
        layer_attn.heads.push_back(std::move(probs));
      }
    }

    Matrix out = x + ctx * w.wo;
    out += feed_forward(w, out);
    for (std::size_t a = 0; a < active.size(); ++a) {
      result.hidden.row(static_cast<Eigen::Index>(active[a])) = out.row(static_cast<Eigen::Index>(a));
    }
    if (options.record_context) {
      result.context[l] = std::move(ctx);
      result.attended_values[l] = kv.values;
    }

    if (options.on_layer) {
      std::vector<std::size_t> proposed = depth;
      options.on_layer(l, layer_attn, proposed);
      for (std::size_t t = 0; t < n; ++t) {
        if (proposed[t] > depth[t]) throw PlanError("layer hook may only lower cutoffs");
        if (proposed[t] < depth[t] && proposed[t] < l + 1) {
          throw PlanError("layer hook cannot stop a token before the current layer");
        }
      }
      depth = std::move(proposed);
      check_depths();
    }
    if (options.record_attention) result.attention.layers.push_back(std::move(layer_attn));
  }

  result.computed_layers = depth;
  result.has_final_hidden.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    result.has_final_hidden[t] = depth[t] == L;
    if (depth[t] != L) result.hidden.row(static_cast<Eigen::Index>(t)).setZero();
  }
  return result;
}

PrefillResult plain_prefill(const Model& model, const TokenIds& tokens, std::size_t question_len,
                            const PrefillOptions& options) {
  return prefill(model, PrefillRequest::plain(tokens, question_len), options);
}

DecodeState DecodeState::from(const PrefillResult& result) {
  if (result.tokens.empty() || result.kv.empty()) throw PlanError("decode: empty prefill result");
  if (!result.has_final_hidden.back()) {
    throw PlanError("decode: last prompt token has no final hidden state");
  }
  DecodeState state;
  state.kv = result.kv;
  state.positions = result.positions;
  state.last_hidden = result.hidden.row(result.hidden.rows() - 1);
  return state;
}

TokenIds decode(const Model& model, DecodeState& state, std::size_t max_steps) {
  const auto& cfg = model.config();
  const std::size_t dh = cfg.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  TokenIds out;
  out.reserve(max_steps);

  for (std::size_t step = 0; step < max_steps; ++step) {
    const Matrix logits = rms_norm(state.last_hidden) * model.lm_head();
    Eigen::Index best = 0;
    logits.row(0).maxCoeff(&best);
    const auto token = static_cast<TokenId>(best);
    out.push_back(token);

    const std::size_t pos = state.positions.empty() ? 0 : state.positions.back() + 1;
    state.positions.push_back(pos);
    const std::vector<std::size_t> q_pos{pos};
    Matrix x = model.embedding().row(token);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& w = model.layers()[l];
      const Matrix xn = rms_norm(x);
      const Matrix q = xn * w.wq;
      auto& kv = state.kv[l];
      const auto rows = kv.keys.rows();
      kv.keys.conservativeResize(rows + 1, Eigen::NoChange);
      kv.values.conservativeResize(rows + 1, Eigen::NoChange);
      kv.keys.row(rows) = xn * w.wk;
      kv.values.row(rows) = xn * w.wv;

      const Matrix keys_rot = apply_rpe(kv.keys, state.positions, dh, cfg.rpe_base);
      const Matrix q_rot = apply_rpe(q, q_pos, dh, cfg.rpe_base);
      Matrix ctx(1, static_cast<Eigen::Index>(cfg.d_model));
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h * dh);
        const auto hd = static_cast<Eigen::Index>(dh);
        Matrix scores = (q_rot.middleCols(off, hd) * keys_rot.middleCols(off, hd).transpose()) * scale;
        softmax_rows(scores);
        ctx.middleCols(off, hd) = scores * kv.values.middleCols(off, hd);
      }
      x = x + ctx * w.wo;
      x += feed_forward(w, x);
    }
    state.last_hidden = x.row(0);
  }
  return out;
}

double mean_row_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mean_row_distance: shape mismatch");
  if (a.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) total += (a.row(r) - b.row(r)).norm();
  return total / static_cast<double>(a.rows());
}

}  // namespace cachecraft::model
