#include "cachecraft/recompute_planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "cachecraft/errors.hpp"

namespace cachecraft::planner {
namespace {

using json = nlohmann::json;

// Jumps closer than this count as ties (lowest index wins).
constexpr double kTieTolerance = 1e-12;

std::vector<std::size_t> all_chunks(std::size_t k) {
  std::vector<std::size_t> v(k);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string hex(ChunkHash h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.value));
  return buf;
}

}  // namespace

std::vector<std::size_t> select_tokens(std::span<const double> scores, double cfo) {
  if (!(cfo >= 0.0 && cfo <= 1.0)) throw ArgumentError("select_tokens: cfo must lie in [0, 1]");
  const std::size_t n = scores.size();
  // ceil(cfo * n) with a guard so that 0.3 * 10 does not round up to 4.
  const double raw = cfo * static_cast<double>(n);
  auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  count = std::min(count, n);

  std::vector<std::size_t> idx = all_chunks(n);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> focused_at_layer(std::span<const double> cumulative) {
  const std::size_t k = cumulative.size();
  if (k < 3) throw ArgumentError("focused_at_layer needs at least three chunks");

  std::vector<std::size_t> order = all_chunks(k);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cumulative[a] > cumulative[b]; });

  std::vector<double> diff(k - 1);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    diff[i] = cumulative[order[i]] - cumulative[order[i + 1]];
    total += diff[i];
  }
  if (!(total > 0.0)) return all_chunks(k);

  // Running entropy of the normalised gaps, with 0 log 0 = 0.
  std::vector<double> h(k - 1);
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const double p = diff[i] / total;
    if (p > 0.0) acc -= p * std::log(p);
    h[i] = acc;
  }

  // 1-based i in [1, k-2]: jump h_{i+1} - h_i; F = top i chunks.
  std::size_t best = 1;
  double best_jump = h[1] - h[0];
  for (std::size_t i = 2; i + 1 < k; ++i) {
    const double jump = h[i] - h[i - 1];
    if (jump > best_jump + kTieTolerance) {
      best_jump = jump;
      best = i;
    }
  }
  std::vector<std::size_t> focused(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(best));
  std::sort(focused.begin(), focused.end());
  return focused;
}

FocusTracker::FocusTracker(std::size_t n_chunks, std::size_t window, std::size_t n_layers)
    : n_chunks_(n_chunks), window_(window), n_layers_(n_layers), cumulative_(n_chunks, 0.0) {
  if (window_ == 0) throw ArgumentError("focus window must be at least 1");
  if (n_layers_ == 0) throw ArgumentError("focus tracker needs at least one layer");
}

std::optional<FocusResult> FocusTracker::observe(std::span<const double> layer_scores) {
  if (done_ || n_chunks_ < 3) return std::nullopt;
  if (layer_scores.size() != n_chunks_) throw ArgumentError("focus tracker: wrong number of chunk scores");
  for (std::size_t i = 0; i < n_chunks_; ++i) cumulative_[i] += layer_scores[i];
  history_.push_back(focused_at_layer(cumulative_));

  const std::size_t l = history_.size();
  if (l >= window_) {
    bool stable = true;
    for (std::size_t j = l - window_; j + 1 < l; ++j) {
      if (history_[j] != history_.back()) {
        stable = false;
        break;
      }
    }
    if (stable) {
      done_ = FocusResult{history_.back(), l, false};
      return done_;
    }
  }
  return std::nullopt;
}

FocusResult FocusTracker::fallback() const {
  if (done_) return *done_;
  return FocusResult{all_chunks(n_chunks_), n_layers_, n_chunks_ < 3};
}

FocusResult predict_focused(const std::vector<std::vector<double>>& stream, std::size_t window,
                            std::size_t n_layers) {
  const std::size_t k = stream.empty() ? 0 : stream.front().size();
  FocusTracker tracker(k, window, n_layers);
  for (std::size_t l = 0; l < std::min(n_layers, stream.size()); ++l) {
    if (auto r = tracker.observe(stream[l])) return *r;
  }
  return tracker.fallback();
}

std::size_t InferencePlan::hits() const {
  return static_cast<std::size_t>(std::count_if(chunks.begin(), chunks.end(), [](const ChunkPlan& c) {
    return c.status == ChunkStatus::kHit;
  }));
}

std::size_t InferencePlan::computed_tokens() const {
  std::size_t n = question.length;
  for (const auto& c : chunks) n += c.status == ChunkStatus::kMiss ? c.span.length : c.recompute.size();
  return n;
}

std::size_t InferencePlan::computed_token_layers() const {
  std::size_t n = question.length * n_layers;
  for (const auto& c : chunks) {
    n += c.status == ChunkStatus::kMiss ? c.span.length * n_layers : c.recompute.size() * c.cutoff_layer;
  }
  return n;
}

std::size_t InferencePlan::computed_tokens_at(std::size_t layer) const {
  std::size_t n = question.length;
  for (const auto& c : chunks) {
    if (c.status == ChunkStatus::kMiss) {
      n += c.span.length;
    } else if (layer < c.cutoff_layer) {
      n += c.recompute.size();
    }
  }
  return n;
}

std::vector<ChunkHash> InferencePlan::chunk_ids() const {
  std::vector<ChunkHash> ids;
  ids.reserve(chunks.size());
  for (const auto& c : chunks) ids.push_back(c.chunk);
  return ids;
}

InferencePlan build_plan(const PlanRequest& request, const store::CacheStore& store, double alpha,
                         std::size_t n_layers, std::size_t focus_window) {
  InferencePlan plan;
  plan.n_layers = n_layers;
  plan.focus_window = focus_window;

  std::vector<ChunkHash> ids;
  ids.reserve(request.chunks.size());
  for (const auto& tokens : request.chunks) ids.push_back(store::chunk_hash(tokens));
  const auto variants = store.lookup_many(ids);

  std::size_t cursor = 0;
  for (std::size_t i = 0; i < request.chunks.size(); ++i) {
    ChunkPlan cp;
    cp.chunk = ids[i];
    cp.span = {cursor, request.chunks[i].size()};
    cp.cutoff_layer = n_layers;
    cursor += cp.span.length;

    const std::span<const ChunkHash> new_prefix(ids.data(), i);
    const store::Variant* best = nullptr;
    scoring::ReuseScore best_score;
    for (const auto& v : variants[i]) {
      if (!v.info.payload) continue;
      const auto s = scoring::score(v.info.prefix, v.info.cci, new_prefix, alpha);
      if (best == nullptr || s.cfo < best_score.cfo || (s.cfo == best_score.cfo && v.id < best->id)) {
        best = &v;
        best_score = s;
      }
    }
    if (best != nullptr) {
      cp.status = ChunkStatus::kHit;
      cp.variant = best->id;
      cp.score = best_score;
      cp.token_scores = best->info.token_scores;
      cp.recompute = select_tokens(cp.token_scores, best_score.cfo);
      cp.payload = best->info.payload;
      cp.payload_bytes = best->info.payload->payload_bytes();
    }
    plan.chunks.push_back(std::move(cp));
  }
  plan.question = {cursor, request.question.size()};
  plan.positions.resize(cursor + request.question.size());
  std::iota(plan.positions.begin(), plan.positions.end(), std::size_t{0});
  return plan;
}

InferencePlan apply_early_termination(InferencePlan plan, const FocusResult& focus) {
  for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
    auto& c = plan.chunks[i];
    if (c.status != ChunkStatus::kHit) continue;
    if (std::binary_search(focus.focused.begin(), focus.focused.end(), i)) continue;
    c.cutoff_layer = std::min(c.cutoff_layer, focus.cutoff_layer);
  }
  return plan;
}

InferencePlan with_fixed_fraction(InferencePlan plan, double fraction) {
  for (auto& c : plan.chunks) {
    if (c.status != ChunkStatus::kHit) continue;
    c.score.cfo = fraction;
    c.recompute = select_tokens(c.token_scores, fraction);
  }
  return plan;
}

model::PrefillRequest to_prefill_request(const InferencePlan& plan, const PlanRequest& request) {
  if (request.chunks.size() != plan.chunks.size()) throw PlanError("plan/request chunk count mismatch");
  model::PrefillRequest req;
  const std::size_t n = plan.total_tokens();
  req.positions = plan.positions;
  req.recompute_mask.assign(n, true);
  req.layer_cutoff.assign(n, plan.n_layers);
  for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
    const auto& c = plan.chunks[i];
    if (request.chunks[i].size() != c.span.length) throw PlanError("plan/request chunk length mismatch");
    if (c.status == ChunkStatus::kMiss) {
      req.segments.push_back({request.chunks[i], nullptr});
      continue;
    }
    if (!c.payload) throw PlanError("hit chunk without payload");
    req.segments.push_back({request.chunks[i], c.payload});
    for (std::size_t t = 0; t < c.span.length; ++t) req.recompute_mask[c.span.begin + t] = false;
    for (std::size_t r : c.recompute) {
      if (r >= c.span.length) throw PlanError("recompute index outside chunk");
      req.recompute_mask[c.span.begin + r] = true;
      req.layer_cutoff[c.span.begin + r] = c.cutoff_layer;
    }
  }
  req.segments.push_back({request.question, nullptr});
  req.question = plan.question;
  return req;
}

std::vector<double> question_chunk_attention(const model::LayerAttention& layer,
                                             const InferencePlan& plan) {
  std::vector<double> out(plan.chunks.size(), 0.0);
  const Matrix mean = layer.head_mean();
  for (std::size_t t = plan.question.begin; t < plan.question.end(); ++t) {
    const auto r = layer.row_of(t);
    if (r < 0) throw PlanError("question token without a query row");
    for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
      const auto& s = plan.chunks[i].span;
      out[i] += mean.row(r).segment(static_cast<Eigen::Index>(s.begin),
                                    static_cast<Eigen::Index>(s.length)).sum();
    }
  }
  return out;
}

model::LayerHook make_focus_hook(const InferencePlan& plan,
                                 std::shared_ptr<std::optional<FocusResult>> result) {
  auto tracker = std::make_shared<FocusTracker>(plan.chunks.size(), plan.focus_window, plan.n_layers);
  // Only spans, statuses and recompute sets are needed once the hook runs.
  InferencePlan shape;
  shape.question = plan.question;
  shape.n_layers = plan.n_layers;
  for (const auto& c : plan.chunks) {
    ChunkPlan lite;
    lite.span = c.span;
    lite.status = c.status;
    lite.recompute = c.recompute;
    shape.chunks.push_back(std::move(lite));
  }
  return [tracker, result, shape = std::move(shape)](std::size_t, const model::LayerAttention& layer,
                                                     std::vector<std::size_t>& cutoff) {
    const auto scores = question_chunk_attention(layer, shape);
    const auto focus = tracker->observe(scores);
    if (!focus) return;
    *result = focus;
    for (std::size_t i = 0; i < shape.chunks.size(); ++i) {
      const auto& c = shape.chunks[i];
      if (c.status != ChunkStatus::kHit) continue;
      if (std::binary_search(focus->focused.begin(), focus->focused.end(), i)) continue;
      for (std::size_t r : c.recompute) {
        auto& cut = cutoff[c.span.begin + r];
        cut = std::min(cut, focus->cutoff_layer);
      }
    }
  };
}

void write_plan_json(std::ostream& out, const InferencePlan& plan) {
  json j;
  j["n_layers"] = plan.n_layers;
  j["focus_window"] = plan.focus_window;
  j["question"] = {{"begin", plan.question.begin}, {"length", plan.question.length}};
  j["positions"] = plan.positions;
  json chunks = json::array();
  for (const auto& c : plan.chunks) {
    json e = {{"chunk", hex(c.chunk)},
              {"start", c.span.begin},
              {"length", c.span.length},
              {"status", c.status == ChunkStatus::kHit ? "hit" : "miss"}};
    if (c.status == ChunkStatus::kHit) {
      e["variant"] = c.variant;
      e["cfo"] = c.score.cfo;
      e["beta"] = c.score.beta;
      e["gamma"] = c.score.gamma;
      e["beta_prime"] = c.score.beta_prime;
      e["cci"] = c.score.cci;
      e["recompute"] = c.recompute;
      e["token_scores"] = c.token_scores;
      e["cutoff_layer"] = c.cutoff_layer;
      e["payload_bytes"] = c.payload_bytes;
    }
    chunks.push_back(std::move(e));
  }
  j["chunks"] = std::move(chunks);
  out << j.dump(2) << '\n';
}

InferencePlan read_plan_json(std::istream& in) {
  try {
    json j;
    in >> j;
    InferencePlan plan;
    plan.n_layers = j.at("n_layers").get<std::size_t>();
    plan.focus_window = j.at("focus_window").get<std::size_t>();
    plan.question = {j.at("question").at("begin").get<std::size_t>(),
                     j.at("question").at("length").get<std::size_t>()};
    plan.positions = j.at("positions").get<std::vector<std::size_t>>();
    for (const auto& e : j.at("chunks")) {
      ChunkPlan c;
      c.chunk = ChunkHash{std::stoull(e.at("chunk").get<std::string>(), nullptr, 16)};
      c.span = {e.at("start").get<std::size_t>(), e.at("length").get<std::size_t>()};
      c.cutoff_layer = plan.n_layers;
      if (e.at("status").get<std::string>() == "hit") {
        c.status = ChunkStatus::kHit;
        c.variant = e.at("variant").get<VariantId>();
        c.score.cfo = e.at("cfo").get<double>();
        c.score.beta = e.at("beta").get<double>();
        c.score.gamma = e.at("gamma").get<double>();
        c.score.beta_prime = e.at("beta_prime").get<double>();
        c.score.cci = e.at("cci").get<double>();
        c.recompute = e.at("recompute").get<std::vector<std::size_t>>();
        c.token_scores = e.at("token_scores").get<std::vector<double>>();
        c.cutoff_layer = e.at("cutoff_layer").get<std::size_t>();
        c.payload_bytes = e.at("payload_bytes").get<std::size_t>();
      }
      plan.chunks.push_back(std::move(c));
    }
    return plan;
  } catch (const json::exception& e) {
    throw IoError(std::string("plan json: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw IoError("plan json: bad chunk hash");
  }
}

}  // namespace cachecraft::planner
