#include "cachecraft/replay.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <list>
#include <map>
#include <memory>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "cachecraft/attention_stats.hpp"
#include "cachecraft/errors.hpp"
#include "cachecraft/prefill.hpp"
#include "cachecraft/recompute_planner.hpp"

namespace cachecraft::harness {
namespace {

using json = nlohmann::ordered_json;
using planner::ChunkStatus;
using workload::ChunkId;

std::string fmt6(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

double round6(double x) { return std::strtod(fmt6(x).c_str(), nullptr); }

// Exact-prefix reuse: a chunk's cache is keyed by the ids of every chunk up
// to and including it, so it is reused only behind an identical prefix.
class PrefixCache {
 public:
  explicit PrefixCache(std::size_t capacity) : capacity_(capacity) {}

  std::shared_ptr<const model::ChunkCache> find(const std::vector<ChunkId>& key) {
    auto it = index_.find(key);
    if (it == index_.end()) return nullptr;
    lru_.splice(lru_.begin(), lru_, it->second);
    return it->second->second;
  }

  void put(const std::vector<ChunkId>& key, std::shared_ptr<const model::ChunkCache> payload) {
    if (capacity_ == 0) return;
    if (auto it = index_.find(key); it != index_.end()) {
      it->second->second = std::move(payload);
      lru_.splice(lru_.begin(), lru_, it->second);
      return;
    }
    lru_.emplace_front(key, std::move(payload));
    index_[key] = lru_.begin();
    while (lru_.size() > capacity_) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
  }

 private:
  using Entry = std::pair<std::vector<ChunkId>, std::shared_ptr<const model::ChunkCache>>;
  std::size_t capacity_;
  std::list<Entry> lru_;
  std::map<std::vector<ChunkId>, std::list<Entry>::iterator> index_;
};

planner::PlanRequest make_request(const workload::Trace& trace, const workload::TraceRecord& rec) {
  if (rec.question.empty()) {
    throw ArgumentError("request " + std::to_string(rec.id) + " has an empty question");
  }
  planner::PlanRequest req;
  for (ChunkId c : rec.chunks) req.chunks.push_back(trace.corpus.tokens(c));
  req.question = rec.question;
  return req;
}

// Hits reuse the most recently created variant as is.
planner::InferencePlan naive_plan(const planner::PlanRequest& req, const store::CacheStore& store,
                                  std::size_t n_layers, std::size_t window) {
  auto plan = planner::build_plan(req, store, 1.0, n_layers, window);
  for (auto& c : plan.chunks) {
    if (c.status != ChunkStatus::kHit) continue;
    const auto variants = store.lookup(c.chunk);
    const store::Variant* newest = nullptr;
    for (const auto& v : variants) {
      if (v.info.payload && (newest == nullptr || v.created_at > newest->created_at)) newest = &v;
    }
    c.variant = newest->id;
    c.payload = newest->info.payload;
    c.payload_bytes = newest->info.payload->payload_bytes();
    c.token_scores = newest->info.token_scores;
    c.score = {};
    c.score.cfo = 0.0;
    c.recompute.clear();
  }
  return plan;
}

void insert_fresh_chunks(store::CacheStore& store, const planner::InferencePlan& plan,
                         const model::PrefillResult& result) {
  std::vector<stats::ChunkSpan> spans;
  for (const auto& c : plan.chunks) spans.push_back({c.chunk, c.span.begin, c.span.length});
  const auto st = stats::compute_stats(result.attention, spans);
  for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
    const auto& c = plan.chunks[i];
    const bool fresh = c.status == ChunkStatus::kMiss ||
                       (c.recompute.size() == c.span.length && c.cutoff_layer >= plan.n_layers);
    if (!fresh || !st.complete(i)) continue;
    store::VariantInfo info;
    for (std::size_t j = 0; j < i; ++j) {
      const ChunkHash id = plan.chunks[j].chunk;
      if (id == c.chunk || std::find(info.prefix.ids.begin(), info.prefix.ids.end(), id) != info.prefix.ids.end()) {
        continue;
      }
      info.prefix.ids.push_back(id);
      info.prefix.weights.push_back(st.inter_total(j, i));
    }
    const auto [a, b] = stats::context_ratios(st, spans, i);
    info.a_bar = a;
    info.b_bar = b;
    info.cci = scoring::cci(a, b);
    info.token_scores = st.token_inter[i];
    info.payload = std::make_shared<const model::ChunkCache>(result.extract_cache(c.span));
    store.insert(c.chunk, std::move(info));
  }
}

RequestRow account(const workload::TraceRecord& rec, const planner::InferencePlan& plan) {
  RequestRow row;
  row.id = rec.id;
  row.k = plan.chunks.size();
  row.total_tokens = plan.total_tokens();
  row.tokens_computed = plan.computed_tokens();
  row.tokens_reused = row.total_tokens - row.tokens_computed;
  row.token_layers_computed = plan.computed_token_layers();
  row.recompute_fraction =
      static_cast<double>(row.tokens_computed) / static_cast<double>(row.total_tokens);
  double cfo_sum = 0.0;
  for (const auto& c : plan.chunks) {
    if (c.status != ChunkStatus::kHit) continue;
    ++row.hits;
    row.hit_tokens += c.span.length;
    row.hit_tokens_recomputed += c.recompute.size();
    cfo_sum += c.score.cfo;
  }
  if (row.hits > 0) row.mean_cfo = cfo_sum / static_cast<double>(row.hits);
  return row;
}

void write_row_json(json& out, const RequestRow& r) {
  out = json{{"id", r.id},
             {"k", r.k},
             {"hits", r.hits},
             {"total_tokens", r.total_tokens},
             {"tokens_computed", r.tokens_computed},
             {"tokens_reused", r.tokens_reused},
             {"hit_tokens", r.hit_tokens},
             {"hit_tokens_recomputed", r.hit_tokens_recomputed},
             {"token_layers_computed", r.token_layers_computed},
             {"recompute_fraction", round6(r.recompute_fraction)},
             {"mean_cfo", round6(r.mean_cfo)},
             {"deviation", round6(r.deviation)},
             {"ttft", round6(r.ttft)},
             {"queue_wait", round6(r.queue_wait)}};
}

}  // namespace

Policy parse_policy(std::string_view name) {
  if (name == "cachecraft") return Policy::kCacheCraft;
  if (name == "full_recompute") return Policy::kFullRecompute;
  if (name == "full_cache_naive") return Policy::kFullCacheNaive;
  if (name == "exact_prefix") return Policy::kExactPrefix;
  throw ArgumentError("unknown policy '" + std::string(name) + "'");
}

std::string_view policy_name(Policy policy) {
  switch (policy) {
    case Policy::kCacheCraft:
      return "cachecraft";
    case Policy::kFullRecompute:
      return "full_recompute";
    case Policy::kFullCacheNaive:
      return "full_cache_naive";
    case Policy::kExactPrefix:
      return "exact_prefix";
  }
  throw ArgumentError("unknown policy");
}

ReplayConfig ReplayConfig::from_config(const KeyValueConfig& cfg, std::size_t n_layers) {
  ReplayConfig rc;
  rc.policy = parse_policy(cfg.get_string("replay.policy", "cachecraft"));
  rc.alpha = cfg.get_double("replay.alpha", rc.alpha);
  rc.warmup = cfg.get_size("replay.warmup", rc.warmup);
  rc.early_termination = cfg.get_bool("replay.early_termination", rc.early_termination);
  rc.focus_window = cfg.get_size("replay.focus_window", rc.focus_window);
  rc.fallback = cfg.get_bool("replay.fallback", rc.fallback);
  rc.store = store::StoreConfig::from_config(cfg);
  rc.tiers = sim::TierConfig::from_config(cfg, n_layers);
  return rc;
}

Aggregate Report::aggregate() const {
  Aggregate a;
  a.requests = rows.size();
  std::size_t hit_tokens = 0;
  std::size_t hit_recomputed = 0;
  std::size_t with_hits = 0;
  for (const auto& r : rows) {
    a.total_tokens += r.total_tokens;
    a.tokens_computed += r.tokens_computed;
    a.tokens_reused += r.tokens_reused;
    a.chunks += r.k;
    a.hits += r.hits;
    hit_tokens += r.hit_tokens;
    hit_recomputed += r.hit_tokens_recomputed;
    a.mean_deviation += r.deviation;
    a.mean_ttft += r.ttft;
    a.mean_queue_wait += r.queue_wait;
    if (r.hits > 0) {
      a.mean_cfo += r.mean_cfo;
      ++with_hits;
    }
  }
  if (a.requests > 0) {
    const auto n = static_cast<double>(a.requests);
    a.mean_deviation /= n;
    a.mean_ttft /= n;
    a.mean_queue_wait /= n;
  }
  if (a.total_tokens > 0) {
    a.recompute_fraction = static_cast<double>(a.tokens_computed) / static_cast<double>(a.total_tokens);
  }
  if (a.chunks > 0) a.hit_rate = static_cast<double>(a.hits) / static_cast<double>(a.chunks);
  if (hit_tokens > 0) {
    a.hit_recompute_fraction = static_cast<double>(hit_recomputed) / static_cast<double>(hit_tokens);
  }
  if (with_hits > 0) a.mean_cfo /= static_cast<double>(with_hits);
  return a;
}

std::vector<double> Report::cumulative_hit_rate() const {
  std::vector<double> out;
  out.reserve(rows.size());
  std::size_t hits = 0;
  std::size_t chunks = 0;
  for (const auto& r : rows) {
    hits += r.hits;
    chunks += r.k;
    out.push_back(chunks == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(chunks));
  }
  return out;
}

const Matrix& OracleCache::question_hidden(const model::Model& model, const workload::Trace& trace,
                                           const workload::TraceRecord& record) {
  if (auto it = entries_.find(record.id); it != entries_.end()) return it->second;
  const auto req = make_request(trace, record);
  TokenIds tokens;
  for (const auto& c : req.chunks) tokens.insert(tokens.end(), c.begin(), c.end());
  tokens.insert(tokens.end(), req.question.begin(), req.question.end());
  model::PrefillOptions options;
  options.record_attention = false;
  const auto result = model::plain_prefill(model, tokens, req.question.size(), options);
  const model::TokenSpan q{tokens.size() - req.question.size(), req.question.size()};
  return entries_.emplace(record.id, result.rows(q)).first->second;
}

Report replay(const workload::Trace& trace, const model::Model& model, const ReplayConfig& config,
              OracleCache* oracle) {
  workload::validate_trace(trace.records);
  config.store.validate();
  const std::size_t n_layers = model.config().n_layers;
  sim::TierConfig tiers = config.tiers;
  tiers.n_layers = n_layers;
  tiers.validate();

  OracleCache local;
  OracleCache& reference = oracle != nullptr ? *oracle : local;
  store::CacheStore store(config.store);
  const store::CacheStore empty_store(config.store);
  PrefixCache prefix_cache(config.store.capacity());

  Report report;
  report.policy = std::string(policy_name(config.policy));
  report.alpha = config.alpha;
  report.warmup = config.warmup;

  double server_free = 0.0;
  for (std::size_t idx = 0; idx < trace.records.size(); ++idx) {
    const auto& rec = trace.records[idx];
    const auto req = make_request(trace, rec);
    const double queue_wait = std::max(0.0, server_free - rec.arrival_s);

    planner::InferencePlan plan;
    sim::Placement placement;
    double deviation = 0.0;
    std::optional<model::PrefillResult> result;
    std::vector<std::vector<ChunkId>> prefix_keys;

    switch (config.policy) {
      case Policy::kFullRecompute:
        plan = planner::build_plan(req, empty_store, config.alpha, n_layers, config.focus_window);
        break;
      case Policy::kCacheCraft:
        plan = planner::build_plan(req, store, config.alpha, n_layers, config.focus_window);
        if (config.fixed_fraction) plan = planner::with_fixed_fraction(std::move(plan), *config.fixed_fraction);
        placement = sim::place_and_migrate(store.census(), tiers);
        if (config.fallback && plan.hits() > 0) {
          plan = sim::fallback_decision(std::move(plan), placement, tiers, queue_wait);
        }
        break;
      case Policy::kFullCacheNaive:
        plan = naive_plan(req, store, n_layers, config.focus_window);
        placement = sim::place_and_migrate(store.census(), tiers);
        break;
      case Policy::kExactPrefix: {
        plan = planner::build_plan(req, empty_store, config.alpha, n_layers, config.focus_window);
        std::vector<ChunkId> key;
        bool matching = true;
        for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
          key.push_back(rec.chunks[i]);
          prefix_keys.push_back(key);
          if (!matching) continue;
          auto payload = prefix_cache.find(key);
          if (!payload) {
            matching = false;
            continue;
          }
          auto& c = plan.chunks[i];
          c.status = ChunkStatus::kHit;
          c.variant = i + 1;
          c.payload = payload;
          c.payload_bytes = payload->payload_bytes();
          c.score = {};
          c.score.cfo = 0.0;
          placement[c.variant] = 0;
        }
        break;
      }
    }

    if (config.policy != Policy::kFullRecompute) {
      model::PrefillOptions options;
      options.record_attention = config.policy != Policy::kExactPrefix;
      auto focus = std::make_shared<std::optional<planner::FocusResult>>();
      if (config.policy == Policy::kCacheCraft && config.early_termination && plan.hits() > 0) {
        options.on_layer = planner::make_focus_hook(plan, focus);
      }
      result = model::prefill(model, planner::to_prefill_request(plan, req), options);
      if (*focus) plan = planner::apply_early_termination(std::move(plan), **focus);
      deviation = model::mean_row_distance(result->rows(plan.question),
                                           reference.question_hidden(model, trace, rec));
    }

    const auto timeline = sim::simulate(plan, placement, tiers, queue_wait);
    server_free = rec.arrival_s + timeline.ttft;

    switch (config.policy) {
      case Policy::kCacheCraft:
      case Policy::kFullCacheNaive:
        for (const auto& c : plan.chunks) {
          if (c.status == ChunkStatus::kHit) store.touch(c.variant, c.score.cfo);
        }
        insert_fresh_chunks(store, plan, *result);
        break;
      case Policy::kExactPrefix:
        for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
          const auto& c = plan.chunks[i];
          if (c.status == ChunkStatus::kHit) continue;
          prefix_cache.put(prefix_keys[i], std::make_shared<const model::ChunkCache>(result->extract_cache(c.span)));
        }
        break;
      case Policy::kFullRecompute:
        break;
    }

    if (idx < config.warmup) continue;
    RequestRow row = account(rec, plan);
    row.deviation = deviation;
    row.ttft = timeline.ttft;
    row.queue_wait = queue_wait;
    report.rows.push_back(row);
  }
  if (!config.save_store.empty() &&
      (config.policy == Policy::kCacheCraft || config.policy == Policy::kFullCacheNaive)) {
    store.save(config.save_store);
  }
  return report;
}

CalibrationRun calibrate(const workload::Trace& trace, const model::Model& model, ReplayConfig config,
                         std::span<const double> grid, double quality_target, OracleCache* oracle) {
  OracleCache local;
  OracleCache* reference = oracle != nullptr ? oracle : &local;
  CalibrationRun run;
  ReplayConfig naive = config;
  naive.policy = Policy::kFullCacheNaive;
  run.naive_deviation = replay(trace, model, naive, reference).aggregate().mean_deviation;

  config.policy = Policy::kCacheCraft;
  const auto evaluate = [&](double alpha) {
    config.alpha = alpha;
    const auto agg = replay(trace, model, config, reference).aggregate();
    double quality = 1.0;
    if (run.naive_deviation > 0.0) {
      quality = std::clamp(1.0 - agg.mean_deviation / run.naive_deviation, 0.0, 1.0);
    }
    return scoring::Evaluation{agg.mean_cfo, quality};
  };
  run.calibration = scoring::calibrate_alpha(grid, evaluate, quality_target);
  return run;
}

double alpha_for_recompute(const workload::Trace& trace, const model::Model& model, ReplayConfig config,
                           std::span<const double> grid, double target, OracleCache* oracle) {
  if (grid.empty()) throw ArgumentError("alpha_for_recompute: empty grid");
  config.policy = Policy::kCacheCraft;
  double best_alpha = grid.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (double alpha : grid) {
    config.alpha = alpha;
    const double f = replay(trace, model, config, oracle).aggregate().hit_recompute_fraction;
    const double err = std::abs(f - target);
    if (err < best_err) {
      best_err = err;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

Format parse_format(std::string_view name) {
  if (name == "csv") return Format::kCsv;
  if (name == "json") return Format::kJson;
  throw ArgumentError("unknown format '" + std::string(name) + "'");
}

void write_report_csv(std::ostream& out, const Report& report) {
  out << "id,k,hits,total_tokens,tokens_computed,tokens_reused,hit_tokens,hit_tokens_recomputed,"
         "token_layers_computed,recompute_fraction,mean_cfo,deviation,ttft,queue_wait\n";
  for (const auto& r : report.rows) {
    out << r.id << ',' << r.k << ',' << r.hits << ',' << r.total_tokens << ',' << r.tokens_computed << ','
        << r.tokens_reused << ',' << r.hit_tokens << ',' << r.hit_tokens_recomputed << ','
        << r.token_layers_computed << ',' << fmt6(r.recompute_fraction) << ',' << fmt6(r.mean_cfo) << ','
        << fmt6(r.deviation) << ',' << fmt6(r.ttft) << ',' << fmt6(r.queue_wait) << '\n';
  }
}

void write_report_json(std::ostream& out, const Report& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    write_row_json(row, r);
    rows.push_back(std::move(row));
  }
  json j = {{"policy", report.policy},
            {"alpha", round6(report.alpha)},
            {"warmup", report.warmup},
            {"rows", std::move(rows)}};
  out << j.dump(1) << '\n';
}

Report read_report_json(std::istream& in) {
  try {
    json j;
    in >> j;
    Report report;
    report.policy = j.at("policy").get<std::string>();
    report.alpha = j.at("alpha").get<double>();
    report.warmup = j.at("warmup").get<std::size_t>();
    for (const auto& e : j.at("rows")) {
      RequestRow r;
      r.id = e.at("id").get<std::uint64_t>();
      r.k = e.at("k").get<std::size_t>();
      r.hits = e.at("hits").get<std::size_t>();
      r.total_tokens = e.at("total_tokens").get<std::size_t>();
      r.tokens_computed = e.at("tokens_computed").get<std::size_t>();
      r.tokens_reused = e.at("tokens_reused").get<std::size_t>();
      r.hit_tokens = e.at("hit_tokens").get<std::size_t>();
      r.hit_tokens_recomputed = e.at("hit_tokens_recomputed").get<std::size_t>();
      r.token_layers_computed = e.at("token_layers_computed").get<std::size_t>();
      r.recompute_fraction = e.at("recompute_fraction").get<double>();
      r.mean_cfo = e.at("mean_cfo").get<double>();
      r.deviation = e.at("deviation").get<double>();
      r.ttft = e.at("ttft").get<double>();
      r.queue_wait = e.at("queue_wait").get<double>();
      report.rows.push_back(r);
    }
    return report;
  } catch (const json::exception& e) {
    throw IoError(std::string("report: ") + e.what());
  }
}

Report rounded(const Report& report) {
  Report out = report;
  out.alpha = round6(out.alpha);
  for (auto& r : out.rows) {
    r.recompute_fraction = round6(r.recompute_fraction);
    r.mean_cfo = round6(r.mean_cfo);
    r.deviation = round6(r.deviation);
    r.ttft = round6(r.ttft);
    r.queue_wait = round6(r.queue_wait);
  }
  return out;
}

void export_report(const Report& report, const std::filesystem::path& path, Format format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (format == Format::kCsv) {
    write_report_csv(out, report);
  } else {
    write_report_json(out, report);
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

void write_comparison_csv(std::ostream& out, std::span<const Report> reports) {
  out << "policy,alpha,requests,total_tokens,tokens_computed,tokens_reused,recompute_fraction,hit_rate,"
         "hit_recompute_fraction,mean_deviation,mean_ttft,mean_queue_wait,mean_cfo\n";
  for (const auto& r : reports) {
    const auto a = r.aggregate();
    out << r.policy << ',' << fmt6(r.alpha) << ',' << a.requests << ',' << a.total_tokens << ','
        << a.tokens_computed << ',' << a.tokens_reused << ',' << fmt6(a.recompute_fraction) << ','
        << fmt6(a.hit_rate) << ',' << fmt6(a.hit_recompute_fraction) << ',' << fmt6(a.mean_deviation) << ','
        << fmt6(a.mean_ttft) << ',' << fmt6(a.mean_queue_wait) << ',' << fmt6(a.mean_cfo) << '\n';
  }
}

}  // namespace cachecraft::harness
