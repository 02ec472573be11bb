#include "cachecraft/tier_simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "cachecraft/errors.hpp"

namespace cachecraft::sim {
namespace {

// Depth estimates that land within this of an integer are snapped to it.
constexpr double kDepthSnap = 1e-9;

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void TierConfig::validate() const {
  if (tiers.empty()) throw ConfigError("tier config needs at least one tier");
  for (const auto& t : tiers) {
    if (!(t.bandwidth_bps > 0.0)) throw ConfigError("tier '" + t.name + "': bandwidth must be positive");
    if (!(t.latency_s >= 0.0)) throw ConfigError("tier '" + t.name + "': latency must be non-negative");
  }
  if (n_layers == 0) throw ConfigError("tier config: n_layers must be positive");
  if (!(layer_compute_s > 0.0) || token_compute_s < 0.0 || decode_step_s < 0.0) {
    throw ConfigError("tier config: compute times must be positive");
  }
}

TierConfig TierConfig::demo(std::size_t n_layers) {
  TierConfig cfg;
  cfg.n_layers = n_layers;
  cfg.tiers = {
      {"device", 1.0e12, 0.0, std::size_t{8} << 20, true},
      {"host", 16.4e6, 0.0, std::size_t{16} << 20, false},
      {"disk", 0.833e6, 0.0, std::nullopt, false},
  };
  cfg.layer_compute_s = 0.002;
  cfg.token_compute_s = 0.00025;
  cfg.decode_step_s = 0.01;
  return cfg;
}

TierConfig TierConfig::from_config(const KeyValueConfig& kv, std::size_t n_layers) {
  TierConfig cfg = demo(n_layers);
  const auto count = kv.get_size("tiers.count", 0);
  if (count > 0) {
    cfg.tiers.clear();
    for (std::size_t i = 0; i < count; ++i) {
      const std::string p = "tiers." + std::to_string(i) + ".";
      Tier t;
      t.name = kv.get_string(p + "name", "tier" + std::to_string(i));
      t.bandwidth_bps = kv.get_double(p + "bandwidth_bps", 1.0e9);
      t.latency_s = kv.get_double(p + "latency_s", 0.0);
      if (kv.contains(p + "budget_bytes")) t.budget_bytes = kv.get_size(p + "budget_bytes", 0);
      t.resident = kv.get_bool(p + "resident", i == 0);
      cfg.tiers.push_back(std::move(t));
    }
  }
  cfg.layer_compute_s = kv.get_double("sim.layer_compute_s", cfg.layer_compute_s);
  cfg.token_compute_s = kv.get_double("sim.token_compute_s", cfg.token_compute_s);
  cfg.decode_step_s = kv.get_double("sim.decode_step_s", cfg.decode_step_s);
  if (kv.contains("sim.depth")) cfg.forced_depth = kv.get_size("sim.depth", 1);
  cfg.validate();
  return cfg;
}

std::size_t preload_depth(std::size_t n_layers, double t_prefill, double t_load) {
  if (n_layers == 0) throw ArgumentError("preload_depth: need at least one layer");
  if (!(t_prefill > 0.0) || !(t_load > 0.0)) throw ArgumentError("preload_depth: times must be positive");
  const double raw = static_cast<double>(n_layers - 1) * (1.0 - t_prefill / t_load) + 1.0;
  const double depth = std::ceil(raw - kDepthSnap);
  if (depth <= 1.0) return 1;
  return std::min(n_layers, static_cast<std::size_t>(depth));
}

Timeline simulate_layers(std::span<const double> compute_s, std::span<const double> load_s,
                         std::size_t depth, double queue_wait, double decode_step_s) {
  const std::size_t L = compute_s.size();
  if (L == 0) throw ArgumentError("simulate_layers: no layers");
  if (load_s.size() != L) throw ArgumentError("simulate_layers: load/compute length mismatch");
  depth = std::clamp<std::size_t>(depth, 1, L);

  Timeline tl;
  tl.queue_wait = queue_wait;
  tl.depth = depth;
  tl.layers.assign(L, {});

  // Evaluate in dependency order: load j needs compute j - depth - 1,
  // compute l needs load l (and the first `depth` loads for l = 0).
  std::size_t next_load = 0;
  std::size_t next_compute = 0;
  while (next_compute < L) {
    const bool load_ready =
        next_load < L && (next_load < depth + 1 || next_load - depth - 1 < next_compute);
    const bool compute_ready =
        next_compute < next_load && (next_compute > 0 || next_load >= depth);
    if (load_ready && !compute_ready) {
      auto& li = tl.layers[next_load];
      double start = next_load == 0 ? 0.0 : tl.layers[next_load - 1].load_end;
      if (next_load >= depth + 1) start = std::max(start, tl.layers[next_load - depth - 1].compute_end);
      li.load_start = start;
      li.load_end = start + load_s[next_load];
      ++next_load;
      continue;
    }
    auto& ci = tl.layers[next_compute];
    double start = std::max(queue_wait, ci.load_end);
    if (next_compute == 0) {
      start = std::max(start, tl.layers[depth - 1].load_end);
    } else {
      const double prev_end = tl.layers[next_compute - 1].compute_end;
      start = std::max(start, prev_end);
    }
    ci.compute_start = start;
    ci.compute_end = start + compute_s[next_compute];
    ++next_compute;
  }

  for (std::size_t l = 1; l < L; ++l) {
    tl.total_gap += tl.layers[l].compute_start - tl.layers[l - 1].compute_end;
  }
  tl.ttft = tl.layers.back().compute_end + decode_step_s;
  return tl;
}

std::vector<double> layer_load_times(const planner::InferencePlan& plan, const Placement& placement,
                                     const TierConfig& cfg) {
  double per_layer = 0.0;
  for (const auto& c : plan.chunks) {
    if (c.status != planner::ChunkStatus::kHit) continue;
    const auto it = placement.find(c.variant);
    if (it == placement.end()) {
      throw PlanError("no placement for variant " + std::to_string(c.variant));
    }
    if (it->second >= cfg.tiers.size()) throw PlanError("placement names an unknown tier");
    const auto& tier = cfg.tiers[it->second];
    if (tier.resident) continue;
    const double bytes = static_cast<double>(c.payload_bytes) / static_cast<double>(plan.n_layers);
    per_layer += bytes / tier.bandwidth_bps + tier.latency_s;
  }
  return std::vector<double>(plan.n_layers, per_layer);
}

Timeline simulate(const planner::InferencePlan& plan, const Placement& placement,
                  const TierConfig& cfg, double queue_wait) {
  if (plan.n_layers == 0) throw PlanError("simulate: plan has no layers");
  std::vector<double> compute(plan.n_layers);
  for (std::size_t l = 0; l < plan.n_layers; ++l) {
    compute[l] = cfg.layer_compute_s +
                 cfg.token_compute_s * static_cast<double>(plan.computed_tokens_at(l));
  }
  const auto load = layer_load_times(plan, placement, cfg);

  std::size_t depth = 1;
  if (cfg.forced_depth) {
    depth = *cfg.forced_depth;
  } else if (mean(load) > 0.0) {
    depth = preload_depth(plan.n_layers, mean(compute), mean(load));
  }
  return simulate_layers(compute, load, depth, queue_wait, cfg.decode_step_s);
}

Placement place_and_migrate(const store::Census& census, const TierConfig& cfg) {
  cfg.validate();
  std::vector<store::CensusEntry> order = census.variants;
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.f_r != b.f_r) return a.f_r > b.f_r;
    if (a.created_at != b.created_at) return a.created_at < b.created_at;
    return a.id < b.id;
  });

  std::size_t largest = 0;
  for (const auto& v : order) largest = std::max(largest, v.payload_bytes);
  if (cfg.tiers.front().budget_bytes && *cfg.tiers.front().budget_bytes < largest) {
    throw PlacementError("fast tier budget is smaller than the largest variant");
  }

  Placement placement;
  std::size_t tier = 0;
  std::size_t used = 0;
  for (const auto& v : order) {
    while (tier < cfg.tiers.size() && cfg.tiers[tier].budget_bytes &&
           used + v.payload_bytes > *cfg.tiers[tier].budget_bytes) {
      ++tier;
      used = 0;
    }
    if (tier == cfg.tiers.size()) {
      throw PlacementError("variant " + std::to_string(v.id) + " does not fit in any tier");
    }
    placement[v.id] = tier;
    used += v.payload_bytes;
  }
  return placement;
}

planner::InferencePlan fallback_decision(planner::InferencePlan plan, const Placement& placement,
                                         const TierConfig& cfg, double queue_wait) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
    const auto& c = plan.chunks[i];
    if (c.status != planner::ChunkStatus::kHit) continue;
    const auto it = placement.find(c.variant);
    if (it == placement.end()) throw PlanError("no placement for variant " + std::to_string(c.variant));
    if (it->second == 0 || cfg.tiers.at(it->second).resident) continue;
    candidates.push_back(i);
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    const auto ta = placement.at(plan.chunks[a].variant);
    const auto tb = placement.at(plan.chunks[b].variant);
    if (ta != tb) return ta > tb;
    return plan.chunks[a].payload_bytes > plan.chunks[b].payload_bytes;
  });

  double best = simulate(plan, placement, cfg, queue_wait).ttft;
  for (std::size_t i : candidates) {
    planner::InferencePlan trial = plan;
    auto& c = trial.chunks[i];
    c.status = planner::ChunkStatus::kMiss;
    c.recompute.clear();
    c.cutoff_layer = trial.n_layers;
    c.payload.reset();
    const double ttft = simulate(trial, placement, cfg, queue_wait).ttft;
    if (ttft < best) {
      best = ttft;
      plan = std::move(trial);
    }
  }
  return plan;
}

void write_timeline_json(std::ostream& out, const Timeline& tl) {
  nlohmann::json j;
  j["queue_wait"] = tl.queue_wait;
  j["depth"] = tl.depth;
  j["ttft"] = tl.ttft;
  j["total_gap"] = tl.total_gap;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < tl.layers.size(); ++l) {
    const auto& li = tl.layers[l];
    layers.push_back({{"layer", l + 1},
                      {"load_start", li.load_start},
                      {"load_end", li.load_end},
                      {"compute_start", li.compute_start},
                      {"compute_end", li.compute_end}});
  }
  j["layers"] = std::move(layers);
  out << j.dump(2) << '\n';
}

void write_timeline_csv(std::ostream& out, const Timeline& tl) {
  const auto old_precision = out.precision(6);
  out << "layer,load_start,load_end,compute_start,compute_end\n";
  for (std::size_t l = 0; l < tl.layers.size(); ++l) {
    const auto& li = tl.layers[l];
    out << l + 1 << ',' << li.load_start << ',' << li.load_end << ',' << li.compute_start << ','
        << li.compute_end << '\n';
  }
  out.precision(old_precision);
}

}  // namespace cachecraft::sim
