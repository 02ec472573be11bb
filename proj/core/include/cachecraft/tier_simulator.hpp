#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cachecraft/cache_store.hpp"
#include "cachecraft/config_file.hpp"
#include "cachecraft/recompute_planner.hpp"

namespace cachecraft::sim {

struct Tier {
  std::string name;
  double bandwidth_bps = 1.0;  // bytes per second
  double latency_s = 0.0;      // fixed cost per variant per layer load
  // Byte budget for placement; nullopt means unbounded.
  std::optional<std::size_t> budget_bytes;
  // Resident tiers hold caches in device memory and need no load.
  bool resident = false;
};

struct TierConfig {
  std::vector<Tier> tiers;  // fast -> slow
  std::size_t n_layers = 4;
  // Per-layer compute time: layer_compute_s + token_compute_s * tokens
  // computed at that layer.
  double layer_compute_s = 1.0;
  double token_compute_s = 0.0;
  double decode_step_s = 0.0;
  // Overrides the preload depth (testing / ablation).
  std::optional<std::size_t> forced_depth;

  void validate() const;
  // Demo hierarchy of device / host / disk tiers; host and disk bandwidths
  // are chosen so that a five-chunk request loads in ~0.03 s and ~0.59 s.
  static TierConfig demo(std::size_t n_layers);
  // Keys under "tiers." / "sim.": see configs/demo.conf.
  static TierConfig from_config(const KeyValueConfig& cfg, std::size_t n_layers);
};

// Layers to load ahead so the rest of the loads hide behind compute:
//   max(1, ceil((L - 1) * (1 - t_prefill / t_load) + 1)), at most L.
// Throws ArgumentError for L == 0 or non-positive times.
std::size_t preload_depth(std::size_t n_layers, double t_prefill, double t_load);

struct LayerInterval {
  double load_start = 0.0;
  double load_end = 0.0;
  double compute_start = 0.0;
  double compute_end = 0.0;
};

struct Timeline {
  double queue_wait = 0.0;
  std::size_t depth = 1;
  std::vector<LayerInterval> layers;
  double ttft = 0.0;
  // Idle time between consecutive layer computations.
  double total_gap = 0.0;
};

// Layer pipeline with one load channel. Loads start at t = 0 (enqueue) and
// run back to back; layer j may not start loading before layer j - depth - 1
// has finished computing. Layer 1 waits for the queue exit and for the
// first `depth` layers; layer l waits for layer l - 1 and for its own load.
// A zero load time means nothing to load for that layer.
Timeline simulate_layers(std::span<const double> compute_s, std::span<const double> load_s,
                         std::size_t depth, double queue_wait, double decode_step_s);

// variant -> tier index
using Placement = std::map<VariantId, std::size_t>;

// Per-layer load seconds of a plan's hit chunks under a placement.
// Throws PlanError when a hit variant has no placement.
std::vector<double> layer_load_times(const planner::InferencePlan& plan, const Placement& placement,
                                     const TierConfig& cfg);

// Full timeline of a plan. Depth is preload_depth over the mean per-layer
// compute and load times unless cfg.forced_depth is set.
Timeline simulate(const planner::InferencePlan& plan, const Placement& placement,
                  const TierConfig& cfg, double queue_wait);

// Orders variants by f_r (descending; older first on ties) and fills the
// tiers fast to slow, moving to the next tier once a variant no longer fits.
// Throws PlacementError if the fast tier cannot hold the largest variant or
// a variant fits nowhere.
Placement place_and_migrate(const store::Census& census, const TierConfig& cfg);

// Demotes hit chunks in non-resident tiers to misses whenever recomputing
// them from scratch gives a shorter time to first token than waiting for
// their loads. Chunks are considered slowest tier first.
planner::InferencePlan fallback_decision(planner::InferencePlan plan, const Placement& placement,
                                         const TierConfig& cfg, double queue_wait);

void write_timeline_json(std::ostream& out, const Timeline& timeline);
// "layer,load_start,load_end,compute_start,compute_end"
void write_timeline_csv(std::ostream& out, const Timeline& timeline);

}  // namespace cachecraft::sim
