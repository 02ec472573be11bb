#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cachecraft/cache_store.hpp"
#include "cachecraft/config_file.hpp"
#include "cachecraft/model.hpp"
#include "cachecraft/reuse_scoring.hpp"
#include "cachecraft/tier_simulator.hpp"
#include "cachecraft/workload.hpp"

namespace cachecraft::harness {

inline constexpr std::size_t kDefaultWarmup = 20;

enum class Policy {
  kCacheCraft,
  kFullRecompute,
  kFullCacheNaive,
  kExactPrefix,
};

// Accepts cachecraft, full_recompute, full_cache_naive, exact_prefix.
// Throws ArgumentError otherwise.
Policy parse_policy(std::string_view name);
std::string_view policy_name(Policy policy);

struct ReplayConfig {
  Policy policy = Policy::kCacheCraft;
  store::StoreConfig store;
  sim::TierConfig tiers = sim::TierConfig::demo(4);
  double alpha = 1.0;
  std::size_t warmup = kDefaultWarmup;
  bool early_termination = true;
  std::size_t focus_window = 3;
  // Demote slow-tier hits to misses when that shortens TTFT.
  bool fallback = true;
  // Replace every hit's CFO with this fraction (experiments).
  std::optional<double> fixed_fraction;
  // When set, the final store is saved here (cachecraft and naive policies).
  std::filesystem::path save_store;

  // Sections [replay], [store], [tiers] and [sim]; replay keys: policy,
  // alpha, warmup, early_termination, focus_window, fallback.
  static ReplayConfig from_config(const KeyValueConfig& cfg, std::size_t n_layers);
};

struct RequestRow {
  std::uint64_t id = 0;
  std::size_t k = 0;
  std::size_t hits = 0;
  std::size_t total_tokens = 0;
  std::size_t tokens_computed = 0;
  std::size_t tokens_reused = 0;
  std::size_t hit_tokens = 0;
  std::size_t hit_tokens_recomputed = 0;
  std::size_t token_layers_computed = 0;
  double recompute_fraction = 0.0;
  double mean_cfo = 0.0;  // mean over hit chunks; 0 without hits
  double deviation = 0.0;
  double ttft = 0.0;
  double queue_wait = 0.0;

  friend bool operator==(const RequestRow&, const RequestRow&) = default;
};

struct Aggregate {
  std::size_t requests = 0;
  std::size_t total_tokens = 0;
  std::size_t tokens_computed = 0;
  std::size_t tokens_reused = 0;
  std::size_t chunks = 0;
  std::size_t hits = 0;
  double recompute_fraction = 0.0;      // computed / total tokens
  double hit_rate = 0.0;                // hits / chunks
  double hit_recompute_fraction = 0.0;  // recomputed / hit tokens
  double mean_deviation = 0.0;
  double mean_ttft = 0.0;
  double mean_queue_wait = 0.0;
  double mean_cfo = 0.0;  // over requests with at least one hit
};

struct Report {
  std::string policy;
  double alpha = 0.0;
  std::size_t warmup = 0;
  // Requests after the warm-up window, in trace order.
  std::vector<RequestRow> rows;

  Aggregate aggregate() const;
  // Running hits / chunks over rows.
  std::vector<double> cumulative_hit_rate() const;

  friend bool operator==(const Report&, const Report&) = default;
};

// Question-span hidden states of the full-recompute reference, memoised by
// request id. One cache serves one (trace, model) pair.
class OracleCache {
 public:
  const Matrix& question_hidden(const model::Model& model, const workload::Trace& trace,
                                const workload::TraceRecord& record);
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::uint64_t, Matrix> entries_;
};

// Replays the trace in order under one policy and reports every request
// after the warm-up window. Requests are served FIFO by arrival time.
Report replay(const workload::Trace& trace, const model::Model& model, const ReplayConfig& config,
              OracleCache* oracle = nullptr);

struct CalibrationRun {
  scoring::Calibration calibration;
  double naive_deviation = 0.0;
};

// Quality of alpha = clamp(1 - deviation(alpha) / deviation(naive), 0, 1);
// picks the feasible alpha with the lowest mean CFO.
CalibrationRun calibrate(const workload::Trace& trace, const model::Model& model,
                         ReplayConfig config, std::span<const double> grid,
                         double quality_target, OracleCache* oracle = nullptr);

// The grid value whose mean hit-token recompute fraction is closest to
// target (first on ties).
double alpha_for_recompute(const workload::Trace& trace, const model::Model& model,
                           ReplayConfig config, std::span<const double> grid, double target,
                           OracleCache* oracle = nullptr);

enum class Format { kCsv, kJson };
Format parse_format(std::string_view name);

// Fixed column order, floats at 6 significant digits.
void write_report_csv(std::ostream& out, const Report& report);
void write_report_json(std::ostream& out, const Report& report);
Report read_report_json(std::istream& in);
// Throws IoError when the file cannot be written.
void export_report(const Report& report, const std::filesystem::path& path, Format format);

// One aggregate row per report (policy comparison table).
void write_comparison_csv(std::ostream& out, std::span<const Report> reports);

// The report as it reads back from its own export.
Report rounded(const Report& report);

}  // namespace cachecraft::harness
