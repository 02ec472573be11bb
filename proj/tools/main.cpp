// cachecraft command-line front end: trace generation, replay, alpha
// calibration, store census and single-request timeline simulation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cachecraft/cache_store.hpp"
#include "cachecraft/config_file.hpp"
#include "cachecraft/errors.hpp"
#include "cachecraft/model.hpp"
#include "cachecraft/replay.hpp"
#include "cachecraft/reuse_scoring.hpp"
#include "cachecraft/tier_simulator.hpp"
#include "cachecraft/workload.hpp"

namespace cc = cachecraft;
namespace fs = std::filesystem;

namespace {

struct Loaded {
  cc::KeyValueConfig kv;
  cc::model::ModelConfig model;
  cc::harness::ReplayConfig replay;
};

Loaded load_config(const std::string& path) {
  Loaded out;
  if (!path.empty()) out.kv = cc::KeyValueConfig::load(path);
  out.model = cc::model::ModelConfig::from_config(out.kv);
  out.replay = cc::harness::ReplayConfig::from_config(out.kv, out.model.n_layers);
  return out;
}

void print_aggregate(const cc::harness::Report& r) {
  const auto a = r.aggregate();
  std::printf("%-17s alpha=%-6g requests=%zu computed=%zu/%zu (%.1f%%) hit_rate=%.3f "
              "hit_recompute=%.3f deviation=%.4g ttft=%.4gs\n",
              r.policy.c_str(), r.alpha, a.requests, a.tokens_computed, a.total_tokens,
              100.0 * a.recompute_fraction, a.hit_rate, a.hit_recompute_fraction, a.mean_deviation,
              a.mean_ttft);
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      grid.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw cc::ArgumentError("bad grid value '" + item + "'");
    }
  }
  if (grid.empty()) throw cc::ArgumentError("empty grid");
  return grid;
}

cc::harness::Format format_for(const fs::path& out, const std::string& requested) {
  if (!requested.empty()) return cc::harness::parse_format(requested);
  return out.extension() == ".json" ? cc::harness::Format::kJson : cc::harness::Format::kCsv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chunk-cache reuse toolkit for retrieval-augmented prefill"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic Zipf trace and its corpus");
  cc::workload::SyntheticSpec spec;
  std::string zipf_text = "1.0";
  std::string gen_out;
  gen->add_option("--chunks", spec.n_chunks, "Number of distinct chunks")->capture_default_str();
  gen->add_option("--zipf", zipf_text, "Zipf exponent, or 'auto' to tune for top-5% = 60%")
      ->capture_default_str();
  gen->add_option("--k", spec.k, "Chunks per request")->capture_default_str();
  gen->add_option("--requests", spec.n_requests, "Number of requests")->capture_default_str();
  gen->add_option("--seed", spec.seed, "RNG seed")->capture_default_str();
  gen->add_option("--min-len", spec.min_chunk_len, "Minimum chunk length")->capture_default_str();
  gen->add_option("--max-len", spec.max_chunk_len, "Maximum chunk length")->capture_default_str();
  gen->add_option("--question-len", spec.question_len, "Question tokens")->capture_default_str();
  gen->add_option("--rate", spec.arrival_rate, "Arrival rate (requests/s)")->capture_default_str();
  gen->add_option("--out", gen_out, "Output trace (.jsonl)")->required();

  // replay
  auto* rp = app.add_subcommand("replay", "Replay a trace under a policy");
  std::string trace_path, corpus_path, policy = "cachecraft", config_path, out_path, format,
      save_store;
  std::optional<double> alpha;
  std::optional<std::size_t> warmup;
  rp->add_option("--trace", trace_path, "Trace file (.jsonl)")->required();
  rp->add_option("--corpus", corpus_path, "Corpus file (default <trace>.corpus.json)");
  rp->add_option("--policy", policy,
                 "cachecraft | full_recompute | full_cache_naive | exact_prefix | all")
      ->capture_default_str();
  rp->add_option("--alpha", alpha, "CFO scale");
  rp->add_option("--warmup", warmup, "Warm-up requests excluded from the report");
  rp->add_option("--config", config_path, "Configuration file");
  rp->add_option("--out", out_path, "Report path (.csv or .json)");
  rp->add_option("--format", format, "csv | json (default from extension)");
  rp->add_option("--save-store", save_store, "Save the final store to this directory");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Pick alpha for a target quality");
  std::string grid_text = "0.5,1,2,3";
  double target = 0.8;
  std::string cal_out;
  cal->add_option("--trace", trace_path, "Trace file (.jsonl)")->required();
  cal->add_option("--corpus", corpus_path, "Corpus file (default <trace>.corpus.json)");
  cal->add_option("--grid", grid_text, "Comma-separated alpha candidates")->capture_default_str();
  cal->add_option("--target", target, "Required quality in [0, 1]")->capture_default_str();
  cal->add_option("--config", config_path, "Configuration file");
  cal->add_option("--out", cal_out, "Write evaluated points as CSV");

  // census
  auto* cen = app.add_subcommand("census", "Summarise a saved store");
  std::string store_dir;
  cen->add_option("--store", store_dir, "Store directory")->required();

  // simulate
  auto* simc = app.add_subcommand("simulate", "Timeline of one uniform request");
  std::size_t layers = 5;
  double t_prefill = 1.0, t_load = 2.0;
  std::optional<std::size_t> depth;
  std::string sim_format = "csv";
  simc->add_option("--layers", layers, "Layer count")->capture_default_str();
  simc->add_option("--prefill", t_prefill, "Per-layer compute seconds")->capture_default_str();
  simc->add_option("--load", t_load, "Per-layer load seconds")->capture_default_str();
  simc->add_option("--depth", depth, "Preload depth (default: computed)");
  simc->add_option("--format", sim_format, "csv | json")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (zipf_text == "auto") {
        spec.zipf_s = cc::workload::tune_zipf(spec);
      } else {
        spec.zipf_s = std::stod(zipf_text);
      }
      const auto trace = cc::workload::gen_synthetic(spec);
      cc::workload::save_trace(gen_out, trace);
      std::printf("wrote %zu requests over %zu chunks (zipf_s=%.2f, top-5%% share=%.3f) to %s\n",
                  trace.records.size(), trace.corpus.size(), spec.zipf_s,
                  cc::workload::top_share(trace.records, spec.n_chunks), gen_out.c_str());
      return 0;
    }

    if (rp->parsed() || cal->parsed()) {
      Loaded cfg = load_config(config_path);
      const auto trace = cc::workload::load_trace(trace_path, corpus_path);
      const auto model = cc::model::build_model(cfg.model);
      cc::harness::OracleCache oracle;
      auto rc = cfg.replay;
      if (alpha) rc.alpha = *alpha;
      if (warmup) rc.warmup = *warmup;

      if (cal->parsed()) {
        const auto grid = parse_grid(grid_text);
        try {
          const auto run = cc::harness::calibrate(trace, model, rc, grid, target, &oracle);
          cc::scoring::write_calibration_csv(std::cout, run.calibration.points);
          std::printf("selected alpha=%g (naive deviation %.4g)\n", run.calibration.alpha,
                      run.naive_deviation);
          if (!cal_out.empty()) {
            std::ofstream out(cal_out);
            if (!out) throw cc::IoError("cannot write " + cal_out);
            cc::scoring::write_calibration_csv(out, run.calibration.points);
          }
        } catch (const cc::InfeasibleError& e) {
          std::fprintf(stderr, "infeasible: %s (best quality %.4g)\n", e.what(), e.best_quality());
          return 3;
        }
        return 0;
      }

      std::vector<cc::harness::Policy> policies;
      if (policy == "all") {
        policies = {cc::harness::Policy::kFullRecompute, cc::harness::Policy::kExactPrefix,
                    cc::harness::Policy::kFullCacheNaive, cc::harness::Policy::kCacheCraft};
      } else {
        policies = {cc::harness::parse_policy(policy)};
      }
      std::vector<cc::harness::Report> reports;
      for (auto p : policies) {
        rc.policy = p;
        rc.save_store = p == cc::harness::Policy::kCacheCraft ? fs::path(save_store) : fs::path();
        reports.push_back(cc::harness::replay(trace, model, rc, &oracle));
        print_aggregate(reports.back());
      }
      if (!out_path.empty()) {
        if (reports.size() == 1) {
          cc::harness::export_report(reports.front(), out_path, format_for(out_path, format));
        } else {
          std::ofstream out(out_path);
          if (!out) throw cc::IoError("cannot write " + out_path);
          cc::harness::write_comparison_csv(out, reports);
        }
      }
      return 0;
    }

    if (cen->parsed()) {
      const auto store = cc::store::CacheStore::load(store_dir);
      const auto census = store.census();
      std::printf("variants=%zu chunks=%zu capacity=%zu\n", census.variants.size(), census.chunks,
                  store.config().capacity());
      std::printf("variants_per_chunk,chunks\n");
      for (const auto& [n, count] : census.histogram) std::printf("%zu,%zu\n", n, count);
      std::printf("id,chunk,f_r,created_at,payload_bytes\n");
      for (const auto& v : census.variants) {
        std::printf("%llu,%016llx,%.6g,%llu,%zu\n", static_cast<unsigned long long>(v.id),
                    static_cast<unsigned long long>(v.chunk.value), v.f_r,
                    static_cast<unsigned long long>(v.created_at), v.payload_bytes);
      }
      return 0;
    }

    if (simc->parsed()) {
      const std::vector<double> compute(layers, t_prefill);
      const std::vector<double> load(layers, t_load);
      const std::size_t d = depth ? *depth : cc::sim::preload_depth(layers, t_prefill, t_load);
      const auto tl = cc::sim::simulate_layers(compute, load, d, 0.0, 0.0);
      if (sim_format == "json") {
        cc::sim::write_timeline_json(std::cout, tl);
      } else {
        cc::sim::write_timeline_csv(std::cout, tl);
        std::printf("# depth=%zu total_gap=%.6g ttft=%.6g\n", tl.depth, tl.total_gap, tl.ttft);
      }
      return 0;
    }
  } catch (const cc::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
