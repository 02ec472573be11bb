#include "cachecraft/reuse_scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "cachecraft/errors.hpp"

namespace cachecraft::scoring {
namespace {

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ArgumentError(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
  }
}

void require_unique(std::span<const ChunkHash> ids, const char* what) {
  std::unordered_set<ChunkHash> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw ArgumentError(std::string("duplicate chunk id in ") + what);
  }
}

}  // namespace

void PrefixContext::validate() const {
  if (ids.size() != weights.size()) throw ArgumentError("prefix ids and weights differ in length");
  for (double w : weights) {
    if (!(w >= 0.0)) throw ArgumentError("prefix weights must be non-negative");
  }
  require_unique(ids, "prefix context");
}

double beta(const PrefixContext& ctx, std::span<const ChunkHash> new_prefix) {
  ctx.validate();
  const std::unordered_set<ChunkHash> current(new_prefix.begin(), new_prefix.end());
  double shared = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < ctx.ids.size(); ++i) {
    total += ctx.weights[i];
    if (current.contains(ctx.ids[i])) shared += ctx.weights[i];
  }
  if (total <= 0.0) return 1.0;
  return shared / total;
}

double gamma(std::span<const ChunkHash> old_order, std::span<const ChunkHash> new_order) {
  require_unique(old_order, "old prefix");
  require_unique(new_order, "new prefix");
  std::unordered_map<ChunkHash, std::size_t> rank_new;
  for (std::size_t i = 0; i < new_order.size(); ++i) rank_new.emplace(new_order[i], i);

  // Ranks in the new prefix of the common chunks, listed in old order.
  std::vector<std::size_t> seq;
  for (const auto& id : old_order) {
    if (auto it = rank_new.find(id); it != rank_new.end()) seq.push_back(it->second);
  }
  const std::size_t m = seq.size();
  if (m <= 1) return 0.0;

  // Discordant pairs are the inversions of seq; m is a handful of chunks.
  std::size_t discordant = 0;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      if (seq[a] > seq[b]) ++discordant;
    }
  }
  const double pairs = static_cast<double>(m) * static_cast<double>(m - 1) / 2.0;
  return static_cast<double>(discordant) / pairs;
}

double adjusted_beta(double beta, double gamma) {
  require_unit(beta, "beta");
  require_unit(gamma, "gamma");
  return beta * (1.0 - gamma);
}

double cci(double a_bar, double b_bar) {
  if (!(a_bar >= 0.0) || !(b_bar >= 0.0)) throw ArgumentError("cci inputs must be non-negative");
  if (b_bar == 0.0) return 1.0;
  return 1.0 / (1.0 + std::exp(-a_bar / b_bar));
}

double cfo(double alpha, double cci_value, double beta_prime) {
  if (!(alpha > 0.0)) throw ArgumentError("alpha must be positive");
  require_unit(cci_value, "cci");
  require_unit(beta_prime, "beta_prime");
  return std::clamp(alpha * cci_value * (1.0 - beta_prime), 0.0, 1.0);
}

ReuseScore score(const PrefixContext& ctx, double cci_value, std::span<const ChunkHash> new_prefix,
                 double alpha) {
  ReuseScore s;
  s.beta = beta(ctx, new_prefix);
  s.gamma = gamma(ctx.ids, new_prefix);
  s.beta_prime = adjusted_beta(s.beta, s.gamma);
  s.cci = cci_value;
  s.cfo = cfo(alpha, cci_value, s.beta_prime);
  return s;
}

Calibration calibrate_alpha(std::span<const double> candidates,
                            const std::function<Evaluation(double)>& evaluate,
                            double quality_desired) {
  if (candidates.empty()) throw ArgumentError("calibrate_alpha: empty candidate grid");
  Calibration out;
  double best_cfo = std::numeric_limits<double>::infinity();
  double best_quality = -std::numeric_limits<double>::infinity();
  bool found = false;
  for (double alpha : candidates) {
    if (!(alpha > 0.0)) throw ArgumentError("calibrate_alpha: candidates must be positive");
    const Evaluation e = evaluate(alpha);
    CalibrationPoint p{alpha, e.mean_cfo, e.quality, e.quality >= quality_desired};
    best_quality = std::max(best_quality, e.quality);
    if (p.feasible && p.mean_cfo < best_cfo) {
      best_cfo = p.mean_cfo;
      out.alpha = alpha;
      found = true;
    }
    out.points.push_back(p);
  }
  if (!found) {
    throw InfeasibleError("no alpha reaches quality " + std::to_string(quality_desired) +
                              " (best " + std::to_string(best_quality) + ")",
                          best_quality);
  }
  return out;
}

void write_calibration_csv(std::ostream& out, std::span<const CalibrationPoint> points) {
  const auto old_precision = out.precision(6);
  out << "alpha,mean_cfo,quality,feasible\n";
  for (const auto& p : points) {
    out << p.alpha << ',' << p.mean_cfo << ',' << p.quality << ',' << (p.feasible ? 1 : 0) << '\n';
  }
  out.precision(old_precision);
}

}  // namespace cachecraft::scoring
