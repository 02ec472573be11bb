#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "cachecraft/types.hpp"

namespace cachecraft::scoring {

// Creation-time prefix of a cached chunk: the chunks that preceded it, in
// order, with the layer-summed attention mass the chunk placed on each.
struct PrefixContext {
  std::vector<ChunkHash> ids;
  std::vector<double> weights;

  // Throws ArgumentError on length mismatch, negative weights or duplicate ids.
  void validate() const;
};

struct ReuseScore {
  double beta = 1.0;
  double gamma = 0.0;
  double beta_prime = 1.0;
  double cci = 0.0;
  double cfo = 0.0;
};

// Prefix overlap: weight of old-prefix chunks still present in the new
// prefix over the total old-prefix weight. 1 when the old prefix is empty or
// carries no weight.
double beta(const PrefixContext& ctx, std::span<const ChunkHash> new_prefix);

// Normalized Kendall tau distance between the relative orders of the chunks
// common to both prefixes. 0 when fewer than two chunks are shared.
// Throws ArgumentError on duplicate ids within either list.
double gamma(std::span<const ChunkHash> old_order, std::span<const ChunkHash> new_order);

// beta * (1 - gamma); both inputs must lie in [0, 1].
double adjusted_beta(double beta, double gamma);

// sigmoid(a_bar / b_bar); 1 when b_bar == 0.
double cci(double a_bar, double b_bar);

// clamp(alpha * cci * (1 - beta_prime), 0, 1). alpha must be positive.
double cfo(double alpha, double cci_value, double beta_prime);

// Full score of a cached variant (prefix ctx, cci) against a new prefix.
ReuseScore score(const PrefixContext& ctx, double cci_value,
                 std::span<const ChunkHash> new_prefix, double alpha);

struct CalibrationPoint {
  double alpha = 0.0;
  double mean_cfo = 0.0;
  double quality = 0.0;
  bool feasible = false;
};

struct Calibration {
  double alpha = 0.0;
  std::vector<CalibrationPoint> points;
};

struct Evaluation {
  double mean_cfo = 0.0;
  double quality = 0.0;
};

// Evaluates every candidate and returns the feasible one
// (quality >= quality_desired) with the lowest mean CFO; ties go to the
// earlier candidate. Throws InfeasibleError carrying the best quality seen
// when nothing is feasible, ArgumentError on an empty grid.
Calibration calibrate_alpha(std::span<const double> candidates,
                            const std::function<Evaluation(double)>& evaluate,
                            double quality_desired);

// CSV rows "alpha,mean_cfo,quality,feasible" with a header line.
void write_calibration_csv(std::ostream& out, std::span<const CalibrationPoint> points);

}  // namespace cachecraft::scoring
