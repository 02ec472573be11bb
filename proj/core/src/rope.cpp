#include "cachecraft/rope.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "cachecraft/errors.hpp"

namespace cachecraft::model {
namespace {

// sign = +1 rotates forward, -1 rotates back.
Matrix rotate(const Matrix& vectors, std::span<const std::size_t> positions,
              std::size_t head_dim, double base, double sign) {
  if (static_cast<std::size_t>(vectors.rows()) != positions.size()) {
    throw ShapeError("rope: " + std::to_string(vectors.rows()) + " rows but " +
                     std::to_string(positions.size()) + " positions");
  }
  if (head_dim == 0 || head_dim % 2 != 0 ||
      static_cast<std::size_t>(vectors.cols()) % head_dim != 0) {
    throw ShapeError("rope: width " + std::to_string(vectors.cols()) +
                     " is not a multiple of even head_dim " + std::to_string(head_dim));
  }
  const std::size_t half = head_dim / 2;
  const std::size_t n_heads = static_cast<std::size_t>(vectors.cols()) / head_dim;

  std::vector<double> inv_freq(half);
  for (std::size_t j = 0; j < half; ++j) {
    inv_freq[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  }

  Matrix out(vectors.rows(), vectors.cols());
  std::vector<double> cos_t(half), sin_t(half);
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (std::size_t j = 0; j < half; ++j) {
      const double theta = pos * inv_freq[j];
      cos_t[j] = std::cos(theta);
      sin_t[j] = sign * std::sin(theta);
    }
    const double* src = vectors.row(r).data();
    double* dst = out.row(r).data();
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * head_dim;
      for (std::size_t j = 0; j < half; ++j) {
        const double x = src[off + j];
        const double y = src[off + j + half];
        dst[off + j] = x * cos_t[j] - y * sin_t[j];
        dst[off + j + half] = y * cos_t[j] + x * sin_t[j];
      }
    }
  }
  return out;
}

}  // namespace

Matrix apply_rpe(const Matrix& vectors, std::span<const std::size_t> positions,
                 std::size_t head_dim, double base) {
  return rotate(vectors, positions, head_dim, base, 1.0);
}

Matrix remove_rpe(const Matrix& vectors, std::span<const std::size_t> positions,
                  std::size_t head_dim, double base) {
  return rotate(vectors, positions, head_dim, base, -1.0);
}

}  // namespace cachecraft::model
