#pragma once

#include <cstddef>
#include <span>

#include "cachecraft/types.hpp"

namespace cachecraft::model {

// Rotary position embedding over rows of `vectors` ([n x H*head_dim]).
// Within every head slice, component j (upper half) and j + head_dim/2
// (lower half) form a pair rotated by pos * base^(-2j/head_dim).
// Throws ShapeError if positions.size() != rows or the width is not a
// multiple of an even head_dim.
Matrix apply_rpe(const Matrix& vectors, std::span<const std::size_t> positions,
                 std::size_t head_dim, double base);

// Exact inverse of apply_rpe at the same positions.
Matrix remove_rpe(const Matrix& vectors, std::span<const std::size_t> positions,
                  std::size_t head_dim, double base);

}  // namespace cachecraft::model
