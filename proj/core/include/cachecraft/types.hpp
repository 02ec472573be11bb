#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace cachecraft {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Digest of a chunk's raw token ids. Identity key of the metadata store.
struct ChunkHash {
  std::uint64_t value = 0;

  friend constexpr auto operator<=>(const ChunkHash&, const ChunkHash&) = default;
};

using VariantId = std::uint64_t;

}  // namespace cachecraft

template <>
struct std::hash<cachecraft::ChunkHash> {
  std::size_t operator()(const cachecraft::ChunkHash& h) const noexcept {
    return static_cast<std::size_t>(h.value);
  }
};
