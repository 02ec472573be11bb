#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "cachecraft/types.hpp"

namespace cachecraft::model {

// One layer of a chunk's key/value cache. Keys are stored without rotary
// position embedding so the cache can be reinjected at any offset.
struct KVCacheLayer {
  Matrix keys;    // [rows x d_model]
  Matrix values;  // [rows x d_model]
};

// Per-chunk cache over all layers. The first n_tokens rows hold real tokens;
// the trailing `pad` rows are zero block-alignment padding and must be masked.
struct ChunkCache {
  std::vector<KVCacheLayer> layers;
  std::size_t n_tokens = 0;
  std::size_t pad = 0;

  std::size_t rows() const { return n_tokens + pad; }
  std::size_t n_layers() const { return layers.size(); }
  std::size_t d_model() const {
    return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().keys.cols());
  }
  // Serialized f32 size of keys and values for a single layer.
  std::size_t bytes_per_layer() const { return 2 * rows() * d_model() * sizeof(float); }
  std::size_t payload_bytes() const { return bytes_per_layer() * n_layers(); }

  // Throws ShapeError unless every layer has rows() x d_model keys and values.
  void check_shape() const;
};

// Flat little-endian f32 container:
//   "CCKV" | u32 version | u32 layers | u32 tokens | u32 d_model | u32 pad
//   then per layer: keys [tokens+pad x d_model], values [tokens+pad x d_model].
// `tokens` counts real rows; padding rows follow them.
void write_chunk_cache(std::ostream& out, const ChunkCache& cache);
ChunkCache read_chunk_cache(std::istream& in);

void save_chunk_cache(const std::filesystem::path& path, const ChunkCache& cache);
ChunkCache load_chunk_cache(const std::filesystem::path& path);

}  // namespace cachecraft::model
