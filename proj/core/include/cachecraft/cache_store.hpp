#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "cachecraft/config_file.hpp"
#include "cachecraft/kv_cache.hpp"
#include "cachecraft/reuse_scoring.hpp"
#include "cachecraft/types.hpp"

namespace cachecraft::store {

inline constexpr std::size_t kBlockSize = 16;
// Floor on CFO in the reuse-frequency update; an exact-prefix hit (CFO = 0)
// adds 1 / kCfoFloor instead of diverging.
inline constexpr double kCfoFloor = 0.01;

// 64-bit digest of raw token ids, stable across runs and platforms.
// Throws ArgumentError on empty input.
ChunkHash chunk_hash(std::span<const TokenId> tokens);

// Pads rows up to a multiple of block_size with zero rows and records the
// pad count in the result. Throws ArgumentError on an empty payload.
model::ChunkCache pad_to_blocks(const model::ChunkCache& payload, std::size_t block_size = kBlockSize);

// Metadata supplied when a variant is created.
struct VariantInfo {
  scoring::PrefixContext prefix;
  double a_bar = 0.0;
  double b_bar = 0.0;
  double cci = 0.0;
  // One score per unpadded chunk token.
  std::vector<double> token_scores;
  std::shared_ptr<const model::ChunkCache> payload;
};

struct Variant {
  VariantId id = 0;
  ChunkHash chunk;
  VariantInfo info;
  double f_r = 0.0;
  std::uint64_t created_at = 0;
};

enum class EvictionMode {
  // Evict exactly the overflow as soon as capacity is exceeded.
  kInline,
  // On overflow evict a whole batch (eviction_batch variants) at once.
  kBatched,
};

struct StoreConfig {
  std::size_t max_chunks = 64;         // N
  std::size_t variants_per_chunk = 4;  // M
  std::size_t block_size = kBlockSize;
  std::size_t eviction_batch = 1;
  EvictionMode mode = EvictionMode::kInline;

  std::size_t capacity() const { return max_chunks * variants_per_chunk; }
  void validate() const;
  // Keys under "store.": chunks, variants, block_size, eviction_batch,
  // eviction (inline | batched).
  static StoreConfig from_config(const KeyValueConfig& cfg);
};

struct CensusEntry {
  VariantId id = 0;
  ChunkHash chunk;
  double f_r = 0.0;
  std::uint64_t created_at = 0;
  std::size_t payload_bytes = 0;
};

struct Census {
  std::vector<CensusEntry> variants;  // ordered by id
  // variants-per-chunk -> number of chunks with that many variants
  std::map<std::size_t, std::size_t> histogram;
  std::size_t chunks = 0;
};

// Variant store keyed by chunk hash. Holds at most N*M variants overall,
// distributed freely between chunks; overflow evicts the variants with the
// lowest reuse frequency, oldest first on ties.
//
// Thread safety: lookups take a shared lock, mutations an exclusive one.
class CacheStore {
 public:
  explicit CacheStore(StoreConfig config = {});

  CacheStore(const CacheStore& other);
  CacheStore& operator=(const CacheStore& other);

  // Adds a variant with f_r = 0. A variant with the same chunk and the same
  // ordered prefix ids is updated in place and keeps its id and f_r.
  VariantId insert(ChunkHash chunk, VariantInfo info);

  std::vector<Variant> lookup(ChunkHash chunk) const;
  // All lookups under one lock, i.e. from one consistent store state.
  std::vector<std::vector<Variant>> lookup_many(std::span<const ChunkHash> chunks) const;
  std::optional<Variant> get(VariantId id) const;

  // f_r += 1 / max(cfo, kCfoFloor). Throws NotFoundError for unknown ids.
  double touch(VariantId id, double cfo);

  // Removes up to `count` variants with the smallest f_r (older first).
  std::vector<VariantId> evict(std::size_t count);

  std::size_t size() const;
  std::size_t chunk_count() const;
  const StoreConfig& config() const { return config_; }
  Census census() const;

  // Directory snapshot: manifest.json plus payloads/<id>.kv containers.
  void save(const std::filesystem::path& dir) const;
  static CacheStore load(const std::filesystem::path& dir);

 private:
  using EvictionKey = std::tuple<double, std::uint64_t, VariantId>;

  static EvictionKey key_of(const Variant& v) { return {v.f_r, v.created_at, v.id}; }
  std::vector<VariantId> evict_locked(std::size_t count);
  void enforce_capacity_locked();

  mutable std::shared_mutex mu_;
  StoreConfig config_;
  std::map<VariantId, Variant> variants_;
  std::unordered_map<ChunkHash, std::vector<VariantId>> by_chunk_;
  std::set<EvictionKey> eviction_order_;
  VariantId next_id_ = 1;
  std::uint64_t clock_ = 0;
};

}  // namespace cachecraft::store
