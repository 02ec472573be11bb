#include "cachecraft/cache_store.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "cachecraft/errors.hpp"

namespace cachecraft::store {
namespace {

using json = nlohmann::json;

std::string hash_hex(ChunkHash h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.value));
  return buf;
}

ChunkHash parse_hash(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument(s);
    return ChunkHash{v};
  } catch (const std::exception&) {
    throw IoError("store manifest: bad chunk hash '" + s + "'");
  }
}

const char* mode_name(EvictionMode m) { return m == EvictionMode::kInline ? "inline" : "batched"; }

EvictionMode parse_mode(const std::string& s) {
  if (s == "inline") return EvictionMode::kInline;
  if (s == "batched") return EvictionMode::kBatched;
  throw ConfigError("unknown eviction mode '" + s + "'");
}

}  // namespace

ChunkHash chunk_hash(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ArgumentError("chunk_hash: empty token list");
  // FNV-1a over little-endian token bytes, then a splitmix64 finalizer.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (TokenId t : tokens) {
    auto u = static_cast<std::uint32_t>(t);
    for (int b = 0; b < 4; ++b) {
      h ^= (u >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  h ^= tokens.size();
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return ChunkHash{h};
}

model::ChunkCache pad_to_blocks(const model::ChunkCache& payload, std::size_t block_size) {
  if (payload.n_tokens == 0 || payload.layers.empty()) {
    throw ArgumentError("pad_to_blocks: empty payload");
  }
  if (block_size == 0) throw ArgumentError("pad_to_blocks: block size must be positive");
  payload.check_shape();
  const std::size_t blocks = (payload.n_tokens + block_size - 1) / block_size;
  const std::size_t rows = blocks * block_size;

  model::ChunkCache out;
  out.n_tokens = payload.n_tokens;
  out.pad = rows - payload.n_tokens;
  const auto n = static_cast<Eigen::Index>(payload.n_tokens);
  for (const auto& layer : payload.layers) {
    model::KVCacheLayer padded;
    padded.keys = Matrix::Zero(static_cast<Eigen::Index>(rows), layer.keys.cols());
    padded.values = Matrix::Zero(static_cast<Eigen::Index>(rows), layer.values.cols());
    padded.keys.topRows(n) = layer.keys.topRows(n);
    padded.values.topRows(n) = layer.values.topRows(n);
    out.layers.push_back(std::move(padded));
  }
  return out;
}

void StoreConfig::validate() const {
  if (capacity() == 0) throw ConfigError("store capacity N*M must be at least 1");
  if (block_size == 0) throw ConfigError("store block_size must be positive");
  if (eviction_batch == 0) throw ConfigError("store eviction_batch must be positive");
}

StoreConfig StoreConfig::from_config(const KeyValueConfig& cfg) {
  StoreConfig s;
  s.max_chunks = cfg.get_size("store.chunks", s.max_chunks);
  s.variants_per_chunk = cfg.get_size("store.variants", s.variants_per_chunk);
  s.block_size = cfg.get_size("store.block_size", s.block_size);
  s.eviction_batch = cfg.get_size("store.eviction_batch", s.eviction_batch);
  s.mode = parse_mode(cfg.get_string("store.eviction", "inline"));
  s.validate();
  return s;
}

CacheStore::CacheStore(StoreConfig config) : config_(config) { config_.validate(); }

CacheStore::CacheStore(const CacheStore& other) {
  std::shared_lock lock(other.mu_);
  config_ = other.config_;
  variants_ = other.variants_;
  by_chunk_ = other.by_chunk_;
  eviction_order_ = other.eviction_order_;
  next_id_ = other.next_id_;
  clock_ = other.clock_;
}

CacheStore& CacheStore::operator=(const CacheStore& other) {
  if (this == &other) return *this;
  CacheStore copy(other);
  std::unique_lock lock(mu_);
  config_ = std::move(copy.config_);
  variants_ = std::move(copy.variants_);
  by_chunk_ = std::move(copy.by_chunk_);
  eviction_order_ = std::move(copy.eviction_order_);
  next_id_ = copy.next_id_;
  clock_ = copy.clock_;
  return *this;
}

VariantId CacheStore::insert(ChunkHash chunk, VariantInfo info) {
  info.prefix.validate();
  if (info.payload) {
    if (info.payload->n_tokens != info.token_scores.size()) {
      throw ArgumentError("variant token_scores length != payload token count");
    }
    if (info.payload->rows() % config_.block_size != 0) {
      info.payload = std::make_shared<const model::ChunkCache>(pad_to_blocks(*info.payload, config_.block_size));
    }
  }

  std::unique_lock lock(mu_);
  auto& ids = by_chunk_[chunk];
  for (VariantId id : ids) {
    auto& v = variants_.at(id);
    if (v.info.prefix.ids == info.prefix.ids) {
      v.info = std::move(info);
      return id;
    }
  }
  Variant v;
  v.id = next_id_++;
  v.chunk = chunk;
  v.info = std::move(info);
  v.created_at = clock_++;
  ids.push_back(v.id);
  eviction_order_.insert(key_of(v));
  const VariantId id = v.id;
  variants_.emplace(id, std::move(v));
  enforce_capacity_locked();
  return id;
}

void CacheStore::enforce_capacity_locked() {
  const std::size_t cap = config_.capacity();
  if (variants_.size() <= cap) return;
  std::size_t count = variants_.size() - cap;
  if (config_.mode == EvictionMode::kBatched) count = std::max(count, config_.eviction_batch);
  evict_locked(count);
}

std::vector<Variant> CacheStore::lookup(ChunkHash chunk) const {
  std::shared_lock lock(mu_);
  std::vector<Variant> out;
  if (auto it = by_chunk_.find(chunk); it != by_chunk_.end()) {
    for (VariantId id : it->second) out.push_back(variants_.at(id));
  }
  return out;
}

std::vector<std::vector<Variant>> CacheStore::lookup_many(std::span<const ChunkHash> chunks) const {
  std::shared_lock lock(mu_);
  std::vector<std::vector<Variant>> out(chunks.size());
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (auto it = by_chunk_.find(chunks[i]); it != by_chunk_.end()) {
      for (VariantId id : it->second) out[i].push_back(variants_.at(id));
    }
  }
  return out;
}

std::optional<Variant> CacheStore::get(VariantId id) const {
  std::shared_lock lock(mu_);
  if (auto it = variants_.find(id); it != variants_.end()) return it->second;
  return std::nullopt;
}

double CacheStore::touch(VariantId id, double cfo) {
  std::unique_lock lock(mu_);
  auto it = variants_.find(id);
  if (it == variants_.end()) throw NotFoundError("touch: unknown variant " + std::to_string(id));
  auto& v = it->second;
  eviction_order_.erase(key_of(v));
  v.f_r += 1.0 / std::max(cfo, kCfoFloor);
  eviction_order_.insert(key_of(v));
  return v.f_r;
}

std::vector<VariantId> CacheStore::evict(std::size_t count) {
  std::unique_lock lock(mu_);
  return evict_locked(count);
}

std::vector<VariantId> CacheStore::evict_locked(std::size_t count) {
  std::vector<VariantId> victims;
  while (victims.size() < count && !eviction_order_.empty()) {
    const auto [f_r, created, id] = *eviction_order_.begin();
    eviction_order_.erase(eviction_order_.begin());
    const auto chunk = variants_.at(id).chunk;
    variants_.erase(id);
    auto& ids = by_chunk_[chunk];
    ids.erase(std::remove(ids.begin(), ids.end(), id), ids.end());
    if (ids.empty()) by_chunk_.erase(chunk);
    victims.push_back(id);
  }
  return victims;
}

std::size_t CacheStore::size() const {
  std::shared_lock lock(mu_);
  return variants_.size();
}

std::size_t CacheStore::chunk_count() const {
  std::shared_lock lock(mu_);
  return by_chunk_.size();
}

Census CacheStore::census() const {
  std::shared_lock lock(mu_);
  Census c;
  c.chunks = by_chunk_.size();
  for (const auto& [id, v] : variants_) {
    c.variants.push_back({id, v.chunk, v.f_r, v.created_at,
                          v.info.payload ? v.info.payload->payload_bytes() : 0});
  }
  for (const auto& [chunk, ids] : by_chunk_) ++c.histogram[ids.size()];
  return c;
}

void CacheStore::save(const std::filesystem::path& dir) const {
  std::shared_lock lock(mu_);
  std::error_code ec;
  std::filesystem::create_directories(dir / "payloads", ec);
  if (ec) throw IoError("cannot create snapshot directory " + dir.string() + ": " + ec.message());

  json manifest;
  manifest["version"] = 1;
  manifest["config"] = {{"chunks", config_.max_chunks},
                        {"variants", config_.variants_per_chunk},
                        {"block_size", config_.block_size},
                        {"eviction_batch", config_.eviction_batch},
                        {"eviction", mode_name(config_.mode)}};
  manifest["next_id"] = next_id_;
  manifest["clock"] = clock_;
  json variants = json::array();
  for (const auto& [id, v] : variants_) {
    json prefix_ids = json::array();
    for (const auto& p : v.info.prefix.ids) prefix_ids.push_back(hash_hex(p));
    json entry = {{"id", id},
                  {"chunk", hash_hex(v.chunk)},
                  {"prefix", {{"ids", prefix_ids}, {"weights", v.info.prefix.weights}}},
                  {"a_bar", v.info.a_bar},
                  {"b_bar", v.info.b_bar},
                  {"cci", v.info.cci},
                  {"token_scores", v.info.token_scores},
                  {"f_r", v.f_r},
                  {"created_at", v.created_at}};
    if (v.info.payload) {
      const std::string rel = "payloads/" + std::to_string(id) + ".kv";
      model::save_chunk_cache(dir / rel, *v.info.payload);
      entry["payload"] = rel;
    } else {
      entry["payload"] = nullptr;
    }
    variants.push_back(std::move(entry));
  }
  manifest["variants"] = std::move(variants);

  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

CacheStore CacheStore::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError(std::string("store manifest: ") + e.what());
  }
  try {
    StoreConfig cfg;
    const auto& c = manifest.at("config");
    cfg.max_chunks = c.at("chunks").get<std::size_t>();
    cfg.variants_per_chunk = c.at("variants").get<std::size_t>();
    cfg.block_size = c.at("block_size").get<std::size_t>();
    cfg.eviction_batch = c.at("eviction_batch").get<std::size_t>();
    cfg.mode = parse_mode(c.at("eviction").get<std::string>());
    CacheStore store(cfg);
    store.next_id_ = manifest.at("next_id").get<VariantId>();
    store.clock_ = manifest.at("clock").get<std::uint64_t>();
    for (const auto& e : manifest.at("variants")) {
      Variant v;
      v.id = e.at("id").get<VariantId>();
      v.chunk = parse_hash(e.at("chunk").get<std::string>());
      for (const auto& p : e.at("prefix").at("ids")) v.info.prefix.ids.push_back(parse_hash(p.get<std::string>()));
      v.info.prefix.weights = e.at("prefix").at("weights").get<std::vector<double>>();
      v.info.a_bar = e.at("a_bar").get<double>();
      v.info.b_bar = e.at("b_bar").get<double>();
      v.info.cci = e.at("cci").get<double>();
      v.info.token_scores = e.at("token_scores").get<std::vector<double>>();
      v.f_r = e.at("f_r").get<double>();
      v.created_at = e.at("created_at").get<std::uint64_t>();
      if (!e.at("payload").is_null()) {
        v.info.payload = std::make_shared<const model::ChunkCache>(
            model::load_chunk_cache(dir / e.at("payload").get<std::string>()));
      }
      store.by_chunk_[v.chunk].push_back(v.id);
      store.eviction_order_.insert(key_of(v));
      store.variants_.emplace(v.id, std::move(v));
    }
    return store;
  } catch (const json::exception& e) {
    throw IoError(std::string("store manifest: ") + e.what());
  }
}

}  // namespace cachecraft::store
