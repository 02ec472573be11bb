#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include "cachecraft/types.hpp"

namespace cachecraft::workload {

using ChunkId = std::uint64_t;

// One retrieval-augmented request: k retrieved chunks (in retrieval order)
// followed by a fresh question.
struct TraceRecord {
  std::uint64_t id = 0;
  std::vector<ChunkId> chunks;
  TokenIds question;
  double arrival_s = 0.0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

// Token contents of every chunk id referenced by a trace.
class Corpus {
 public:
  void add(ChunkId id, TokenIds tokens) { chunks_[id] = std::move(tokens); }
  // Throws NotFoundError for unknown ids.
  const TokenIds& tokens(ChunkId id) const;
  bool contains(ChunkId id) const { return chunks_.contains(id); }
  std::size_t size() const { return chunks_.size(); }
  const std::map<ChunkId, TokenIds>& chunks() const { return chunks_; }

  friend bool operator==(const Corpus&, const Corpus&) = default;

 private:
  std::map<ChunkId, TokenIds> chunks_;
};

struct Trace {
  std::vector<TraceRecord> records;
  Corpus corpus;
};

// Throws ArgumentError if a record has no chunks or arrivals decrease.
void validate_trace(std::span<const TraceRecord> records);

struct SyntheticSpec {
  std::size_t n_chunks = 500;
  double zipf_s = 1.0;
  std::size_t k = 5;
  std::size_t n_requests = 500;
  std::size_t min_chunk_len = 16;
  std::size_t max_chunk_len = 64;
  std::size_t question_len = 8;
  std::size_t vocab = 256;
  double arrival_rate = 4.0;  // requests per second, Poisson arrivals
  std::uint64_t seed = 1;
};

// Each request draws k distinct chunks with probability proportional to
// rank^-zipf_s (chunk id = rank - 1), without replacement, in draw order.
// Throws ArgumentError if k > n_chunks, k == 0 or the length range is empty.
Trace gen_synthetic(const SyntheticSpec& spec);

// Fraction of all chunk retrievals that hit the most frequently retrieved
// ceil(top_fraction * n_chunks) chunks.
double top_share(std::span<const TraceRecord> records, std::size_t n_chunks, double top_fraction = 0.05);

// Grid search over zipf_s for the exponent whose generated trace brings
// top_share closest to target_share.
double tune_zipf(SyntheticSpec spec, double target_share = 0.6, double top_fraction = 0.05);

// One JSON object per line: {"id", "chunks", "question", "arrival_s"}.
void write_trace_jsonl(std::ostream& out, std::span<const TraceRecord> records);
std::vector<TraceRecord> read_trace_jsonl(std::istream& in);

// {"chunks": {"<id>": [tokens...], ...}}
void write_corpus_json(std::ostream& out, const Corpus& corpus);
Corpus read_corpus_json(std::istream& in);

// Trace file plus its corpus sidecar (<trace>.corpus.json by default).
void save_trace(const std::filesystem::path& trace_path, const Trace& trace);
Trace load_trace(const std::filesystem::path& trace_path,
                 const std::filesystem::path& corpus_path = {});
std::filesystem::path default_corpus_path(const std::filesystem::path& trace_path);

}  // namespace cachecraft::workload
