#include "cachecraft/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cachecraft/errors.hpp"

namespace cachecraft::workload {
namespace {

using json = nlohmann::json;

}  // namespace

const TokenIds& Corpus::tokens(ChunkId id) const {
  auto it = chunks_.find(id);
  if (it == chunks_.end()) throw NotFoundError("corpus has no chunk " + std::to_string(id));
  return it->second;
}

void validate_trace(std::span<const TraceRecord> records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].chunks.empty()) {
      throw ArgumentError("trace record " + std::to_string(records[i].id) + " has no chunks");
    }
    if (i > 0 && records[i].arrival_s < records[i - 1].arrival_s) {
      throw ArgumentError("trace arrivals must be non-decreasing");
    }
  }
}

Trace gen_synthetic(const SyntheticSpec& spec) {
  if (spec.k == 0) throw ArgumentError("gen_synthetic: k must be at least 1");
  if (spec.k > spec.n_chunks) throw ArgumentError("gen_synthetic: k exceeds the number of chunks");
  if (spec.min_chunk_len == 0 || spec.min_chunk_len > spec.max_chunk_len) {
    throw ArgumentError("gen_synthetic: invalid chunk length range");
  }
  if (spec.vocab == 0) throw ArgumentError("gen_synthetic: vocab must be positive");
  if (!(spec.zipf_s >= 0.0)) throw ArgumentError("gen_synthetic: zipf_s must be non-negative");

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<TokenId> token(0, static_cast<TokenId>(spec.vocab - 1));
  std::uniform_int_distribution<std::size_t> length(spec.min_chunk_len, spec.max_chunk_len);

  Trace trace;
  for (ChunkId id = 0; id < spec.n_chunks; ++id) {
    TokenIds tokens(length(rng));
    for (auto& t : tokens) t = token(rng);
    trace.corpus.add(id, std::move(tokens));
  }

  std::vector<double> weight(spec.n_chunks);
  for (std::size_t r = 0; r < spec.n_chunks; ++r) {
    weight[r] = std::pow(static_cast<double>(r + 1), -spec.zipf_s);
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::exponential_distribution<double> gap(spec.arrival_rate > 0.0 ? spec.arrival_rate : 1.0);
  std::vector<std::pair<double, ChunkId>> keys(spec.n_chunks);
  double clock = 0.0;
  for (std::size_t q = 0; q < spec.n_requests; ++q) {
    // Weighted sampling without replacement: the k largest log(u) / w keys
    // are distributed like k successive weighted draws, in draw order.
    for (ChunkId id = 0; id < spec.n_chunks; ++id) {
      double u = unit(rng);
      while (u <= 0.0) u = unit(rng);
      keys[id] = {std::log(u) / weight[id], id};
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(spec.k), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    TraceRecord rec;
    rec.id = q;
    for (std::size_t i = 0; i < spec.k; ++i) rec.chunks.push_back(keys[i].second);
    rec.question.resize(spec.question_len);
    for (auto& t : rec.question) t = token(rng);
    if (spec.arrival_rate > 0.0) clock += gap(rng);
    rec.arrival_s = clock;
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

double top_share(std::span<const TraceRecord> records, std::size_t n_chunks, double top_fraction) {
  std::unordered_map<ChunkId, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& r : records) {
    for (ChunkId c : r.chunks) {
      ++freq[c];
      ++total;
    }
  }
  if (total == 0) return 0.0;
  std::vector<std::size_t> counts;
  counts.reserve(freq.size());
  for (const auto& [c, n] : freq) counts.push_back(n);
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const auto top = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(n_chunks)));
  std::size_t covered = 0;
  for (std::size_t i = 0; i < std::min(top, counts.size()); ++i) covered += counts[i];
  return static_cast<double>(covered) / static_cast<double>(total);
}

double tune_zipf(SyntheticSpec spec, double target_share, double top_fraction) {
  double best_s = 0.0;
  double best_err = std::numeric_limits<double>::infinity();
  for (int step = 0; step <= 60; ++step) {
    spec.zipf_s = 0.05 * step;
    const Trace t = gen_synthetic(spec);
    const double err = std::abs(top_share(t.records, spec.n_chunks, top_fraction) - target_share);
    if (err < best_err) {
      best_err = err;
      best_s = spec.zipf_s;
    }
  }
  return best_s;
}

void write_trace_jsonl(std::ostream& out, std::span<const TraceRecord> records) {
  for (const auto& r : records) {
    json j = {{"id", r.id}, {"chunks", r.chunks}, {"question", r.question}, {"arrival_s", r.arrival_s}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("trace: write failed");
}

std::vector<TraceRecord> read_trace_jsonl(std::istream& in) {
  std::vector<TraceRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      TraceRecord r;
      r.id = j.at("id").get<std::uint64_t>();
      r.chunks = j.at("chunks").get<std::vector<ChunkId>>();
      r.question = j.at("question").get<TokenIds>();
      r.arrival_s = j.at("arrival_s").get<double>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw IoError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  validate_trace(records);
  return records;
}

void write_corpus_json(std::ostream& out, const Corpus& corpus) {
  json chunks = json::object();
  for (const auto& [id, tokens] : corpus.chunks()) chunks[std::to_string(id)] = tokens;
  out << json{{"chunks", chunks}}.dump() << '\n';
}

Corpus read_corpus_json(std::istream& in) {
  try {
    json j;
    in >> j;
    Corpus corpus;
    for (const auto& [key, tokens] : j.at("chunks").items()) {
      corpus.add(std::stoull(key), tokens.get<TokenIds>());
    }
    return corpus;
  } catch (const json::exception& e) {
    throw IoError(std::string("corpus: ") + e.what());
  } catch (const std::logic_error&) {
    throw IoError("corpus: bad chunk id");
  }
}

std::filesystem::path default_corpus_path(const std::filesystem::path& trace_path) {
  auto p = trace_path;
  p += ".corpus.json";
  return p;
}

void save_trace(const std::filesystem::path& trace_path, const Trace& trace) {
  std::ofstream out(trace_path);
  if (!out) throw IoError("cannot write " + trace_path.string());
  write_trace_jsonl(out, trace.records);
  std::ofstream corpus(default_corpus_path(trace_path));
  if (!corpus) throw IoError("cannot write " + default_corpus_path(trace_path).string());
  write_corpus_json(corpus, trace.corpus);
}

Trace load_trace(const std::filesystem::path& trace_path, const std::filesystem::path& corpus_path) {
  std::ifstream in(trace_path);
  if (!in) throw IoError("cannot read " + trace_path.string());
  Trace trace;
  trace.records = read_trace_jsonl(in);
  const auto cp = corpus_path.empty() ? default_corpus_path(trace_path) : corpus_path;
  std::ifstream corpus(cp);
  if (!corpus) throw IoError("cannot read corpus " + cp.string());
  trace.corpus = read_corpus_json(corpus);
  for (const auto& r : trace.records) {
    for (ChunkId c : r.chunks) {
      if (!trace.corpus.contains(c)) throw IoError("trace references unknown chunk " + std::to_string(c));
    }
  }
  return trace;
}

}  // namespace cachecraft::workload
