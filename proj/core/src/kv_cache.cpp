#include "cachecraft/kv_cache.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "cachecraft/errors.hpp"

namespace cachecraft::model {
namespace {

constexpr std::array<char, 4> kMagic{'C', 'C', 'K', 'V'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("kv container: truncated header");
  return to_little(v);
}

void put_matrix(std::ostream& out, const Matrix& m) {
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_little(static_cast<float>(m.data()[i]));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Matrix get_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
  std::vector<float> buf(rows * cols);
  if (!in.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
    throw IoError("kv container: truncated payload");
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = static_cast<double>(to_little(buf[i]));
  return m;
}

}  // namespace

void ChunkCache::check_shape() const {
  const auto r = static_cast<Eigen::Index>(rows());
  const auto d = static_cast<Eigen::Index>(d_model());
  for (const auto& layer : layers) {
    if (layer.keys.rows() != r || layer.values.rows() != r || layer.keys.cols() != d ||
        layer.values.cols() != d) {
      throw ShapeError("chunk cache layer shape does not match " + std::to_string(rows()) + "x" +
                       std::to_string(d_model()));
    }
  }
}

void write_chunk_cache(std::ostream& out, const ChunkCache& cache) {
  cache.check_shape();
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(cache.n_layers()));
  put_u32(out, static_cast<std::uint32_t>(cache.n_tokens));
  put_u32(out, static_cast<std::uint32_t>(cache.d_model()));
  put_u32(out, static_cast<std::uint32_t>(cache.pad));
  for (const auto& layer : cache.layers) {
    put_matrix(out, layer.keys);
    put_matrix(out, layer.values);
  }
  if (!out) throw IoError("kv container: write failed");
}

ChunkCache read_chunk_cache(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("kv container: bad magic");
  }
  if (const auto version = get_u32(in); version != kVersion) {
    throw IoError("kv container: unsupported version " + std::to_string(version));
  }
  ChunkCache cache;
  const auto n_layers = get_u32(in);
  cache.n_tokens = get_u32(in);
  const auto d_model = get_u32(in);
  cache.pad = get_u32(in);
  cache.layers.resize(n_layers);
  for (auto& layer : cache.layers) {
    layer.keys = get_matrix(in, cache.rows(), d_model);
    layer.values = get_matrix(in, cache.rows(), d_model);
  }
  return cache;
}

void save_chunk_cache(const std::filesystem::path& path, const ChunkCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_chunk_cache(out, cache);
}

ChunkCache load_chunk_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_chunk_cache(in);
}

}  // namespace cachecraft::model
