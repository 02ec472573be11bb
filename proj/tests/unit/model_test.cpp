#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "cachecraft/config_file.hpp"
#include "cachecraft/errors.hpp"
#include "cachecraft/kv_cache.hpp"
#include "cachecraft/model.hpp"
#include "cachecraft/rope.hpp"

namespace cachecraft::model {
namespace {

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_head = 16;
  c.seed = seed;
  return c;
}

TEST(BuildModelTest, SameSeedGivesIdenticalWeights) {
  const auto a = build_model(small_config(7));
  const auto b = build_model(small_config(7));
  EXPECT_EQ(a.flat_weights(), b.flat_weights());
}

TEST(BuildModelTest, DifferentSeedsGiveDifferentWeights) {
  EXPECT_NE(build_model(small_config(7)).flat_weights(), build_model(small_config(8)).flat_weights());
}

TEST(BuildModelTest, OddHeadDimensionIsRejected) {
  ModelConfig c;
  c.n_heads = 1;
  c.d_model = 7;
  c.d_head = 7;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(BuildModelTest, InconsistentWidthIsRejected) {
  ModelConfig c;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_head = 8;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(BuildModelTest, StructuralCounts) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_head = 16;
  c.vocab_size = 256;
  const auto m = build_model(c);
  EXPECT_EQ(m.n_attention_layers(), 4u);
  EXPECT_EQ(m.n_ffn_blocks(), 4u);
  EXPECT_EQ(m.embedding().rows(), 256);
  EXPECT_EQ(m.embedding().cols(), 32);
  EXPECT_EQ(m.layers().front().w_up.cols(), 128);
}

TEST(BuildModelTest, FromConfigReadsModelSection) {
  const auto kv = KeyValueConfig::parse("[model]\nlayers = 3\nheads = 2\nd_model = 32\nd_head = 16\nseed = 9\n");
  const auto c = ModelConfig::from_config(kv);
  EXPECT_EQ(c.n_layers, 3u);
  EXPECT_EQ(c.n_heads, 2u);
  EXPECT_EQ(c.d_head, 16u);
  EXPECT_EQ(c.seed, 9u);
}

TEST(BuildModelTest, PermutedHeadsKeepTheFunction) {
  const auto m = build_model(small_config(3));
  const std::vector<std::size_t> perm = {1, 0};
  const auto p = m.with_permuted_heads(perm);
  EXPECT_NE(m.flat_weights(), p.flat_weights());
}

// Explicit 2x2 rotation of each (j, j + half) pair; written independently
// of the library as an oracle.
Matrix rotate_reference(const Matrix& x, const std::vector<std::size_t>& pos, std::size_t dh, double base,
                        double sign) {
  Matrix out = x;
  const std::size_t half = dh / 2;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index h0 = 0; h0 < x.cols(); h0 += static_cast<Eigen::Index>(dh)) {
      for (std::size_t j = 0; j < half; ++j) {
        const double theta = sign * static_cast<double>(pos[static_cast<std::size_t>(r)]) *
                             std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
        const auto a = h0 + static_cast<Eigen::Index>(j);
        const auto b = a + static_cast<Eigen::Index>(half);
        out(r, a) = x(r, a) * std::cos(theta) - x(r, b) * std::sin(theta);
        out(r, b) = x(r, a) * std::sin(theta) + x(r, b) * std::cos(theta);
      }
    }
  }
  return out;
}

TEST(RopeTest, PositionZeroIsExactIdentity) {
  std::mt19937_64 rng(1);
  const Matrix x = Matrix::Random(5, 32);
  const std::vector<std::size_t> zeros(5, 0);
  EXPECT_EQ(apply_rpe(x, zeros, 16, 1e4), x);
  EXPECT_EQ(remove_rpe(x, zeros, 16, 1e4), x);
}

TEST(RopeTest, MatchesExplicitRotation) {
  const Matrix x = Matrix::Random(6, 32);
  const std::vector<std::size_t> pos = {0, 1, 7, 100, 4095, 33};
  const Matrix got = apply_rpe(x, pos, 16, 1e4);
  EXPECT_LT((got - rotate_reference(x, pos, 16, 1e4, 1.0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RopeTest, RemoveInvertsApply) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> p(0, 4096);
  const Matrix x = Matrix::Random(50, 64);
  std::vector<std::size_t> pos(50);
  for (auto& v : pos) v = p(rng);
  const Matrix back = remove_rpe(apply_rpe(x, pos, 16, 1e4), pos, 16, 1e4);
  EXPECT_LT((back - x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RopeTest, ReapplyAtNewPositionEqualsDirectApply) {
  const Matrix x = Matrix::Random(4, 32);
  const std::vector<std::size_t> p = {3, 10, 50, 200};
  const std::vector<std::size_t> q = {7, 2, 300, 201};
  const Matrix moved = apply_rpe(remove_rpe(apply_rpe(x, p, 16, 1e4), p, 16, 1e4), q, 16, 1e4);
  // Oracle: R(q) R(p)^T R(p) x composed with explicit rotations.
  const Matrix oracle = rotate_reference(
      rotate_reference(rotate_reference(x, p, 16, 1e4, 1.0), p, 16, 1e4, -1.0), q, 16, 1e4, 1.0);
  EXPECT_LT((moved - oracle).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((moved - apply_rpe(x, q, 16, 1e4)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RopeTest, RemovingAtWrongPositionIsDetectable) {
  const Matrix x = Matrix::Random(4, 32);
  const std::vector<std::size_t> p = {5, 6, 7, 8};
  const std::vector<std::size_t> wrong = {9, 10, 11, 12};
  const Matrix got = apply_rpe(remove_rpe(apply_rpe(x, p, 16, 1e4), wrong, 16, 1e4), wrong, 16, 1e4);
  const Matrix direct = apply_rpe(x, wrong, 16, 1e4);
  EXPECT_GT((got - direct).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(RopeTest, ShapeErrors) {
  const Matrix x = Matrix::Random(3, 32);
  const std::vector<std::size_t> two = {0, 1};
  EXPECT_THROW(apply_rpe(x, two, 16, 1e4), ShapeError);
  const std::vector<std::size_t> three = {0, 1, 2};
  EXPECT_THROW(apply_rpe(x, three, 15, 1e4), ShapeError);
  EXPECT_THROW(remove_rpe(x, three, 12, 1e4), ShapeError);
}

ChunkCache random_cache(std::size_t layers, std::size_t tokens, std::size_t d) {
  ChunkCache c;
  c.n_tokens = tokens;
  for (std::size_t l = 0; l < layers; ++l) {
    KVCacheLayer layer;
    layer.keys = Matrix::Random(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(d));
    layer.values = Matrix::Random(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(d));
    c.layers.push_back(layer);
  }
  return c;
}

TEST(KvContainerTest, RoundTripIsF32Exact) {
  const auto c = random_cache(3, 5, 8);
  std::stringstream buf;
  write_chunk_cache(buf, c);
  const auto back = read_chunk_cache(buf);
  ASSERT_EQ(back.n_layers(), 3u);
  EXPECT_EQ(back.n_tokens, 5u);
  EXPECT_EQ(back.pad, 0u);
  for (std::size_t l = 0; l < 3; ++l) {
    const Matrix expect = c.layers[l].keys.cast<float>().cast<double>();
    EXPECT_EQ(back.layers[l].keys, expect);
  }
}

TEST(KvContainerTest, PayloadSizing) {
  const auto c = random_cache(4, 16, 64);
  EXPECT_EQ(c.bytes_per_layer(), 2u * 16 * 64 * 4);
  EXPECT_EQ(c.payload_bytes(), 4u * 2 * 16 * 64 * 4);
}

TEST(KvContainerTest, CorruptInputIsRejected) {
  std::stringstream bad("XXXX garbage");
  EXPECT_THROW(read_chunk_cache(bad), IoError);
  const auto c = random_cache(1, 2, 4);
  std::stringstream buf;
  write_chunk_cache(buf, c);
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream truncated(bytes);
  EXPECT_THROW(read_chunk_cache(truncated), IoError);
}

}  // namespace
}  // namespace cachecraft::model
