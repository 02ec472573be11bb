#include "cachecraft/prefill.hpp"

#include <future>
#include <memory>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "cachecraft/errors.hpp"
#include "cachecraft/experiments.hpp"
#include "cachecraft/model.hpp"
#include "fixtures.hpp"

namespace cachecraft::model {
namespace {

using testing::Prompt;
using testing::relative_error;
using testing::reuse_request;

class PrefillTest : public ::testing::Test {
 protected:
  Model model_ = build_model(ModelConfig{});
};

TEST_F(PrefillTest, FreshRequestRowsAreStochasticAndCausal) {
  std::mt19937_64 rng(1);
  const auto tokens = testing::random_tokens(rng, 8);
  const auto r = plain_prefill(model_, tokens);
  ASSERT_EQ(r.kv.size(), 4u);
  for (const auto& layer : r.kv) {
    EXPECT_EQ(layer.keys.rows(), 8);
    EXPECT_EQ(layer.values.rows(), 8);
  }
  ASSERT_EQ(r.attention.layers.size(), 4u);
  for (const auto& la : r.attention.layers) {
    ASSERT_EQ(la.heads.size(), 4u);
    for (const auto& h : la.heads) {
      for (Eigen::Index q = 0; q < h.rows(); ++q) {
        EXPECT_NEAR(h.row(q).sum(), 1.0, 1e-5);
        for (Eigen::Index k = q + 1; k < h.cols(); ++k) EXPECT_EQ(h(q, k), 0.0);
      }
    }
  }
}

TEST_F(PrefillTest, ExactReuseReproducesPlainPrefill) {
  std::mt19937_64 rng(2);
  const Prompt p = testing::random_prompt(rng, 3, 32, 6);
  const auto full = plain_prefill(model_, p.flat(), p.question.size());
  std::vector<std::shared_ptr<const ChunkCache>> caches;
  for (std::size_t i = 0; i < 3; ++i) {
    caches.push_back(std::make_shared<const ChunkCache>(full.extract_cache(p.chunk_span(i))));
  }
  const auto reused = prefill(model_, reuse_request(p, caches));
  EXPECT_LT(relative_error(reused.rows(p.question_span()), full.rows(p.question_span())), 1e-4);

  auto a = DecodeState::from(full);
  auto b = DecodeState::from(reused);
  EXPECT_EQ(decode(model_, a, 8), decode(model_, b, 8));
}

TEST_F(PrefillTest, FullRecomputeIgnoresInjectedGarbage) {
  std::mt19937_64 rng(3);
  const Prompt p = testing::random_prompt(rng, 3, 20, 5);
  std::vector<std::shared_ptr<const ChunkCache>> caches;
  std::vector<std::vector<std::size_t>> all;
  for (std::size_t i = 0; i < 3; ++i) {
    ChunkCache garbage;
    garbage.n_tokens = 20;
    for (std::size_t l = 0; l < 4; ++l) garbage.layers.push_back({Matrix::Random(20, 64) * 50.0, Matrix::Random(20, 64) * 50.0});
    caches.push_back(std::make_shared<const ChunkCache>(garbage));
    std::vector<std::size_t> idx(20);
    for (std::size_t t = 0; t < 20; ++t) idx[t] = t;
    all.push_back(idx);
  }
  const auto full = plain_prefill(model_, p.flat(), p.question.size());
  const auto mixed = prefill(model_, reuse_request(p, caches, all));
  EXPECT_LT((mixed.hidden - full.hidden).cwiseAbs().maxCoeff(), 1e-5);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_LT((mixed.kv[l].keys - full.kv[l].keys).cwiseAbs().maxCoeff(), 1e-5);
  }
  auto a = DecodeState::from(full);
  auto b = DecodeState::from(mixed);
  EXPECT_EQ(decode(model_, a, 6), decode(model_, b, 6));
}

TEST_F(PrefillTest, ReusedCachesFollowShiftedPositions) {
  std::mt19937_64 rng(4);
  Prompt p;
  p.chunks = {testing::random_tokens(rng, 16)};
  p.question = testing::random_tokens(rng, 4);
  const auto full = plain_prefill(model_, p.flat(), 4);
  const auto cache = std::make_shared<const ChunkCache>(full.extract_cache(p.chunk_span(0)));
  // Rotary attention depends on relative offsets only, so shifting every
  // position leaves the outputs unchanged if cached keys are re-rotated.
  auto req = reuse_request(p, {cache});
  for (auto& pos : req.positions) pos += 37;
  const auto shifted = prefill(model_, req);
  EXPECT_LT(relative_error(shifted.rows(p.question_span()), full.rows(p.question_span())), 1e-9);
}

TEST_F(PrefillTest, RecomputedQueriesOnlyForMaskedTokens) {
  std::mt19937_64 rng(5);
  const Prompt p = testing::random_prompt(rng, 2, 8, 2);
  const auto full = plain_prefill(model_, p.flat(), 2);
  const auto c0 = std::make_shared<const ChunkCache>(full.extract_cache(p.chunk_span(0)));
  const auto r = prefill(model_, reuse_request(p, {c0}, {{1, 5}}));
  const auto& rows = r.attention.layers[0].query_rows;
  const std::vector<std::size_t> expect = {1, 5, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17};
  EXPECT_EQ(rows, expect);
  EXPECT_EQ(r.computed_layers[0], 0u);
  EXPECT_EQ(r.computed_layers[1], 4u);
  EXPECT_FALSE(r.has_final_hidden[0]);
}

TEST_F(PrefillTest, LayerCutoffStopsRecomputation) {
  std::mt19937_64 rng(6);
  const Prompt p = testing::random_prompt(rng, 2, 8, 2);
  const auto full = plain_prefill(model_, p.flat(), 2);
  const auto c0 = std::make_shared<const ChunkCache>(full.extract_cache(p.chunk_span(0)));
  auto req = reuse_request(p, {c0}, {{0, 1, 2}});
  req.layer_cutoff.assign(req.n_tokens(), 4);
  req.layer_cutoff[1] = 2;
  const auto r = prefill(model_, req);
  EXPECT_EQ(r.computed_layers[1], 2u);
  EXPECT_EQ(r.attention.layers[1].row_of(1), 1);
  EXPECT_EQ(r.attention.layers[2].row_of(1), -1);
  // From the cutoff on, the token's KV comes from the cache.
  EXPECT_EQ(r.kv[3].keys.row(1), c0->layers[3].keys.row(1));
}

TEST_F(PrefillTest, PaddedCacheMatchesUnpadded) {
  std::mt19937_64 rng(7);
  const Prompt p = testing::random_prompt(rng, 2, 17, 3);
  const auto full = plain_prefill(model_, p.flat(), 3);
  std::vector<std::shared_ptr<const ChunkCache>> plain, padded;
  for (std::size_t i = 0; i < 2; ++i) {
    auto c = full.extract_cache(p.chunk_span(i));
    plain.push_back(std::make_shared<const ChunkCache>(c));
    ChunkCache pc = c;
    pc.pad = 15;
    for (auto& l : pc.layers) {
      l.keys.conservativeResize(32, Eigen::NoChange);
      l.values.conservativeResize(32, Eigen::NoChange);
      l.keys.bottomRows(15).setConstant(3.0);
      l.values.bottomRows(15).setConstant(-3.0);
    }
    padded.push_back(std::make_shared<const ChunkCache>(pc));
  }
  const auto a = prefill(model_, reuse_request(p, plain, {{2}, {0, 16}}));
  const auto b = prefill(model_, reuse_request(p, padded, {{2}, {0, 16}}));
  EXPECT_LT((a.rows(p.question_span()) - b.rows(p.question_span())).cwiseAbs().maxCoeff(), 1e-5);
}

TEST_F(PrefillTest, InconsistentRequestsThrowPlanError) {
  std::mt19937_64 rng(8);
  const Prompt p = testing::random_prompt(rng, 2, 6, 2);
  const auto full = plain_prefill(model_, p.flat(), 2);
  const auto good = std::make_shared<const ChunkCache>(full.extract_cache(p.chunk_span(0)));
  const auto short_cache = std::make_shared<const ChunkCache>(full.extract_cache({0, 4}));

  EXPECT_THROW(prefill(model_, reuse_request(p, {short_cache})), PlanError);

  auto no_cache = reuse_request(p, {});
  no_cache.recompute_mask[2] = false;
  EXPECT_THROW(prefill(model_, no_cache), PlanError);

  auto question_off = reuse_request(p, {good});
  question_off.recompute_mask.back() = false;
  EXPECT_THROW(prefill(model_, question_off), PlanError);

  auto bad_positions = reuse_request(p, {good});
  bad_positions.positions[3] = bad_positions.positions[2];
  EXPECT_THROW(prefill(model_, bad_positions), PlanError);
}

TEST_F(PrefillTest, HookCannotRaiseCutoffs) {
  std::mt19937_64 rng(9);
  const auto tokens = testing::random_tokens(rng, 6);
  PrefillOptions opts;
  opts.on_layer = [](std::size_t, const LayerAttention&, std::vector<std::size_t>& cut) { cut[0] = 99; };
  EXPECT_THROW(plain_prefill(model_, tokens, 1, opts), PlanError);
}

TEST_F(PrefillTest, DecodeIsDeterministicAndGrowsCache) {
  std::mt19937_64 rng(10);
  const auto r = plain_prefill(model_, testing::random_tokens(rng, 12));
  auto a = DecodeState::from(r);
  auto b = DecodeState::from(r);
  const auto ta = decode(model_, a, 5);
  EXPECT_EQ(ta, decode(model_, b, 5));
  EXPECT_EQ(ta.size(), 5u);
  EXPECT_EQ(a.kv.front().keys.rows(), 17);
  EXPECT_EQ(a.positions.size(), 17u);
}

TEST_F(PrefillTest, DecodeZeroStepsIsEmpty) {
  std::mt19937_64 rng(11);
  const auto r = plain_prefill(model_, testing::random_tokens(rng, 4));
  auto s = DecodeState::from(r);
  EXPECT_TRUE(decode(model_, s, 0).empty());
  EXPECT_EQ(s.kv.front().keys.rows(), 4);
}

TEST_F(PrefillTest, ConcurrentPrefillsShareTheModel) {
  std::mt19937_64 rng(12);
  const auto tokens = testing::random_tokens(rng, 40);
  const auto ref = plain_prefill(model_, tokens);
  auto run = [&] { return plain_prefill(model_, tokens).hidden; };
  auto f1 = std::async(std::launch::async, run);
  auto f2 = std::async(std::launch::async, run);
  EXPECT_EQ(f1.get(), ref.hidden);
  EXPECT_EQ(f2.get(), ref.hidden);
}

TEST_F(PrefillTest, RepairReducesDeviation) {
  std::mt19937_64 rng(13);
  double at_zero = 0.0, at_half = 0.0, at_full = 0.0;
  for (int trial = 0; trial < 4; ++trial) {
    const auto prompt = harness::random_reuse_prompt(rng, 3, 24, 16, 6, 256);
    const auto prepared = harness::prepare_reuse(model_, prompt);
    at_zero += harness::reuse_deviation(model_, prepared, harness::targeted_selection(prepared, 0.0));
    at_half += harness::reuse_deviation(model_, prepared, harness::targeted_selection(prepared, 0.5));
    at_full += harness::reuse_deviation(model_, prepared, harness::targeted_selection(prepared, 1.0));
  }
  EXPECT_GT(at_zero, at_half);
  EXPECT_GT(at_half, at_full);
  EXPECT_LT(at_full / 4, 1e-4);
}

}  // namespace
}  // namespace cachecraft::model
