#include "cachecraft/recompute_planner.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "cachecraft/cache_store.hpp"
#include "cachecraft/errors.hpp"
#include "cachecraft/experiments.hpp"
#include "cachecraft/model.hpp"
#include "cachecraft/prefill.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace cachecraft::planner {
namespace {

std::shared_ptr<const model::ChunkCache> dummy_payload(std::size_t n) {
  auto c = std::make_shared<model::ChunkCache>();
  c->n_tokens = n;
  c->layers.assign(4, model::KVCacheLayer{Matrix::Zero(static_cast<Eigen::Index>(n), 8),
                                          Matrix::Zero(static_cast<Eigen::Index>(n), 8)});
  return c;
}

store::VariantInfo variant_info(std::vector<ChunkHash> prefix, std::vector<double> weights, double cci,
                                std::size_t n) {
  store::VariantInfo info;
  info.prefix = {std::move(prefix), std::move(weights)};
  info.cci = cci;
  info.token_scores.resize(n);
  for (std::size_t t = 0; t < n; ++t) info.token_scores[t] = static_cast<double>((t * 7) % n);
  info.payload = dummy_payload(n);
  return info;
}

// ---- select_tokens ----

TEST(SelectTokensTest, ZeroAndOne) {
  const std::vector<double> s = {0.3, 0.1, 0.9, 0.4};
  EXPECT_TRUE(select_tokens(s, 0.0).empty());
  EXPECT_EQ(select_tokens(s, 1.0), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SelectTokensTest, ThirtyPercentOfTen) {
  const std::vector<double> s = {0.5, 0.1, 0.8, 0.05, 0.7, 0.2, 0.3, 0.15, 0.6, 0.01};
  EXPECT_EQ(select_tokens(s, 0.3), (std::vector<std::size_t>{2, 4, 8}));
  EXPECT_EQ(select_tokens(s, 0.3), testing::sort_select(s, 0.3));
}

TEST(SelectTokensTest, TiesGoToLowerIndex) {
  const std::vector<double> s = {1.0, 2.0, 2.0, 2.0};
  EXPECT_EQ(select_tokens(s, 0.5), (std::vector<std::size_t>{1, 2}));
}

TEST(SelectTokensTest, RejectsOutOfRange) {
  const std::vector<double> s = {1.0};
  EXPECT_THROW(select_tokens(s, -0.01), ArgumentError);
  EXPECT_THROW(select_tokens(s, 1.01), ArgumentError);
}

TEST(SelectTokensTest, MatchesSortOracleOnRandomInputs) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 64;
    std::vector<double> s(n);
    // Half the trials use a small alphabet to exercise ties.
    for (auto& x : s) x = trial % 2 ? u(rng) : static_cast<double>(coarse(rng));
    const double cfo = u(rng);
    const auto got = select_tokens(s, cfo);
    EXPECT_EQ(got, testing::sort_select(s, cfo)) << "n=" << n << " cfo=" << cfo;
    EXPECT_TRUE(std::is_sorted(got.begin(), got.end()));
  }
}

// ---- focused chunks ----

TEST(FocusTest, PlantedDominanceHandTrace) {
  // Cumulative after any layer sorts as [dominant, rest...] with zero gaps
  // among the rest: p = (1, 0, 0), entropies all 0, jumps all 0, so the
  // lowest index i* = 1 wins and F = {dominant}. Stable after w = 2 layers.
  const std::vector<std::vector<double>> stream(4, std::vector<double>{0.1, 0.7, 0.1, 0.1});
  const auto r = predict_focused(stream, 2, 4);
  EXPECT_EQ(r.focused, (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.cutoff_layer, 2u);
  EXPECT_FALSE(r.degenerate);
}

TEST(FocusTest, ReshufflingStreamFallsBack) {
  // Each layer adds a large score to a different chunk so the leader keeps
  // changing and no set survives two consecutive layers.
  std::vector<std::vector<double>> stream;
  for (std::size_t l = 0; l < 4; ++l) {
    std::vector<double> s(4, 0.0);
    s[l] = 10.0 * static_cast<double>(l + 1);
    stream.push_back(s);
  }
  const auto r = predict_focused(stream, 2, 4);
  EXPECT_EQ(r.focused, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(r.cutoff_layer, 4u);
}

TEST(FocusTest, FewerThanThreeChunksIsDegenerate) {
  const std::vector<std::vector<double>> stream(4, std::vector<double>{0.9, 0.1});
  const auto r = predict_focused(stream, 2, 4);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.focused, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.cutoff_layer, 4u);
}

TEST(FocusTest, AllEqualScoresKeepEveryChunk) {
  EXPECT_EQ(focused_at_layer(std::vector<double>{0.2, 0.2, 0.2}), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(FocusTest, WindowOfOneStopsAtFirstLayer) {
  const std::vector<std::vector<double>> stream(3, std::vector<double>{0.5, 0.1, 0.2, 0.05});
  const auto r = predict_focused(stream, 1, 3);
  EXPECT_EQ(r.cutoff_layer, 1u);
  EXPECT_FALSE(r.focused.empty());
}

TEST(FocusTest, MatchesLiteralReferenceOnRandomStreams) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t k = 3 + rng() % 6;
    const std::size_t L = 1 + rng() % 8;
    const std::size_t w = 1 + rng() % 3;
    std::vector<std::vector<double>> stream(L, std::vector<double>(k));
    for (auto& row : stream) {
      for (auto& x : row) x = trial % 3 == 0 ? std::round(u(rng) * 3.0) : u(rng);
    }
    const auto got = predict_focused(stream, w, L);
    const auto want = testing::reference_predict(stream, w, L);
    EXPECT_EQ(got.focused, want.focused);
    EXPECT_EQ(got.cutoff_layer, want.cutoff_layer);
    EXPECT_FALSE(got.focused.empty());
    EXPECT_GE(got.cutoff_layer, 1u);
    EXPECT_LE(got.cutoff_layer, L);
    if (got.cutoff_layer < L || got.focused.size() < k) {
      EXPECT_EQ(got.focused, testing::reference_focus_at(stream, got.cutoff_layer - 1));
    }
    EXPECT_EQ(predict_focused(stream, w, L).focused, got.focused);
  }
}

TEST(FocusTest, TrackerRejectsBadArguments) {
  EXPECT_THROW(FocusTracker(4, 0, 4), ArgumentError);
  EXPECT_THROW(FocusTracker(4, 2, 0), ArgumentError);
  FocusTracker t(4, 2, 4);
  EXPECT_THROW(t.observe(std::vector<double>{1.0, 2.0}), ArgumentError);
  EXPECT_THROW(focused_at_layer(std::vector<double>{1.0, 2.0}), ArgumentError);
}

// ---- build_plan ----

class BuildPlanTest : public ::testing::Test {
 protected:
  BuildPlanTest() {
    std::mt19937_64 rng(33);
    for (int i = 0; i < 4; ++i) request_.chunks.push_back(testing::random_tokens(rng, 10));
    request_.question = testing::random_tokens(rng, 3);
    for (const auto& c : request_.chunks) ids_.push_back(store::chunk_hash(c));
  }

  PlanRequest request_;
  std::vector<ChunkHash> ids_;
};

TEST_F(BuildPlanTest, EmptyStoreGivesAllMiss) {
  store::CacheStore s;
  const auto plan = build_plan(request_, s, 1.0, 4);
  EXPECT_EQ(plan.hits(), 0u);
  for (const auto& c : plan.chunks) {
    EXPECT_EQ(c.status, ChunkStatus::kMiss);
    EXPECT_TRUE(c.recompute.empty());
    EXPECT_EQ(c.payload, nullptr);
  }
  EXPECT_EQ(plan.total_tokens(), 43u);
  EXPECT_EQ(plan.computed_tokens(), 43u);
  EXPECT_EQ(plan.computed_token_layers(), 43u * 4);
  EXPECT_EQ(plan.question.begin, 40u);
  EXPECT_EQ(plan.question.length, 3u);
  const auto req = to_prefill_request(plan, request_);
  EXPECT_TRUE(std::all_of(req.recompute_mask.begin(), req.recompute_mask.end(), [](bool b) { return b; }));
  for (const auto& seg : req.segments) EXPECT_EQ(seg.cache, nullptr);
}

TEST_F(BuildPlanTest, SamePrefixHitsNeedNoRecompute) {
  store::CacheStore s;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<ChunkHash> prefix(ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(i));
    s.insert(ids_[i], variant_info(prefix, std::vector<double>(i, 0.5), 0.9, 10));
  }
  const auto plan = build_plan(request_, s, 3.0, 4);
  EXPECT_EQ(plan.hits(), 4u);
  for (const auto& c : plan.chunks) {
    EXPECT_DOUBLE_EQ(c.score.beta, 1.0);
    EXPECT_DOUBLE_EQ(c.score.gamma, 0.0);
    EXPECT_EQ(c.score.cfo, 0.0);
    EXPECT_TRUE(c.recompute.empty());
  }
  EXPECT_EQ(plan.computed_tokens(), 3u);
}

TEST_F(BuildPlanTest, ChoosesMinimumCfoVariant) {
  store::CacheStore s;
  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Three variants of chunk 3 with different creation prefixes.
  std::vector<store::VariantInfo> infos = {
      variant_info({ids_[2], ids_[1]}, {0.4, 0.2}, 0.8, 10),
      variant_info({ids_[0], ChunkHash{99}}, {0.1, 0.5}, 0.6, 10),
      variant_info({ChunkHash{77}}, {0.3}, 0.95, 10),
  };
  for (const auto& info : infos) s.insert(ids_[3], info);
  for (double alpha : {0.5, 1.0, 2.0, 4.0}) {
    const auto plan = build_plan(request_, s, alpha, 4);
    const auto& c = plan.chunks[3];
    ASSERT_EQ(c.status, ChunkStatus::kHit);
    const std::span<const ChunkHash> prefix(ids_.data(), 3);
    double best = 2.0;
    VariantId best_id = 0;
    for (const auto& v : s.lookup(ids_[3])) {
      const double f = scoring::score(v.info.prefix, v.info.cci, prefix, alpha).cfo;
      if (f < best) {
        best = f;
        best_id = v.id;
      }
    }
    EXPECT_EQ(c.variant, best_id) << "alpha=" << alpha;
    EXPECT_DOUBLE_EQ(c.score.cfo, best);
    EXPECT_EQ(c.recompute, select_tokens(c.token_scores, best));
    EXPECT_EQ(c.recompute.size(), static_cast<std::size_t>(std::ceil(best * 10 - 1e-9)));
  }
}

TEST_F(BuildPlanTest, EarlyTerminationOnlyTouchesUnfocusedHits) {
  store::CacheStore s;
  for (std::size_t i = 1; i < 4; ++i) s.insert(ids_[i], variant_info({ChunkHash{5}}, {1.0}, 1.0, 10));
  auto plan = build_plan(request_, s, 1.0, 4);
  ASSERT_EQ(plan.chunks[0].status, ChunkStatus::kMiss);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(plan.chunks[i].recompute.size(), 10u);

  const auto unchanged = apply_early_termination(plan, FocusResult{{0, 1, 2, 3}, 2, false});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(unchanged.chunks[i].cutoff_layer, 4u);

  const auto cut = apply_early_termination(plan, FocusResult{{2}, 2, false});
  EXPECT_EQ(cut.chunks[0].cutoff_layer, 4u);
  EXPECT_EQ(cut.chunks[1].cutoff_layer, 2u);
  EXPECT_EQ(cut.chunks[2].cutoff_layer, 4u);
  EXPECT_EQ(cut.chunks[3].cutoff_layer, 2u);
  EXPECT_EQ(cut.computed_tokens_at(1), 43u);
  EXPECT_EQ(cut.computed_tokens_at(2), 10u + 10u + 3u);
  EXPECT_EQ(cut.computed_token_layers(), 10u * 4 + 10u * 2 + 10u * 4 + 10u * 2 + 3u * 4);

  const auto req = to_prefill_request(cut, request_);
  EXPECT_EQ(req.layer_cutoff[10], 2u);
  EXPECT_EQ(req.layer_cutoff[20], 4u);
  EXPECT_EQ(req.layer_cutoff[0], 4u);
}

TEST_F(BuildPlanTest, MissChunksNeverListRecomputeTokens) {
  std::mt19937_64 rng(35);
  store::CacheStore s;
  for (int round = 0; round < 20; ++round) {
    const std::size_t i = rng() % 4;
    s.insert(ids_[i], variant_info({ChunkHash{rng() % 5 + 1}}, {1.0}, 0.5, 10));
    auto plan = build_plan(request_, s, 1.0 + static_cast<double>(round % 3), 4);
    plan = with_fixed_fraction(plan, 0.4);
    for (const auto& c : plan.chunks) {
      if (c.status == ChunkStatus::kMiss) {
        EXPECT_TRUE(c.recompute.empty());
      } else {
        EXPECT_EQ(c.recompute.size(), 4u);
        EXPECT_TRUE(std::is_sorted(c.recompute.begin(), c.recompute.end()));
        EXPECT_LT(c.recompute.back(), 10u);
      }
    }
  }
}

TEST_F(BuildPlanTest, JsonRoundTripKeepsEverythingButPayloads) {
  store::CacheStore s;
  s.insert(ids_[2], variant_info({ids_[0]}, {0.7}, 0.7, 10));
  auto plan = apply_early_termination(build_plan(request_, s, 2.0, 4), FocusResult{{0}, 3, false});
  std::stringstream buf;
  write_plan_json(buf, plan);
  const auto back = read_plan_json(buf);
  ASSERT_EQ(back.chunks.size(), plan.chunks.size());
  EXPECT_EQ(back.positions, plan.positions);
  EXPECT_EQ(back.n_layers, plan.n_layers);
  EXPECT_EQ(back.focus_window, plan.focus_window);
  EXPECT_EQ(back.question.begin, plan.question.begin);
  for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
    EXPECT_EQ(back.chunks[i].chunk, plan.chunks[i].chunk);
    EXPECT_EQ(back.chunks[i].status, plan.chunks[i].status);
    EXPECT_EQ(back.chunks[i].variant, plan.chunks[i].variant);
    EXPECT_EQ(back.chunks[i].recompute, plan.chunks[i].recompute);
    EXPECT_EQ(back.chunks[i].cutoff_layer, plan.chunks[i].cutoff_layer);
    EXPECT_NEAR(back.chunks[i].score.cfo, plan.chunks[i].score.cfo, 1e-12);
    EXPECT_EQ(back.chunks[i].payload, nullptr);
  }
  std::istringstream bad("{\"chunks\": 3}");
  EXPECT_THROW(read_plan_json(bad), IoError);
}

TEST_F(BuildPlanTest, PrefillRequestRejectsMismatchedPlans) {
  store::CacheStore s;
  auto plan = build_plan(request_, s, 1.0, 4);
  PlanRequest shorter = request_;
  shorter.chunks.pop_back();
  EXPECT_THROW(to_prefill_request(plan, shorter), PlanError);
}

// ---- with the reference model ----

class PlannerModelTest : public ::testing::Test {
 protected:
  model::Model model_ = model::build_model(model::ModelConfig{});
};

TEST_F(PlannerModelTest, FocusHookMatchesOfflinePrediction) {
  std::mt19937_64 rng(36);
  const auto prompt = harness::random_reuse_prompt(rng, 4, 16, 8, 6, 256);
  const auto prepared = harness::prepare_reuse(model_, prompt);
  // Reference: question attention per layer from a run without the hook.
  const auto req = to_prefill_request(prepared.plan, prepared.request);
  const auto plain = model::prefill(model_, req);
  std::vector<std::vector<double>> stream;
  for (const auto& layer : plain.attention.layers) stream.push_back(question_chunk_attention(layer, prepared.plan));
  const auto offline = predict_focused(stream, prepared.plan.focus_window, 4);

  auto decision = std::make_shared<std::optional<FocusResult>>();
  model::PrefillOptions opts;
  opts.on_layer = make_focus_hook(prepared.plan, decision);
  model::prefill(model_, req, opts);
  if (offline.cutoff_layer < 4) {
    ASSERT_TRUE(decision->has_value());
    EXPECT_EQ((*decision)->focused, offline.focused);
    EXPECT_EQ((*decision)->cutoff_layer, offline.cutoff_layer);
  } else {
    // A decision at the very last layer is also allowed.
    if (decision->has_value()) EXPECT_EQ((*decision)->cutoff_layer, 4u);
  }
}

TEST_F(PlannerModelTest, TargetedSelectionBeatsRandomOnAverage) {
  double targeted = 0.0, random = 0.0;
  std::mt19937_64 pick(37);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const auto prompt = harness::random_reuse_prompt(rng, 3, 16, 16, 4, 256);
    const auto prepared = harness::prepare_reuse(model_, prompt);
    targeted += harness::reuse_deviation(model_, prepared, harness::targeted_selection(prepared, 0.3));
    random += harness::reuse_deviation(model_, prepared, harness::random_selection(prepared, 0.3, pick));
  }
  EXPECT_LE(targeted / 20.0, random / 20.0);
}

TEST_F(PlannerModelTest, EarlyTerminationSavesWorkWithSmallQualityLoss) {
  double q_full = 0.0, q_early = 0.0;
  std::size_t work_full = 0, work_early = 0;
  const int n = 10;
  for (int seed = 0; seed < n; ++seed) {
    std::mt19937_64 rng(2000 + static_cast<std::uint64_t>(seed));
    const auto prompt = harness::random_reuse_prompt(rng, 5, 16, 16, 6, 256);
    auto prepared = harness::prepare_reuse(model_, prompt);
    // Four layers leave a window of three only the last layer to cut.
    prepared.plan.focus_window = 2;
    const double naive = harness::reuse_deviation(
        model_, prepared, std::vector<std::vector<std::size_t>>(prepared.plan.chunks.size() - harness::first_reused(prepared)));
    const auto plan = with_fixed_fraction(prepared.plan, 0.5);
    const auto req = to_prefill_request(plan, prepared.request);
    model::PrefillOptions quiet;
    const auto full = model::prefill(model_, req, quiet);
    auto decision = std::make_shared<std::optional<FocusResult>>();
    model::PrefillOptions hooked;
    hooked.on_layer = make_focus_hook(plan, decision);
    const auto early = model::prefill(model_, req, hooked);
    const double d_full = model::mean_row_distance(full.rows(plan.question), prepared.oracle);
    const double d_early = model::mean_row_distance(early.rows(plan.question), prepared.oracle);
    q_full += std::clamp(1.0 - d_full / naive, 0.0, 1.0);
    q_early += std::clamp(1.0 - d_early / naive, 0.0, 1.0);
    work_full += std::accumulate(full.computed_layers.begin(), full.computed_layers.end(), std::size_t{0});
    work_early += std::accumulate(early.computed_layers.begin(), early.computed_layers.end(), std::size_t{0});
  }
  EXPECT_LT(work_early, work_full);
  EXPECT_GE(q_early, 0.9 * q_full);
}

}  // namespace
}  // namespace cachecraft::planner
