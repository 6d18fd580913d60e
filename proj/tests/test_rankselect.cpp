#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lorank/harness.hpp"
#include "lorank/linalg.hpp"
#include "lorank/rankselect.hpp"
#include "support.hpp"

using namespace lorank;
using lorank::testing::max_abs_diff;
using lorank::testing::random_tensor;

namespace {

AlphaVector random_beta(Rng& rng, std::size_t k, double sd = 2.0) {
  AlphaVector b(k);
  for (auto& x : b) x = rng.normal(0.0, sd);
  return b;
}

LoraLinear random_layer(Rng& rng, std::size_t m, std::size_t n, std::size_t k) {
  LoraLinear l;
  l.w_tilde = random_tensor(m, n, rng);
  l.u = random_tensor(m, k, rng);
  l.v = random_tensor(k, n, rng);
  l.beta = random_tensor(1, k, rng);
  return l;
}

// Σ_{j ∈ idx} α_j · u[:, j] v[j, :], summed term by term.
Tensor<double> partial_update(const LoraLinear& l, const AlphaVector& a, const std::vector<std::size_t>& idx) {
  Tensor<double> out(l.u.rows(), l.v.cols());
  for (std::size_t j : idx)
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += a[j] * l.u(r, j) * l.v(j, c);
  return out;
}

}  // namespace

TEST(Threshold, UniformKeepsEverything) {
  const auto d = threshold_ranks(AlphaVector(8, 0.125), ConstraintMode::softmax);
  EXPECT_DOUBLE_EQ(d.threshold, 0.125);
  EXPECT_EQ(d.rank(), 8u);
}

TEST(Threshold, ExactExponentials) {
  const auto d = threshold_ranks(alphas(AlphaVector{std::log(2.0), 0.0, 0.0}, ConstraintMode::softmax),
                                 ConstraintMode::softmax);
  EXPECT_DOUBLE_EQ(d.threshold, 1.0 / 3.0);
  EXPECT_EQ(d.kept, (std::vector<std::size_t>{0}));
}

TEST(Threshold, OneDominantLogit) {
  const auto d = threshold_ranks(alphas(AlphaVector{4, 0, 0, 0, 0, 0, 0, 0}, ConstraintMode::softmax),
                                 ConstraintMode::softmax);
  EXPECT_DOUBLE_EQ(d.threshold, 0.125);
  EXPECT_EQ(d.rank(), 1u);
}

TEST(Threshold, AblationModes) {
  const auto s = threshold_ranks(AlphaVector{0.5, 0.49, 0.9}, ConstraintMode::sigmoid);
  EXPECT_DOUBLE_EQ(s.threshold, 0.5);
  EXPECT_EQ(s.kept, (std::vector<std::size_t>{0, 2}));

  const auto n = threshold_ranks(AlphaVector{-1.0, 2.0, 5.0}, ConstraintMode::none);
  EXPECT_DOUBLE_EQ(n.threshold, 2.0);
  EXPECT_EQ(n.kept, (std::vector<std::size_t>{1, 2}));

  EXPECT_EQ(threshold_ranks(AlphaVector{0.1, 0.2}, ConstraintMode::sigmoid).rank(), 0u);
}

TEST(Threshold, EmptyIsDomainError) {
  EXPECT_THROW(threshold_ranks(AlphaVector{}, ConstraintMode::softmax), DomainError);
}

TEST(ThresholdProperty, SoftmaxRankWithinBounds) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 1 + rng.below(16);
    const auto a = alphas(random_beta(rng, k, 4.0), ConstraintMode::softmax);
    const auto d = threshold_ranks(a, ConstraintMode::softmax);
    EXPECT_GE(d.rank(), 1u);
    EXPECT_LE(d.rank(), k);
    EXPECT_TRUE(std::is_sorted(d.kept.begin(), d.kept.end()));
    for (std::size_t j = 0; j < k; ++j)
      EXPECT_EQ(std::find(d.kept.begin(), d.kept.end(), j) != d.kept.end(), a[j] >= 1.0 / static_cast<double>(k));
  }
}

TEST(ThresholdProperty, PermutationEquivariance) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(10);
    for (auto mode : {ConstraintMode::softmax, ConstraintMode::sigmoid, ConstraintMode::none}) {
      const auto a = alphas(random_beta(rng, k), mode);
      std::vector<std::size_t> perm(k);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      rng.shuffle(perm);
      AlphaVector permuted(k);
      for (std::size_t j = 0; j < k; ++j) permuted[j] = a[perm[j]];
      const auto d = threshold_ranks(a, mode);
      const auto p = threshold_ranks(permuted, mode);
      ASSERT_EQ(d.rank(), p.rank());
      std::vector<std::size_t> mapped;
      for (std::size_t j : p.kept) mapped.push_back(perm[j]);
      std::sort(mapped.begin(), mapped.end());
      EXPECT_EQ(mapped, d.kept);
    }
  }
}

TEST(ThresholdProperty, RaisingAKeptComponentKeepsIt) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng.below(10);
    const auto a = alphas(random_beta(rng, k), ConstraintMode::softmax);
    const auto before = threshold_ranks(a, ConstraintMode::softmax);
    const std::size_t j = before.kept[rng.below(before.rank())];
    const double raised = a[j] + rng.uniform() * (1.0 - a[j]);
    AlphaVector b = a;
    for (std::size_t i = 0; i < k; ++i) b[i] = i == j ? raised : a[i] * (1.0 - raised) / (1.0 - a[j]);
    const auto after = threshold_ranks(b, ConstraintMode::softmax);
    EXPECT_NE(std::find(after.kept.begin(), after.kept.end(), j), after.kept.end());
  }
}

TEST(Prune, AllKeptMatchesSoftForward) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto l = random_layer(rng, 6, 5, 4);
    const auto a = alphas(l.beta.vec(), ConstraintMode::softmax);
    RankDecision all{"fc0", a, ConstraintMode::softmax, 0.0, {0, 1, 2, 3}};
    const auto p = prune(l, all);
    EXPECT_FALSE(p.has_selection());
    EXPECT_LT(max_abs_diff(effective_weight(p), effective_weight(l)), 1e-12);
  }
}

TEST(Prune, OneHotKeepsSingleOuterProduct) {
  Rng rng(5);
  auto l = random_layer(rng, 4, 3, 5);
  const AlphaVector a{0, 0, 1, 0, 0};
  const auto p = prune(l, {"fc0", a, ConstraintMode::softmax, 0.2, {2}});
  EXPECT_EQ(p.rank(), 1u);
  const auto want = partial_update(l, a, {2});
  EXPECT_LT(max_abs_diff(sub(effective_weight(p), l.w_tilde), want), 1e-15);
}

TEST(Prune, DroppedMassIsExactlyTheDifference) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto l = random_layer(rng, 7, 6, 8);
    const auto a = alphas(l.beta.vec(), ConstraintMode::softmax);
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] > a[y]; });
    std::vector<std::size_t> kept(order.begin(), order.begin() + 2);
    std::vector<std::size_t> dropped(order.begin() + 2, order.end());
    std::sort(kept.begin(), kept.end());

    const auto p = prune(l, {"fc0", a, ConstraintMode::softmax, 0.0, kept});
    const double diff = frobenius_norm(sub(effective_weight(l), effective_weight(p)));
    EXPECT_NEAR(diff, frobenius_norm(partial_update(l, a, dropped)), 1e-12);
    EXPECT_EQ(p.w_tilde, l.w_tilde);
    EXPECT_LE(numerical_rank(sub(effective_weight(p), p.w_tilde)), 2u);
  }
}

TEST(Prune, Errors) {
  Rng rng(7);
  const auto l = random_layer(rng, 3, 3, 4);
  const AlphaVector a(4, 0.25);
  EXPECT_THROW(prune(l, {"fc0", a, ConstraintMode::none, 1.0, {}}), DomainError);
  EXPECT_THROW(prune(l, {"fc0", AlphaVector(3, 0.3), ConstraintMode::softmax, 0.3, {0}}), DimensionError);
  LoraLinear fixed = l;
  fixed.beta = {};
  EXPECT_THROW(prune(fixed, {"fc0", a, ConstraintMode::softmax, 0.25, {0}}), DomainError);
}

namespace {

struct Searched {
  Network net;
  Dataset merged;
};

Searched searched_network(std::uint64_t seed) {
  NetworkSpec spec;
  spec.layer_dims = {5, 8, 8, 2};
  spec.k_init = 4;
  Rng rng(seed);
  Network net = lorank::testing::random_lora_network(spec, rng);
  return {net, lorank::testing::random_dataset(spec, 24, rng)};
}

}  // namespace

TEST(Retrain, WarmFullRankStartsAtSoftLoss) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = searched_network(seed);
    std::vector<RankDecision> all;
    for (const auto& [layer, a] : alpha_snapshot(s.net)) {
      RankDecision d{layer, a, s.net.mode, 0.0, {}};
      d.kept.resize(a.size());
      std::iota(d.kept.begin(), d.kept.end(), std::size_t{0});
      all.push_back(d);
    }
    RetrainConfig c;
    c.init = RetrainInit::warm;
    c.train.epochs = 2;
    const auto r = retrain(s.net, all, s.merged, c);
    EXPECT_NEAR(r.metrics.initial_loss, evaluate(s.net, s.merged).loss, 1e-9);
    EXPECT_EQ(r.net.scope, TrainScope::lora_fixed);
  }
}

TEST(Retrain, ZeroEpochsReturnsReinitializedNetwork) {
  const auto s = searched_network(4);
  const auto decisions = decide_ranks(s.net);
  RetrainConfig c;
  c.train.epochs = 0;
  const auto r = retrain(s.net, decisions, s.merged, c);
  EXPECT_EQ(r.metrics.steps, 0u);
  EXPECT_DOUBLE_EQ(r.metrics.initial_loss, r.metrics.train_loss);
  for (const auto& d : decisions) {
    EXPECT_EQ(r.ranks.at(d.layer), d.rank());
    const auto l = r.net.lora_layer(d.layer);
    EXPECT_EQ(l.rank(), d.rank());
    EXPECT_FALSE(l.has_selection());
    EXPECT_EQ(l.v, Tensor<double>(d.rank(), l.v.cols()));
    EXPECT_EQ(l.w_tilde, s.net.params.at(d.layer + ".w"));
  }
}

TEST(Retrain, RankZeroRemovesTheUpdate) {
  const auto s = searched_network(5);
  auto decisions = decide_ranks(s.net);
  decisions[0].kept.clear();
  RetrainConfig c;
  c.train.epochs = 0;
  const auto r = retrain(s.net, decisions, s.merged, c);
  EXPECT_EQ(r.ranks.at(decisions[0].layer), 0u);
  EXPECT_EQ(r.net.params.count(decisions[0].layer + ".lora_u"), 0u);
}

TEST(DecideRanks, FollowsLayerOrder) {
  const auto s = searched_network(6);
  const auto d = decide_ranks(s.net);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].layer, "fc0");
  EXPECT_EQ(d[1].layer, "fc1");
  for (const auto& r : d) EXPECT_GE(r.rank(), 1u);
}

TEST(RetrainInit, Parse) {
  EXPECT_EQ(parse_retrain_init("warm"), RetrainInit::warm);
  EXPECT_EQ(parse_retrain_init(to_string(RetrainInit::fresh)), RetrainInit::fresh);
  EXPECT_THROW(parse_retrain_init("hot"), ConfigError);
}
