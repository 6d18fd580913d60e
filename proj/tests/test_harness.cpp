#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "lorank/harness.hpp"
#include "lorank/linalg.hpp"
#include "lorank/pipeline.hpp"
#include "support.hpp"

using namespace lorank;
namespace fs = std::filesystem;

namespace {

// Row i carries the value i in its only feature column.
Dataset indexed(std::size_t n) {
  Dataset d;
  d.features = Tensor<double>(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    d.features(i, 0) = static_cast<double>(i);
    d.labels.push_back(static_cast<int>(i % 2));
  }
  return d;
}

std::set<int> ids(const Dataset& d) {
  std::set<int> s;
  for (std::size_t i = 0; i < d.size(); ++i) s.insert(static_cast<int>(d.features(i, 0)));
  return s;
}

std::string temp_file(const std::string& name, const std::string& body) {
  const auto p = fs::path(::testing::TempDir()) / ("lorank_" + name);
  std::ofstream(p) << body;
  return p.string();
}

RunConfig one_layer_config() {
  RunConfig cfg;
  cfg.network.layer_dims = {16, 16, 4};
  cfg.planted.true_ranks = {2};
  cfg.retrain.train.epochs = 100;
  cfg.retrain.train.lr = 0.003;
  return cfg;
}

PlantedTaskSpec three_layer_spec(std::uint64_t seed) {
  PlantedTaskSpec s;
  s.network.layer_dims = {16, 16, 16, 16, 4};
  s.true_ranks = {1, 3, 6};
  s.pretrain_steps = 10;
  s.n_pretrain = 64;
  s.n_downstream = 32;
  s.n_test = 16;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Split, HalvesTen) {
  const auto [a, b] = split(indexed(10), 0.5, 1);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(b.size(), 5u);
}

TEST(Split, EightyTwenty) {
  const auto [a, b] = split(indexed(10), 0.8, 1);
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(b.size(), 2u);
}

TEST(Split, Errors) {
  EXPECT_THROW(split(indexed(1), 0.5, 0), DomainError);
  EXPECT_THROW(split(indexed(10), 0.0, 0), DomainError);
  EXPECT_THROW(split(indexed(10), 1.0, 0), DomainError);
}

TEST(SplitProperty, DisjointExhaustiveDeterministic) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const double ratio = 0.05 + 0.9 * rng.uniform();
    const std::uint64_t seed = rng.below(1000);
    const auto d = indexed(n);
    const auto [a, b] = split(d, ratio, seed);
    const auto sa = ids(a);
    const auto sb = ids(b);
    EXPECT_EQ(sa.size() + sb.size(), n);
    std::set<int> all = sa;
    all.insert(sb.begin(), sb.end());
    EXPECT_EQ(all, ids(d));
    EXPECT_GE(a.size(), 1u);
    EXPECT_GE(b.size(), 1u);
    const auto [a2, b2] = split(d, ratio, seed);
    EXPECT_EQ(a2.features, a.features);
    EXPECT_EQ(b2.labels, b.labels);
  }
}

TEST(Planted, PerturbationHasExactRankAndScale) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto t = make_planted_task(three_layer_spec(seed));
    const std::vector<std::string> layers{"fc0", "fc1", "fc2"};
    const std::vector<std::size_t> ranks{1, 3, 6};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& p = t.perturbations.at(layers[i]);
      const auto& w = t.pretrained.params.at(layers[i] + ".w");
      EXPECT_EQ(numerical_rank(p), ranks[i]);
      EXPECT_NEAR(frobenius_norm(p), 0.1 * frobenius_norm(w), 1e-12);
      EXPECT_EQ(t.teacher.params.at(layers[i] + ".w"), add(w, p));
    }
    EXPECT_EQ(t.teacher.params.at("head.w"), t.pretrained.params.at("head.w"));
  }
}

TEST(Planted, ZeroScaleLeavesThePretrainedTask) {
  auto s = three_layer_spec(4);
  s.perturbation_scale = 0.0;
  const auto t = make_planted_task(s);
  EXPECT_EQ(t.teacher.params, t.pretrained.params);
  for (const auto& [_, p] : t.perturbations) EXPECT_EQ(frobenius_norm(p), 0.0);
  EXPECT_EQ(evaluate(t.pretrained, t.downstream_train).loss, 0.0);
}

TEST(Planted, Deterministic) {
  const auto a = make_planted_task(three_layer_spec(5));
  const auto b = make_planted_task(three_layer_spec(5));
  EXPECT_EQ(a.downstream_train.features, b.downstream_train.features);
  EXPECT_EQ(a.downstream_train.targets, b.downstream_train.targets);
  EXPECT_EQ(a.downstream_test.targets, b.downstream_test.targets);
  EXPECT_FALSE(make_planted_task(three_layer_spec(6)).downstream_train.features == a.downstream_train.features);
}

TEST(Planted, InfeasibleRanks) {
  auto s = three_layer_spec(0);
  s.true_ranks = {1, 3};
  EXPECT_THROW(make_planted_task(s), DomainError);
  s.true_ranks = {1, 3, 9};
  EXPECT_THROW(make_planted_task(s), DomainError);
  s.network.layer_dims = {16, 4, 16, 16, 4};
  s.true_ranks = {5, 1, 1};
  EXPECT_THROW(make_planted_task(s), DomainError);
  s = three_layer_spec(0);
  s.true_ranks = {0, 1, 1};
  EXPECT_THROW(make_planted_task(s), DomainError);
}

TEST(Grid, EightRanksGiveEightTrials) {
  auto cfg = one_layer_config();
  cfg.retrain.train.epochs = 2;
  cfg.planted.n_downstream = 64;
  const auto task = build_task(cfg, 1);
  const auto g = run_grid(task, cfg, 1, 4);
  ASSERT_EQ(g.trials.size(), 8u);
  ASSERT_EQ(g.ledger.entries.size(), 8u);
  std::size_t sum = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(g.trials[i].rank, i + 1);
    EXPECT_EQ(g.trials[i].metrics.grad_evals, 2u * 4u);
    sum += g.ledger.entries[i].grad_evals;
  }
  EXPECT_EQ(g.ledger.total_grad_evals(), sum);
  EXPECT_EQ(sum, 8u * 2u * 4u);
  for (const auto& t : g.trials) EXPECT_GE(t.metrics.eval_loss, g.best().metrics.eval_loss);
}

TEST(Grid, SingletonAndOrderInvariance) {
  auto cfg = one_layer_config();
  cfg.retrain.train.epochs = 3;
  cfg.planted.n_downstream = 64;
  const auto task = build_task(cfg, 2);
  cfg.grid_ranks = {3};
  EXPECT_EQ(run_grid(task, cfg, 2).best_rank, 3u);

  cfg.grid_ranks = {1, 2, 4, 8};
  const auto a = run_grid(task, cfg, 2);
  cfg.grid_ranks = {8, 2, 4, 1, 2};
  const auto b = run_grid(task, cfg, 2, 3);
  EXPECT_EQ(a.best_rank, b.best_rank);
  ASSERT_EQ(a.trials.size(), b.trials.size());
  for (std::size_t i = 0; i < a.trials.size(); ++i) EXPECT_EQ(a.trials[i].metrics.eval_loss, b.trials[i].metrics.eval_loss);
}

TEST(Grid, EmptyRankSet) {
  const NetworkFactory f = [](std::size_t) { return Network{}; };
  EXPECT_THROW(grid_search(f, {}, Dataset{}, Dataset{}, {}), DomainError);
}

TEST(Grid, DivergingTrialIsMarkedAndSkipped) {
  auto cfg = one_layer_config();
  cfg.planted.n_downstream = 32;
  const auto task = build_task(cfg, 3);
  const NetworkFactory factory = [&](std::size_t rank) {
    Network net = attach_lora(task.pretrained, 1, ConstraintMode::softmax, {{"fc0", rank}}, false);
    if (rank == 4) net.params.at("head.w")[0] = std::nan("");
    return net;
  };
  const auto g = grid_search(factory, {2, 4}, task.train, task.test, {2, 16, 1e-3, 0});
  EXPECT_FALSE(g.trials[0].failed);
  EXPECT_TRUE(g.trials[1].failed);
  EXPECT_TRUE(g.ledger.entries[1].failed);
  EXPECT_EQ(g.best_rank, 2u);
}

TEST(Grid, PlantedRankTwoIsFound) {
  auto cfg = one_layer_config();
  cfg.grid_ranks = {1, 2, 4, 8};
  int hits = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto g = run_grid(build_task(cfg, seed), cfg, seed, 4);
    hits += g.best_rank == 2 || g.best_rank == 4;
  }
  EXPECT_GE(hits, 4);
}

TEST(Ledger, TotalsAreSums) {
  CostLedger l;
  l.add("search", 40, 1.5);
  l.add("retrain", 12, 0.25, true);
  CostLedger m;
  m.add("grid:rank=1", 7, 2.0);
  l.merge(m);
  EXPECT_EQ(l.total_grad_evals(), 59u);
  EXPECT_DOUBLE_EQ(l.total_wall_ms(), 3.75);
  EXPECT_EQ(CostLedger{}.total_grad_evals(), 0u);
}

TEST(Ledger, RankSearchCountsSearchAndRetrainOnly) {
  auto cfg = one_layer_config();
  cfg.planted.n_downstream = 64;
  cfg.search.max_meta_epochs = 2;
  cfg.retrain.train.epochs = 3;
  const auto run = run_rank_search(build_task(cfg, 1), cfg, 1);
  ASSERT_EQ(run.ledger.entries.size(), 2u);
  EXPECT_EQ(run.ledger.entries[0].phase, "search");
  EXPECT_EQ(run.ledger.entries[1].phase, "retrain");
  // 32 rows per side at batch 16: 2 weight steps + 2 hypergradients of cost 4 per epoch.
  EXPECT_EQ(run.ledger.entries[0].grad_evals, 2u * (2u + 2u * 4u));
  EXPECT_EQ(run.ledger.entries[1].grad_evals, 3u * 4u);
  EXPECT_EQ(run.ledger.total_grad_evals(), 20u + 12u);
}

TEST(FullFinetune, TrainsEveryWeight) {
  auto cfg = one_layer_config();
  cfg.planted.n_downstream = 32;
  cfg.retrain.train.epochs = 1;
  const auto task = build_task(cfg, 1);
  const auto f = run_fullft(task, cfg, 1);
  EXPECT_EQ(f.metrics.trainable_params, total_parameter_count(task.pretrained));
  EXPECT_TRUE(f.net.lora_layers().empty());
}

TEST(FullFinetune, ZeroEpochsKeepsPretrainedMetrics) {
  auto cfg = one_layer_config();
  cfg.planted.n_downstream = 32;
  const auto task = build_task(cfg, 2);
  const auto f = full_finetune(task.pretrained, task.train, task.test, {0, 16, 1e-3, 0});
  EXPECT_EQ(f.net.params, task.pretrained.params);
  EXPECT_EQ(f.metrics.eval_loss, evaluate(task.pretrained, task.test).loss);
  EXPECT_EQ(f.metrics.grad_evals, 0u);
}

TEST(FullFinetune, NoWorseThanUniformLora) {
  auto cfg = one_layer_config();
  cfg.grid_ranks = {8};
  cfg.fullft_lr = 1e-3;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto task = build_task(cfg, seed);
    const double lora = run_grid(task, cfg, seed).best().metrics.eval_loss;
    EXPECT_LE(run_fullft(task, cfg, seed).metrics.eval_loss, 1.1 * lora) << "seed " << seed;
  }
}

TEST(Csv, ThreeRowsTwoFeatures) {
  const auto path = temp_file("three.csv", "a,b,label\n1,2,0\n3.5,-4,1\n5,6e-3,2\n");
  const auto d = load_csv(path, {{}, "label", TaskKind::classification});
  EXPECT_EQ(d.features, Tensor<double>::from_rows({{1, 2}, {3.5, -4}, {5, 6e-3}}));
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(d.provenance, path);
}

TEST(Csv, SelectedColumnsAndRegression) {
  const auto path = temp_file("cols.csv", "y, x1 ,x2\r\n0.5,1,2\r\n1.5,3,4\r\n\n");
  const auto d = load_csv(path, {{"x2"}, "y", TaskKind::regression});
  EXPECT_EQ(d.features, Tensor<double>::from_rows({{2}, {4}}));
  EXPECT_EQ(d.targets, Tensor<double>::from_rows({{0.5}, {1.5}}));
}

TEST(Csv, Errors) {
  const CsvSchema schema{{}, "label", TaskKind::classification};
  EXPECT_THROW(load_csv(temp_file("header.csv", "a,label\n"), schema), DomainError);
  EXPECT_THROW(load_csv(temp_file("empty.csv", ""), schema), DomainError);
  EXPECT_THROW(load_csv("/nonexistent/x.csv", schema), IoError);
  EXPECT_THROW(load_csv(temp_file("ragged.csv", "a,label\n1,2,3\n"), schema), ParseError);
  EXPECT_THROW(load_csv(temp_file("frac.csv", "a,label\n1,0.5\n"), schema), ParseError);
  try {
    load_csv(temp_file("missing.csv", "a,b\n1,2\n"), schema);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("'label'"), std::string::npos);
  }
  try {
    load_csv(temp_file("bad.csv", "a,label\n1,0\nfoo,1\n"), schema);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'a'"), std::string::npos) << msg;
  }
}

TEST(CsvProperty, WriteThenLoadIsExact) {
  Rng rng(9);
  for (auto task : {TaskKind::classification, TaskKind::regression}) {
    NetworkSpec spec;
    spec.layer_dims = {3, 4, 3};
    spec.task = task;
    Dataset d = lorank::testing::random_dataset(spec, 20, rng);
    if (task == TaskKind::regression) d.targets = lorank::testing::random_tensor(20, 1, rng, 1e3);
    const auto path = (fs::path(::testing::TempDir()) / "lorank_roundtrip.csv").string();
    write_csv(path, d, {"f0", "f1", "f2"}, "y");
    const auto back = load_csv(path, {{}, "y", task});
    EXPECT_EQ(back.features, d.features);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.targets, d.targets);
  }
}
