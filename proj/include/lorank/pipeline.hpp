#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <optional>
#include <string>
#include <vector>

#include "lorank/config.hpp"
#include "lorank/harness.hpp"
#include "lorank/persistio.hpp"
#include "lorank/rankselect.hpp"

namespace lorank {

// Sub-seeds derived from the run seed, one stream per stage.
enum SeedStream : std::uint64_t {
  kSeedTask = 1,
  kSeedSplit = 2,
  kSeedLora = 3,
  kSeedSearch = 4,
  kSeedRetrain = 5,
  kSeedGrid = 6,
  kSeedFullft = 7,
  kSeedPretrain = 8,
};

struct TaskData {
  Network pretrained;
  Dataset train;
  Dataset test;
  std::vector<std::size_t> planted_ranks;
};

inline PlantedTaskSpec planted_spec(const RunConfig& cfg, std::uint64_t seed) {
  PlantedTaskSpec s = cfg.planted;
  s.network = cfg.network;
  s.seed = mix_seed(seed, kSeedTask);
  return s;
}

inline CsvSchema csv_schema(const RunConfig& cfg) { return {cfg.csv_features, cfg.csv_label, cfg.network.task}; }

inline TaskData build_task(const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TaskData t;
  if (cfg.source == TaskSource::planted) {
    auto p = make_planted_task(planted_spec(cfg, seed));
    t.pretrained = std::move(p.pretrained);
    t.train = std::move(p.downstream_train);
    t.test = std::move(p.downstream_test);
    t.planted_ranks = cfg.planted.true_ranks;
    return t;
  }
  if (cfg.checkpoint.empty()) throw ConfigError("task.source = csv needs task.checkpoint (see `lorank pretrain`)");
  t.pretrained = network_from(load_checkpoint(cfg.checkpoint));
  t.pretrained.scope = TrainScope::full;
  t.train = load_csv(cfg.csv_train, csv_schema(cfg));
  t.test = load_csv(cfg.csv_test, csv_schema(cfg));
  if (t.train.features.cols() != t.pretrained.spec.input_dim())
    throw DimensionError("csv features have " + std::to_string(t.train.features.cols()) + " columns, network expects " +
                         std::to_string(t.pretrained.spec.input_dim()));
  return t;
}

inline TrainConfig stage_train_config(const RunConfig& cfg, std::uint64_t seed, std::uint64_t stream) {
  TrainConfig c = cfg.retrain.train;
  c.seed = mix_seed(seed, stream);
  return c;
}

/// Retrains on train ∪ val in the same order the search split produced.
inline RetrainResult retrain_stage(const TaskData& task, const RunConfig& cfg, std::uint64_t seed,
                                   const Network& searched, const std::vector<RankDecision>& decisions) {
  auto [d_tr, d_val] = split(task.train, cfg.split_ratio, mix_seed(seed, kSeedSplit));
  RetrainConfig rc = cfg.retrain;
  rc.train = stage_train_config(cfg, seed, kSeedRetrain);
  return retrain(searched, decisions, concat(d_tr, d_val), rc, &task.test);
}

struct RankSearchRun {
  SearchResult search;
  std::vector<RankDecision> decisions;
  std::optional<RetrainResult> retrain;  // absent when the search aborted
  Evaluation test;
  std::size_t search_trainable = 0;
  std::size_t total_params = 0;
  CostLedger ledger;
};

/// Search, threshold, retrain on train ∪ val, evaluate on test.
inline RankSearchRun run_rank_search(const TaskData& task, const RunConfig& cfg, std::uint64_t seed) {
  RankSearchRun out;
  auto [d_tr, d_val] = split(task.train, cfg.split_ratio, mix_seed(seed, kSeedSplit));
  Network net = attach_lora(task.pretrained, mix_seed(seed, kSeedLora), cfg.search.constraint_mode);
  out.search_trainable = trainable_parameter_count(net);
  out.total_params = total_parameter_count(net);

  SearchConfig sc = cfg.effective_search();
  sc.seed = mix_seed(seed, kSeedSearch);
  out.search = meta_search(std::move(net), d_tr, d_val, sc);
  out.ledger.add("search", out.search.grad_evals, out.search.wall_ms, out.search.aborted);
  if (out.search.aborted) return out;

  out.decisions = decide_ranks(out.search.net);
  out.retrain = retrain_stage(task, cfg, seed, out.search.net, out.decisions);
  out.ledger.add("retrain", out.retrain->metrics.grad_evals, out.retrain->metrics.wall_ms);
  out.test = evaluate(out.retrain->net, task.test);
  return out;
}

inline GridResult run_grid(const TaskData& task, const RunConfig& cfg, std::uint64_t seed, std::size_t jobs = 1) {
  const auto lora_seed = mix_seed(seed, kSeedLora);
  const NetworkFactory factory = [&](std::size_t rank) {
    std::map<std::string, std::size_t> ranks;
    for (const auto& l : task.pretrained.spec.linears()) ranks[l.name] = rank;
    return attach_lora(task.pretrained, lora_seed, cfg.search.constraint_mode, ranks, false);
  };
  return grid_search(factory, cfg.grid_ranks, task.train, task.test, stage_train_config(cfg, seed, kSeedGrid), jobs);
}

inline FinetuneResult run_fullft(const TaskData& task, const RunConfig& cfg, std::uint64_t seed) {
  TrainConfig c = stage_train_config(cfg, seed, kSeedFullft);
  c.lr = cfg.fullft_lr;
  return full_finetune(task.pretrained, task.train, task.test, c);
}

// --- reports -----------------------------------------------------------------------

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline RunReport base_report(const std::string& command, const RunConfig& cfg, std::uint64_t seed) {
  RunReport r;
  r.command = command;
  r.seed = seed;
  r.config = config_echo(cfg);
  return r;
}

inline void add_grid(RunReport& r, const GridResult& g) {
  r.grid_best_rank = g.best_rank;
  for (const auto& t : g.trials)
    r.grid.push_back({t.rank, t.metrics.train_loss, t.metrics.eval_loss, t.metrics.grad_evals, t.failed, t.error});
  r.ledger.merge(g.ledger);
  r.metrics["grid_best_test_loss"] = g.best().metrics.eval_loss;
}

inline void add_fullft(RunReport& r, const FinetuneResult& f) {
  r.metrics["fullft_train_loss"] = f.metrics.train_loss;
  r.metrics["fullft_test_loss"] = f.metrics.eval_loss;
  if (f.metrics.eval_accuracy) r.metrics["fullft_test_accuracy"] = *f.metrics.eval_accuracy;
  r.param_counts["fullft_trainable"] = f.metrics.trainable_params;
  r.ledger.add("fullft", f.metrics.grad_evals, f.metrics.wall_ms);
}

inline void add_rank_search(RunReport& r, const RankSearchRun& run, const std::vector<std::size_t>& planted) {
  r.trajectory = run.search.trajectory;
  r.aborted = run.search.aborted;
  r.abort_reason = run.search.abort_reason;
  r.decisions = run.decisions;
  r.planted_ranks = planted;
  r.param_counts["total"] = run.total_params;
  r.param_counts["search_trainable"] = run.search_trainable;
  r.metrics["search_initial_val_loss"] = run.search.trajectory.initial_val_loss;
  if (!run.search.trajectory.epochs.empty()) {
    r.metrics["search_train_loss"] = run.search.trajectory.epochs.back().train_loss;
    r.metrics["search_val_loss"] = run.search.trajectory.epochs.back().val_loss;
  }
  if (run.retrain) {
    r.param_counts["retrain_trainable"] = run.retrain->metrics.trainable_params;
    r.metrics["retrain_train_loss"] = run.retrain->metrics.train_loss;
    r.metrics["test_loss"] = run.test.loss;
    if (run.test.accuracy) r.metrics["test_accuracy"] = *run.test.accuracy;
  }
  r.ledger.merge(run.ledger);
}

/// Clears wall-clock fields so reports of equal runs are byte-identical.
inline void strip_timing(RunReport& r) {
  for (auto& e : r.trajectory.epochs) e.wall_ms = 0.0;
  for (auto& e : r.ledger.entries) e.wall_ms = 0.0;
  r.timestamps.clear();
}

struct RunOutcome {
  RunReport report;
  std::optional<RankSearchRun> rank_search;
  std::optional<GridResult> grid;
  std::optional<FinetuneResult> fullft;
};

/// Executes `command` (search | grid | fullft) from config and seed alone.
inline RunOutcome execute(const std::string& command, const RunConfig& cfg, std::uint64_t seed, std::size_t jobs = 1) {
  const std::string started = utc_now();
  const TaskData task = build_task(cfg, seed);
  RunOutcome out;
  out.report = base_report(command, cfg, seed);
  if (command == "search") {
    out.rank_search = run_rank_search(task, cfg, seed);
    add_rank_search(out.report, *out.rank_search, task.planted_ranks);
    if (cfg.grid && !out.rank_search->search.aborted) out.grid = run_grid(task, cfg, seed, jobs);
    if (cfg.fullft && !out.rank_search->search.aborted) out.fullft = run_fullft(task, cfg, seed);
  } else if (command == "grid") {
    out.grid = run_grid(task, cfg, seed, jobs);
    out.report.planted_ranks = task.planted_ranks;
  } else if (command == "fullft") {
    out.fullft = run_fullft(task, cfg, seed);
  } else {
    throw ConfigError("cannot execute command '" + command + "'");
  }
  if (out.grid) add_grid(out.report, *out.grid);
  if (out.fullft) add_fullft(out.report, *out.fullft);
  if (cfg.timing) {
    out.report.timestamps["started"] = started;
    out.report.timestamps["finished"] = utc_now();
  } else {
    strip_timing(out.report);
  }
  return out;
}

// --- reproduction --------------------------------------------------------------------

namespace detail {

inline void compare_json(const nlohmann::json& a, const nlohmann::json& b, const std::string& path, double tol,
                         std::vector<std::string>& diffs) {
  static const std::vector<std::string> ignored{"wall_ms", "timestamps"};
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>();
    const double y = b.get<double>();
    if (!(std::abs(x - y) <= tol))
      diffs.push_back(path + ": " + nlohmann::json(x).dump() + " vs " + nlohmann::json(y).dump());
    return;
  }
  if (a.type() != b.type()) {
    diffs.push_back(path + ": " + a.dump() + " vs " + b.dump());
    return;
  }
  if (a.is_object()) {
    for (const auto& [k, v] : a.items()) {
      if (std::find(ignored.begin(), ignored.end(), k) != ignored.end()) continue;
      if (!b.contains(k)) {
        diffs.push_back(path + "/" + k + ": missing in reproduction");
        continue;
      }
      compare_json(v, b.at(k), path + "/" + k, tol, diffs);
    }
    for (const auto& [k, _] : b.items())
      if (!a.contains(k) && std::find(ignored.begin(), ignored.end(), k) == ignored.end())
        diffs.push_back(path + "/" + k + ": only in reproduction");
    return;
  }
  if (a.is_array()) {
    if (a.size() != b.size()) {
      diffs.push_back(path + ": length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
      return;
    }
    for (std::size_t i = 0; i < a.size(); ++i) compare_json(a[i], b[i], path + "/" + std::to_string(i), tol, diffs);
    return;
  }
  if (a != b) diffs.push_back(path + ": " + a.dump() + " vs " + b.dump());
}

}  // namespace detail

/// Numeric fields must agree within `tol`; everything else (ranks, kept
/// indices, flags) exactly. Wall-clock fields are skipped. Fields present in
/// the original but unknown to this version are ignored.
inline std::vector<std::string> compare_reports(const RunReport& original, const RunReport& rerun, double tol) {
  RunReport a = original;
  RunReport b = rerun;
  a.extras = nlohmann::json::object();
  b.extras = nlohmann::json::object();
  std::vector<std::string> diffs;
  detail::compare_json(to_json(a), to_json(b), "", tol, diffs);
  return diffs;
}

inline RunReport reproduce(const RunReport& original, std::size_t jobs = 1) {
  return execute(original.command, original.run_config(), original.seed, jobs).report;
}

}  // namespace lorank
