#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lorank/config.hpp"
#include "lorank/persistio.hpp"
#include "lorank/pipeline.hpp"

namespace lorank {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

namespace detail {

struct CliOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out_dir;
  std::string checkpoint;
  std::string report_path;
};

inline void error_line(std::ostream& err, const std::string& kind, const std::string& msg) {
  std::string flat = msg;
  for (auto& ch : flat)
    if (ch == '\n') ch = ' ';
  err << "lorank:error:" << kind << ": " << flat << "\n";
}

// Precedence, lowest first: base, config file, LORANK_OUT, --set, --out.
inline RunConfig resolve_config(const CliOptions& o, RunConfig base = {}) {
  RunConfig cfg = o.config_path.empty() ? std::move(base) : load_config(o.config_path, std::move(base));
  if (const char* env = std::getenv("LORANK_OUT"); env != nullptr && *env != '\0') cfg.out_dir = env;
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, strip(kv.substr(0, eq)), strip(kv.substr(eq + 1)));
  }
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  cfg.validate();
  return cfg;
}

inline std::uint64_t require_seed(const CliOptions& o, const std::string& command) {
  if (!o.seed) throw ConfigError(command + " requires --seed");
  return *o.seed;
}

inline std::string out_path(const RunConfig& cfg, const std::string& file) {
  return (std::filesystem::path(cfg.out_dir) / file).string();
}

inline std::string fmt(double x, int precision = 6) {
  if (!std::isfinite(x)) return "-";
  std::ostringstream s;
  s << std::setprecision(precision) << x;
  return s.str();
}

inline std::string ranks_text(const std::vector<RankDecision>& ds) {
  std::string out;
  for (const auto& d : ds) out += (out.empty() ? "" : " ") + d.layer + "=" + std::to_string(d.rank());
  return out;
}

/// Per-layer rank table with the final α.
inline void print_rank_table(std::ostream& out, const RunReport& r) {
  const RunConfig cfg = r.run_config();
  out << "run: " << r.command << "  seed " << r.seed << "  constraint " << to_string(cfg.search.constraint_mode)
      << "  k_init " << cfg.network.k_init << "\n";
  if (r.aborted) out << "ABORTED: " << r.abort_reason << "\n";
  if (!r.decisions.empty()) {
    const bool planted = r.planted_ranks.size() == r.decisions.size();
    out << std::left << std::setw(10) << "layer" << std::setw(6) << "rank";
    if (planted) out << std::setw(9) << "planted";
    out << "alpha\n";
    for (std::size_t i = 0; i < r.decisions.size(); ++i) {
      const auto& d = r.decisions[i];
      out << std::left << std::setw(10) << d.layer << std::setw(6) << d.rank();
      if (planted) out << std::setw(9) << r.planted_ranks[i];
      for (std::size_t j = 0; j < d.alpha.size(); ++j) {
        const bool kept = std::find(d.kept.begin(), d.kept.end(), j) != d.kept.end();
        out << (j ? " " : "") << std::fixed << std::setprecision(3) << d.alpha[j] << (kept ? "*" : " ");
      }
      out.unsetf(std::ios::floatfield);
      out << "\n";
    }
  }
  if (!r.grid.empty()) {
    out << "grid (best rank " << r.grid_best_rank << "):";
    for (const auto& t : r.grid) out << " r" << t.rank << "=" << (t.failed ? "failed" : fmt(t.test_loss));
    out << "\n";
  }
  for (const auto& [k, v] : r.metrics) out << std::left << std::setw(24) << k << fmt(v, 10) << "\n";
  out << std::left << std::setw(24) << "grad_evals" << r.ledger.total_grad_evals() << "\n";
}

inline int cmd_pretrain(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::uint64_t seed = o.seed.value_or(0);
  Network net;
  if (cfg.source == TaskSource::planted) {
    net = make_planted_task(planted_spec(cfg, seed)).pretrained;
  } else {
    if (cfg.csv_pretrain.empty()) throw ConfigError("pretrain with task.source = csv needs task.csv_pretrain");
    const auto data = load_csv(cfg.csv_pretrain, csv_schema(cfg));
    net = pretrain(cfg.network, data, cfg.planted.pretrain_steps, cfg.planted.pretrain_lr,
                   mix_seed(seed, kSeedPretrain));
  }
  const auto path = out_path(cfg, "pretrained.ckpt");
  save_checkpoint(path, make_checkpoint(net, cfg, seed));
  out << "wrote " << path << "\n";
  return kExitOk;
}

inline void write_run(const RunConfig& cfg, const RunReport& report, const std::string& name, std::ostream& out) {
  const auto path = out_path(cfg, name + ".json");
  emit_report(report, path);
  out << "wrote " << path << "\n";
}

inline int cmd_search(const CliOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o);
  const std::uint64_t seed = require_seed(o, "search");
  auto run = execute("search", cfg, seed, o.jobs);
  const auto& a = *run.rank_search;
  write_run(cfg, run.report, "run", out);
  emit_trajectory_csv(run.report.trajectory, out_path(cfg, "trajectory.csv"));
  save_checkpoint(out_path(cfg, "search.ckpt"), make_checkpoint(a.search.net, cfg, seed));
  if (a.search.aborted) {
    error_line(err, "training", a.search.abort_reason);
    return kExitFailure;
  }
  save_checkpoint(out_path(cfg, "final.ckpt"), make_checkpoint(a.retrain->net, cfg, seed));
  out << "ranks: " << ranks_text(a.decisions) << "\n";
  out << "test_loss: " << fmt(a.test.loss, 10) << "\n";
  return kExitOk;
}

inline int cmd_retrain(const CliOptions& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("retrain requires --checkpoint (a search.ckpt)");
  const auto ckpt = load_checkpoint(o.checkpoint);
  const RunConfig cfg = resolve_config(o, parse_config(ckpt.config));
  const std::uint64_t seed = o.seed.value_or(ckpt.seed);

  const Network searched = network_from(ckpt);
  if (searched.selection_names().empty()) throw ConfigError(o.checkpoint + " holds no selection logits");
  const TaskData task = build_task(cfg, seed);
  const auto decisions = decide_ranks(searched);
  const auto result = retrain_stage(task, cfg, seed, searched, decisions);
  const auto path = out_path(cfg, "final.ckpt");
  save_checkpoint(path, make_checkpoint(result.net, cfg, seed));
  out << "ranks: " << ranks_text(decisions) << "\n";
  out << "train_loss: " << fmt(result.metrics.train_loss, 10) << "\n";
  out << "test_loss: " << fmt(result.metrics.eval_loss, 10) << "\n";
  out << "wrote " << path << "\n";
  return kExitOk;
}

inline int cmd_baseline(const std::string& command, const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::uint64_t seed = command == "grid" ? require_seed(o, command) : o.seed.value_or(0);
  const auto run = execute(command, cfg, seed, o.jobs);
  write_run(cfg, run.report, command, out);
  if (run.grid) {
    out << "best_rank: " << run.grid->best_rank << "\n";
    out << "best_test_loss: " << fmt(run.grid->best().metrics.eval_loss, 10) << "\n";
  }
  if (run.fullft) out << "test_loss: " << fmt(run.fullft->metrics.eval_loss, 10) << "\n";
  return kExitOk;
}

inline int cmd_eval(const CliOptions& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
  const auto ckpt = load_checkpoint(o.checkpoint);
  const RunConfig cfg = resolve_config(o, parse_config(ckpt.config));
  const std::uint64_t seed = o.seed.value_or(ckpt.seed);
  const Network net = network_from(ckpt);
  const TaskData task = build_task(cfg, seed);
  for (const auto& [name, data] : {std::pair{"train", &task.train}, std::pair{"test", &task.test}}) {
    const auto e = evaluate(net, *data);
    out << name << "_loss: " << fmt(e.loss, 10) << "\n";
    if (e.accuracy) out << name << "_accuracy: " << fmt(*e.accuracy, 6) << "\n";
  }
  return kExitOk;
}

inline int cmd_report(const CliOptions& o, std::ostream& out) {
  const auto r = load_report(o.report_path);
  print_rank_table(out, r);
  if (!r.trajectory.epochs.empty()) {
    RunConfig cfg = r.run_config();
    if (const char* env = std::getenv("LORANK_OUT"); env != nullptr && *env != '\0') cfg.out_dir = env;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    const auto stem = std::filesystem::path(o.report_path).stem().string();
    const auto path = out_path(cfg, stem + "_trajectory.csv");
    emit_trajectory_csv(r.trajectory, path);
    out << "wrote " << path << "\n";
  }
  return kExitOk;
}

inline int cmd_repro(const CliOptions& o, std::ostream& out) {
  const auto original = load_report(o.report_path);
  const auto rerun = reproduce(original, o.jobs);
  const auto diffs = compare_reports(original, rerun, 1e-12);
  if (diffs.empty()) {
    out << "MATCH\n";
    return kExitOk;
  }
  out << "MISMATCH (" << diffs.size() << " fields)\n";
  for (std::size_t i = 0; i < diffs.size() && i < 20; ++i) out << "  " << diffs[i] << "\n";
  return kExitFailure;
}

}  // namespace detail

/// Entry point of the `lorank` binary. Exit 0 on success, 1 on usage or
/// configuration errors, 2 on numeric or training failures (and on `repro`
/// mismatches).
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using detail::CliOptions;
  CLI::App app{"lorank: automatic per-layer LoRA rank search"};
  app.require_subcommand(1);
  app.footer("Config keys (key = default):\n" + config_help() +
             "\nLORANK_OUT overrides output.dir. --set and --out override the config file.");

  CliOptions o;
  auto common = [&o](CLI::App* sub, bool with_seed) {
    sub->add_option("--config", o.config_path, "key = value configuration file");
    sub->add_option("--set", o.overrides, "override one key, e.g. --set search.lr_a=0.01")->take_all();
    sub->add_option("--out", o.out_dir, "output directory");
    if (with_seed) sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--jobs", o.jobs, "worker threads for the grid")->check(CLI::PositiveNumber);
  };

  auto* pretrain_cmd = app.add_subcommand("pretrain", "write pretrained.ckpt for the configured task");
  common(pretrain_cmd, true);
  auto* search_cmd = app.add_subcommand("search", "rank search, thresholding and retraining; writes run.json");
  common(search_cmd, true);
  auto* retrain_cmd = app.add_subcommand("retrain", "retrain from a search checkpoint");
  common(retrain_cmd, true);
  retrain_cmd->add_option("--checkpoint", o.checkpoint, "search.ckpt from `search`")->required();
  auto* grid_cmd = app.add_subcommand("grid", "uniform-rank grid baseline; writes grid.json");
  common(grid_cmd, true);
  auto* fullft_cmd = app.add_subcommand("fullft", "full finetuning baseline; writes fullft.json");
  common(fullft_cmd, true);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the configured task");
  common(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  auto* report_cmd = app.add_subcommand("report", "print the rank table and write the trajectory CSV");
  report_cmd->add_option("report", o.report_path, "run report (JSON)")->required();
  report_cmd->add_option("--out", o.out_dir, "output directory");
  auto* repro_cmd = app.add_subcommand("repro", "re-run a report and compare every number");
  repro_cmd->add_option("report", o.report_path, "run report (JSON)")->required();
  repro_cmd->add_option("--jobs", o.jobs, "worker threads for the grid")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    detail::error_line(err, "usage", e.what());
    return kExitUsage;
  }

  try {
    if (*pretrain_cmd) return detail::cmd_pretrain(o, out);
    if (*search_cmd) return detail::cmd_search(o, out, err);
    if (*retrain_cmd) return detail::cmd_retrain(o, out);
    if (*grid_cmd) return detail::cmd_baseline("grid", o, out);
    if (*fullft_cmd) return detail::cmd_baseline("fullft", o, out);
    if (*eval_cmd) return detail::cmd_eval(o, out);
    if (*report_cmd) return detail::cmd_report(o, out);
    if (*repro_cmd) return detail::cmd_repro(o, out);
  } catch (const NumericError& e) {
    detail::error_line(err, e.kind(), e.what());
    return kExitFailure;
  } catch (const TrainingError& e) {
    detail::error_line(err, e.kind(), e.what());
    return kExitFailure;
  } catch (const Error& e) {
    detail::error_line(err, e.kind(), e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    detail::error_line(err, "internal", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace lorank
