#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lorank/bilevel.hpp"
#include "lorank/harness.hpp"
#include "lorank/rankselect.hpp"

namespace lorank {

enum class TaskSource { planted, csv };

inline std::string to_string(TaskSource s) { return s == TaskSource::planted ? "planted" : "csv"; }

inline TaskSource parse_task_source(const std::string& s) {
  if (s == "planted") return TaskSource::planted;
  if (s == "csv") return TaskSource::csv;
  throw ConfigError("unknown task source '" + s + "' (expected planted|csv)");
}

/// Everything a run needs apart from the seed.
struct RunConfig {
  TaskSource source = TaskSource::planted;
  std::string csv_pretrain;
  std::string csv_train;
  std::string csv_test;
  std::string csv_label = "label";
  std::vector<std::string> csv_features;
  std::string checkpoint;

  PlantedTaskSpec planted;  // .network is ignored; `network` below is used
  NetworkSpec network;

  SearchConfig search;
  bool eta_follows_lr_w = true;  // search.eta = lr_w
  double split_ratio = 0.5;

  // The search settings with a tied η resolved.
  SearchConfig effective_search() const {
    SearchConfig s = search;
    if (eta_follows_lr_w) s.eta = s.lr_w;
    return s;
  }

  RetrainConfig retrain{{50, 16, 1e-4, 0}, RetrainInit::fresh};

  bool grid = false;
  std::vector<std::size_t> grid_ranks{1, 2, 3, 4, 5, 6, 7, 8};
  bool fullft = false;
  double fullft_lr = 1e-4;

  std::string out_dir = "runs";
  bool timing = false;

  void validate() const {
    effective_search().validate();
    network.validate();
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split.ratio must lie in (0, 1)");
    if (retrain.train.epochs == 0) throw ConfigError("retrain.epochs must be >= 1");
    if (retrain.train.batch_size == 0) throw ConfigError("retrain.batch_size must be >= 1");
    if (!(retrain.train.lr > 0.0)) throw ConfigError("retrain.lr must be > 0");
    if (grid_ranks.empty()) throw ConfigError("baseline.grid_ranks must not be empty");
    if (source == TaskSource::csv && (csv_train.empty() || csv_test.empty()))
      throw ConfigError("task.source = csv needs task.csv_train and task.csv_test");
  }
};

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  return x;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& s) {
  std::uint64_t x = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + s + "'");
}

inline std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (strip(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(strip(item));
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

inline std::vector<std::size_t> parse_counts(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) out.push_back(parse_count(key, item));
  return out;
}

inline std::string counts_text(const std::vector<std::size_t>& xs) {
  return join(xs, [](std::size_t x) { return std::to_string(x); });
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

}  // namespace detail

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// The full key table, in the order used by `--help` and config echoes.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto str = [&k](std::string key, std::string help, std::string RunConfig::*field) {
      k.push_back({key, std::move(help), [field](RunConfig& c, const std::string& v) { c.*field = v; },
                   [field](const RunConfig& c) { return c.*field; }});
    };
    auto num = [&k](std::string key, std::string help, auto get_ref) {
      k.push_back({key, std::move(help),
                   [key, get_ref](RunConfig& c, const std::string& v) { get_ref(c) = parse_double(key, v); },
                   [get_ref](const RunConfig& c) { return format_double(get_ref(c)); }});
    };
    auto cnt = [&k](std::string key, std::string help, auto get_ref) {
      k.push_back({key, std::move(help),
                   [key, get_ref](RunConfig& c, const std::string& v) {
                     get_ref(c) = static_cast<std::remove_reference_t<decltype(get_ref(c))>>(parse_count(key, v));
                   },
                   [get_ref](const RunConfig& c) { return std::to_string(get_ref(c)); }});
    };
    auto flag = [&k](std::string key, std::string help, bool RunConfig::*field) {
      k.push_back({key, std::move(help),
                   [key, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(key, v); },
                   [field](const RunConfig& c) { return bool_text(c.*field); }});
    };

    k.push_back({"task.source", "planted | csv",
                 [](RunConfig& c, const std::string& v) { c.source = parse_task_source(v); },
                 [](const RunConfig& c) { return to_string(c.source); }});
    str("task.csv_pretrain", "CSV used by `pretrain` when task.source = csv", &RunConfig::csv_pretrain);
    str("task.csv_train", "downstream training CSV", &RunConfig::csv_train);
    str("task.csv_test", "downstream test CSV", &RunConfig::csv_test);
    str("task.csv_label", "label column name", &RunConfig::csv_label);
    k.push_back({"task.csv_features", "feature columns, comma separated (empty: all but the label)",
                 [](RunConfig& c, const std::string& v) { c.csv_features = split_list(v); },
                 [](const RunConfig& c) { return join(c.csv_features, [](const std::string& s) { return s; }); }});
    str("task.checkpoint", "pretrained checkpoint for task.source = csv", &RunConfig::checkpoint);

    k.push_back({"planted.true_ranks", "planted perturbation rank per LoRA layer",
                 [](RunConfig& c, const std::string& v) { c.planted.true_ranks = parse_counts("planted.true_ranks", v); },
                 [](const RunConfig& c) { return counts_text(c.planted.true_ranks); }});
    num("planted.perturbation_scale", "perturbation size relative to 0.1 * |W|_F",
        [](auto& c) -> auto& { return c.planted.perturbation_scale; });
    cnt("planted.n_pretrain", "pretraining examples", [](auto& c) -> auto& { return c.planted.n_pretrain; });
    cnt("planted.n_downstream", "downstream training examples (before the train/val split)",
        [](auto& c) -> auto& { return c.planted.n_downstream; });
    cnt("planted.n_test", "downstream test examples", [](auto& c) -> auto& { return c.planted.n_test; });
    num("planted.noise", "label noise standard deviation", [](auto& c) -> auto& { return c.planted.noise; });
    cnt("planted.pretrain_steps", "full-batch pretraining steps",
        [](auto& c) -> auto& { return c.planted.pretrain_steps; });
    num("planted.pretrain_lr", "pretraining learning rate", [](auto& c) -> auto& { return c.planted.pretrain_lr; });

    k.push_back({"model.kind", "mlp | tiny_attention",
                 [](RunConfig& c, const std::string& v) { c.network.kind = parse_network_kind(v); },
                 [](const RunConfig& c) { return to_string(c.network.kind); }});
    k.push_back({"model.layer_dims", "mlp: in,hidden...,out; tiny_attention: d_model,d_ff,out",
                 [](RunConfig& c, const std::string& v) { c.network.layer_dims = parse_counts("model.layer_dims", v); },
                 [](const RunConfig& c) { return counts_text(c.network.layer_dims); }});
    k.push_back({"model.lora_mask", "0/1 per linear layer (empty: hidden linears, or q,v for attention)",
                 [](RunConfig& c, const std::string& v) {
                   c.network.lora_mask.clear();
                   for (auto x : parse_counts("model.lora_mask", v)) c.network.lora_mask.push_back(x != 0);
                 },
                 [](const RunConfig& c) {
                   return join(c.network.lora_mask, [](bool b) { return std::string(b ? "1" : "0"); });
                 }});
    cnt("model.k_init", "initial rank budget per layer", [](auto& c) -> auto& { return c.network.k_init; });
    k.push_back({"model.task", "classification | regression",
                 [](RunConfig& c, const std::string& v) { c.network.task = parse_task_kind(v); },
                 [](const RunConfig& c) { return to_string(c.network.task); }});
    cnt("model.seq_len", "tokens per example (tiny_attention)",
        [](auto& c) -> auto& { return c.network.seq_len; });
    num("model.lora_init_std", "standard deviation of the initial u factor",
        [](auto& c) -> auto& { return c.network.lora_init_std; });

    k.push_back({"search.eta", "lookahead step size, or lr_w to follow the weight learning rate",
                 [](RunConfig& c, const std::string& v) {
                   c.eta_follows_lr_w = v == "lr_w";
                   if (!c.eta_follows_lr_w) c.search.eta = parse_double("search.eta", v);
                 },
                 [](const RunConfig& c) { return c.eta_follows_lr_w ? std::string("lr_w") : format_double(c.search.eta); }});
    num("search.lr_w", "weight learning rate", [](auto& c) -> auto& { return c.search.lr_w; });
    num("search.lr_a", "selection-logit learning rate", [](auto& c) -> auto& { return c.search.lr_a; });
    cnt("search.batch_size", "minibatch size", [](auto& c) -> auto& { return c.search.batch_size; });
    cnt("search.max_meta_epochs", "meta-epoch cap",
        [](auto& c) -> auto& { return c.search.max_meta_epochs; });
    cnt("search.patience", "epochs without validation improvement before stopping",
        [](auto& c) -> auto& { return c.search.patience; });
    num("search.min_delta", "smallest validation improvement that resets patience",
        [](auto& c) -> auto& { return c.search.min_delta; });
    k.push_back({"search.hypergrad_mode", "exact | darts_fd | first_order",
                 [](RunConfig& c, const std::string& v) { c.search.hypergrad_mode = parse_hypergrad_mode(v); },
                 [](const RunConfig& c) { return to_string(c.search.hypergrad_mode); }});
    k.push_back({"search.constraint_mode", "softmax | sigmoid | none",
                 [](RunConfig& c, const std::string& v) { c.search.constraint_mode = parse_constraint_mode(v); },
                 [](const RunConfig& c) { return to_string(c.search.constraint_mode); }});
    k.push_back({"search.schedule", "paired | interleaved",
                 [](RunConfig& c, const std::string& v) { c.search.schedule = parse_schedule(v); },
                 [](const RunConfig& c) { return to_string(c.search.schedule); }});
    k.push_back({"search.optimizer", "sgd | adam (step rule for both levels)",
                 [](RunConfig& c, const std::string& v) { c.search.optimizer = parse_step_rule(v); },
                 [](const RunConfig& c) { return to_string(c.search.optimizer); }});
    num("split.ratio", "fraction of the downstream training set used for weights",
        [](auto& c) -> auto& { return c.split_ratio; });

    cnt("retrain.epochs", "retraining epochs (also used by the grid and full finetuning)",
        [](auto& c) -> auto& { return c.retrain.train.epochs; });
    cnt("retrain.batch_size", "retraining minibatch size",
        [](auto& c) -> auto& { return c.retrain.train.batch_size; });
    num("retrain.lr", "retraining Adam learning rate", [](auto& c) -> auto& { return c.retrain.train.lr; });
    k.push_back({"retrain.init", "fresh | warm",
                 [](RunConfig& c, const std::string& v) { c.retrain.init = parse_retrain_init(v); },
                 [](const RunConfig& c) { return to_string(c.retrain.init); }});

    flag("baseline.grid", "also run the uniform-rank grid in `search`", &RunConfig::grid);
    k.push_back({"baseline.grid_ranks", "candidate ranks of the grid",
                 [](RunConfig& c, const std::string& v) { c.grid_ranks = parse_counts("baseline.grid_ranks", v); },
                 [](const RunConfig& c) { return counts_text(c.grid_ranks); }});
    flag("baseline.fullft", "also run full finetuning in `search`", &RunConfig::fullft);
    num("baseline.fullft_lr", "full finetuning learning rate", [](auto& c) -> auto& { return c.fullft_lr; });

    str("output.dir", "output directory (LORANK_OUT overrides)", &RunConfig::out_dir);
    flag("output.timing", "record wall-clock fields in reports", &RunConfig::timing);
    return k;
  }();
  return keys;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.key == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return k.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. `#` starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(base, detail::strip(line.substr(0, eq)), detail::strip(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Canonical text form; parse_config(config_text(c)) reproduces c.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + k.get(c) + "\n";
  return out;
}

inline std::string config_help() {
  const RunConfig defaults;
  std::string out;
  for (const auto& k : config_keys()) {
    const auto d = k.get(defaults);
    out += "  " + k.key + " = " + (d.empty() ? "(empty)" : d) + "\n      " + k.help + "\n";
  }
  return out;
}

/// Network spec text for checkpoints: the `model.*` subset of the config grammar.
inline std::string spec_text(const NetworkSpec& spec) {
  RunConfig c;
  c.network = spec;
  std::string out;
  for (const auto& k : config_keys())
    if (k.key.rfind("model.", 0) == 0) out += k.key + " = " + k.get(c) + "\n";
  return out;
}

inline NetworkSpec parse_spec_text(const std::string& text) { return parse_config(text).network; }

}  // namespace lorank
