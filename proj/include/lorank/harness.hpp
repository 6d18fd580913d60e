#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lorank/data.hpp"
#include "lorank/model.hpp"
#include "lorank/optim.hpp"
#include "lorank/rng.hpp"

namespace lorank {

/// Seeded disjoint split; the first part receives round(N·ratio) rows,
/// clamped so both parts are non-empty.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("split: ratio must lie in (0, 1)");
  if (d.size() < 2) throw DomainError("split: need at least 2 rows, got " + std::to_string(d.size()));
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  auto n_first = static_cast<std::size_t>(std::floor(static_cast<double>(d.size()) * ratio + 0.5));
  n_first = std::clamp<std::size_t>(n_first, 1, d.size() - 1);
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_first));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(n_first), order.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {d.subset(a), d.subset(b)};
}

// --- planted-rank tasks ---------------------------------------------------

struct PlantedTaskSpec {
  NetworkSpec network;
  std::vector<std::size_t> true_ranks;  // one per LoRA-designated linear, in order
  double perturbation_scale = 1.0;      // × 0.1 × ‖W̃‖_F
  std::size_t n_pretrain = 512;
  std::size_t n_downstream = 256;
  std::size_t n_test = 256;
  double noise = 0.0;
  std::size_t pretrain_steps = 200;
  double pretrain_lr = 0.05;
  std::uint64_t seed = 0;
};

struct PlantedTask {
  Dataset pretrain;
  Dataset downstream_train;
  Dataset downstream_test;
  Network pretrained;
  Network teacher;
  std::map<std::string, Tensor<double>> perturbations;
};

namespace detail {

inline Tensor<double> gaussian(std::size_t r, std::size_t c, Rng& rng) {
  Tensor<double> t(r, c);
  for (auto& x : t.data()) x = rng.normal();
  return t;
}

inline Dataset label_with(const Network& net, Tensor<double> features, double noise, Rng& rng, std::string provenance) {
  Dataset d;
  d.features = std::move(features);
  d.provenance = std::move(provenance);
  Tape<double> tape(false);
  const auto p = place(tape, net.params, {});
  Dataset probe = d;
  if (net.spec.task == TaskKind::classification) {
    probe.labels.assign(d.size(), 0);
  } else {
    probe.targets = Tensor<double>(d.size(), net.spec.output_dim());
  }
  const Tensor<double> out = forward(net.spec, net.mode, p, probe).output.value();
  if (net.spec.task == TaskKind::classification) {
    d.labels.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < out.cols(); ++j)
        if (out(i, j) > out(i, best)) best = j;
      d.labels[i] = static_cast<int>(best);
      if (noise > 0.0 && rng.uniform() < noise) d.labels[i] = static_cast<int>(rng.below(out.cols()));
    }
  } else {
    d.targets = out;
    if (noise > 0.0)
      for (auto& x : d.targets.data()) x += rng.normal(0.0, noise);
  }
  return d;
}

}  // namespace detail

/// Teacher-student task whose downstream shift is a known low-rank
/// perturbation per LoRA-designated layer.
///
/// A random reference network labels the base distribution; a network
/// pretrained on it becomes the frozen starting point. Each designated layer
/// of the teacher is that pretrained weight plus A·B (Gaussian factors of
/// inner size true_rank, Frobenius norm scale·0.1·‖W̃‖_F). Downstream rows
/// are labelled by the teacher.
inline PlantedTask make_planted_task(const PlantedTaskSpec& spec) {
  spec.network.validate();
  const auto ls = spec.network.linears();
  const auto mask = spec.network.effective_mask();
  std::vector<LinearShape> designated;
  for (std::size_t i = 0; i < ls.size(); ++i)
    if (mask[i]) designated.push_back(ls[i]);
  if (spec.true_ranks.size() != designated.size()) {
    throw DomainError("planted task: " + std::to_string(spec.true_ranks.size()) + " true ranks for " +
                      std::to_string(designated.size()) + " LoRA layers");
  }
  for (std::size_t i = 0; i < designated.size(); ++i) {
    const auto r = spec.true_ranks[i];
    if (r < 1 || r > std::min(designated[i].in, designated[i].out)) {
      throw DomainError("planted task: rank " + std::to_string(r) + " infeasible for layer " + designated[i].name +
                        " of shape " + Tensor<double>::shape_string(designated[i].in, designated[i].out));
    }
    if (r > spec.network.k_init) {
      throw DomainError("planted task: rank " + std::to_string(r) + " exceeds the rank budget " +
                        std::to_string(spec.network.k_init));
    }
  }
  if (spec.n_pretrain == 0 || spec.n_downstream == 0 || spec.n_test == 0)
    throw DomainError("planted task: dataset sizes must be >= 1");

  PlantedTask task;
  Rng rng(mix_seed(spec.seed, 1));
  const Network reference = init_network(spec.network, mix_seed(spec.seed, 2));
  const std::size_t d_in = spec.network.input_dim();
  task.pretrain = detail::label_with(reference, detail::gaussian(spec.n_pretrain, d_in, rng), 0.0, rng, "planted:pretrain");
  task.pretrained = pretrain(spec.network, task.pretrain, spec.pretrain_steps, spec.pretrain_lr, mix_seed(spec.seed, 3));

  task.teacher = task.pretrained;
  for (std::size_t i = 0; i < designated.size(); ++i) {
    const auto& l = designated[i];
    const Tensor<double>& w = task.pretrained.params.at(l.name + ".w");
    const Tensor<double> a = detail::gaussian(l.in, spec.true_ranks[i], rng);
    const Tensor<double> b = detail::gaussian(spec.true_ranks[i], l.out, rng);
    Tensor<double> p = matmul(a, b);
    const double target = spec.perturbation_scale * 0.1 * frobenius_norm(w);
    p = scale(p, target / frobenius_norm(p));
    task.teacher.params.at(l.name + ".w") = add(w, p);
    task.perturbations[l.name] = std::move(p);
  }
  task.downstream_train =
      detail::label_with(task.teacher, detail::gaussian(spec.n_downstream, d_in, rng), spec.noise, rng, "planted:train");
  task.downstream_test =
      detail::label_with(task.teacher, detail::gaussian(spec.n_test, d_in, rng), spec.noise, rng, "planted:test");
  return task;
}

// --- cost accounting --------------------------------------------------------

struct CostEntry {
  std::string phase;
  std::size_t grad_evals = 0;
  double wall_ms = 0.0;
  bool failed = false;
};

/// Per-phase cost. Gradient evaluations are the machine-independent measure;
/// wall-clock is informational.
struct CostLedger {
  std::vector<CostEntry> entries;

  void add(std::string phase, std::size_t grad_evals, double wall_ms, bool failed = false) {
    entries.push_back({std::move(phase), grad_evals, wall_ms, failed});
  }
  void merge(const CostLedger& o) { entries.insert(entries.end(), o.entries.begin(), o.entries.end()); }
  std::size_t total_grad_evals() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.grad_evals;
    return n;
  }
  double total_wall_ms() const {
    double t = 0.0;
    for (const auto& e : entries) t += e.wall_ms;
    return t;
  }
};

// --- baselines ----------------------------------------------------------------

using NetworkFactory = std::function<Network(std::size_t rank)>;

struct GridTrial {
  std::size_t rank = 0;
  TrainMetrics metrics;
  bool failed = false;
  std::string error;
};

struct GridResult {
  std::size_t best_rank = 0;
  std::vector<GridTrial> trials;  // ascending rank
  CostLedger ledger;

  const GridTrial& best() const {
    for (const auto& t : trials)
      if (t.rank == best_rank) return t;
    throw DomainError("grid result has no best trial");
  }
};

/// Uniform-rank LoRA trained from scratch per candidate rank; best is the
/// lowest test loss, ties to the smaller rank. A diverging trial is marked
/// failed and the search continues.
inline GridResult grid_search(const NetworkFactory& factory, std::vector<std::size_t> ranks, const Dataset& d_tr,
                              const Dataset& d_test, const TrainConfig& cfg, std::size_t jobs = 1) {
  if (ranks.empty()) throw DomainError("grid_search: empty rank set");
  std::sort(ranks.begin(), ranks.end());
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());

  auto run = [&](std::size_t rank) {
    GridTrial t;
    t.rank = rank;
    const auto start = std::chrono::steady_clock::now();
    try {
      Network net = factory(rank);
      TrainConfig c = cfg;
      c.seed = mix_seed(cfg.seed, rank);
      t.metrics = train_network(net, d_tr, &d_test, c);
      if (!std::isfinite(t.metrics.eval_loss)) throw TrainingError("non-finite test loss", t.metrics.steps);
    } catch (const TrainingError& e) {
      t.failed = true;
      t.error = e.what();
      t.metrics.grad_evals = e.step() + 1;
      t.metrics.wall_ms = elapsed_ms(start);
    }
    return t;
  };

  GridResult out;
  out.trials.resize(ranks.size());
  jobs = std::max<std::size_t>(1, jobs);
  for (std::size_t begin = 0; begin < ranks.size(); begin += jobs) {
    const std::size_t end = std::min(ranks.size(), begin + jobs);
    std::vector<std::future<GridTrial>> pending;
    for (std::size_t i = begin; i < end; ++i) pending.push_back(std::async(std::launch::async, run, ranks[i]));
    for (std::size_t i = begin; i < end; ++i) out.trials[i] = pending[i - begin].get();
  }

  bool any = false;
  for (const auto& t : out.trials) {
    out.ledger.add("grid:rank=" + std::to_string(t.rank), t.metrics.grad_evals, t.metrics.wall_ms, t.failed);
    if (t.failed) continue;
    if (!any || t.metrics.eval_loss < out.best().metrics.eval_loss) out.best_rank = t.rank;
    any = true;
  }
  if (!any) throw TrainingError("grid_search: every trial diverged", 0);
  return out;
}

struct FinetuneResult {
  Network net;
  TrainMetrics metrics;
};

/// Trains every weight of the pretrained network (LoRA removed).
inline FinetuneResult full_finetune(const Network& pretrained, const Dataset& d_tr, const Dataset& d_test,
                                    const TrainConfig& cfg) {
  FinetuneResult out;
  out.net = pretrained;
  for (const auto& l : out.net.lora_layers()) out.net.remove_lora(l);
  out.net.scope = TrainScope::full;
  out.metrics = train_network(out.net, d_tr, &d_test, cfg);
  return out;
}

// --- CSV ----------------------------------------------------------------------

/// Column selection for CSV ingestion. Empty `features` means every column
/// except the label.
struct CsvSchema {
  std::vector<std::string> features;
  std::string label;
  TaskKind task = TaskKind::classification;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& column) {
  const std::string s = trim(cell);
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError("csv: row " + std::to_string(row) + ", column '" + column + "': not a number: '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DomainError("csv: " + path + " is empty (need a header and N >= 1 rows)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("csv: missing column '" + name + "' in " + path);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t label_col = column(schema.label);
  std::vector<std::size_t> feat_cols;
  std::vector<std::string> feat_names = schema.features;
  if (feat_names.empty()) {
    for (const auto& h : header)
      if (h != schema.label) feat_names.push_back(h);
  }
  for (const auto& f : feat_names) feat_cols.push_back(column(f));

  std::vector<double> feats;
  std::vector<double> targets;
  std::vector<int> labels;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("csv: row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    }
    for (std::size_t j = 0; j < feat_cols.size(); ++j)
      feats.push_back(detail::parse_cell(cells[feat_cols[j]], line_no, feat_names[j]));
    const double y = detail::parse_cell(cells[label_col], line_no, schema.label);
    if (schema.task == TaskKind::classification) {
      if (y < 0.0 || y != std::floor(y) || y > 1e9) {
        throw ParseError("csv: row " + std::to_string(line_no) + ", column '" + schema.label +
                         "': class label must be a non-negative integer");
      }
      labels.push_back(static_cast<int>(y));
    } else {
      targets.push_back(y);
    }
    ++rows;
  }
  if (rows == 0) throw DomainError("csv: " + path + " has a header but no rows (need N >= 1)");
  Dataset d;
  d.features = Tensor<double>(rows, feat_cols.size(), std::move(feats));
  if (schema.task == TaskKind::classification) {
    d.labels = std::move(labels);
  } else {
    d.targets = Tensor<double>(rows, 1, std::move(targets));
  }
  d.provenance = path;
  return d;
}

/// Writes features then the label column, values at 17 significant digits.
inline void write_csv(const std::string& path, const Dataset& d, const std::vector<std::string>& feature_names,
                      const std::string& label) {
  if (feature_names.size() != d.features.cols()) throw DimensionError("write_csv: feature names do not match width");
  if (!d.is_classification() && d.targets.cols() != 1) throw DimensionError("write_csv: single target column only");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& f : feature_names) out << f << ',';
  out << label << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.features.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.features(i, j));
      out << buf << ',';
    }
    if (d.is_classification()) {
      out << d.labels[i] << '\n';
    } else {
      std::snprintf(buf, sizeof buf, "%.17g", d.targets(i, 0));
      out << buf << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace lorank
