#pragma once

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lorank/model.hpp"
#include "lorank/optim.hpp"

namespace lorank {

enum class Split { train, validation };

/// How the outer gradient through the one-step lookahead is computed.
///   exact:       full derivative, mixed second-order term by forward-over-reverse
///   darts_fd:    mixed term by a central difference of ∇_β L_tr along ∇_Ŵ L_val
///   first_order: ∂L_val/∂β at the current weights (lookahead dropped, η = 0)
enum class HypergradMode { exact, darts_fd, first_order };

enum class Schedule { paired, interleaved };

// Update rule applied to both the weight step and the selection step. The
// lookahead inside the hypergradient is always a plain gradient step.
enum class StepRule { sgd, adam };

inline std::string to_string(HypergradMode m) {
  switch (m) {
    case HypergradMode::exact: return "exact";
    case HypergradMode::darts_fd: return "darts_fd";
    case HypergradMode::first_order: return "first_order";
  }
  return "?";
}

inline HypergradMode parse_hypergrad_mode(const std::string& s) {
  if (s == "exact") return HypergradMode::exact;
  if (s == "darts_fd") return HypergradMode::darts_fd;
  if (s == "first_order") return HypergradMode::first_order;
  throw ConfigError("unknown hypergradient mode '" + s + "' (expected exact|darts_fd|first_order)");
}

inline std::string to_string(StepRule r) { return r == StepRule::sgd ? "sgd" : "adam"; }

inline StepRule parse_step_rule(const std::string& s) {
  if (s == "sgd") return StepRule::sgd;
  if (s == "adam") return StepRule::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

inline std::string to_string(Schedule s) { return s == Schedule::paired ? "paired" : "interleaved"; }

inline Schedule parse_schedule(const std::string& s) {
  if (s == "paired") return Schedule::paired;
  if (s == "interleaved") return Schedule::interleaved;
  throw ConfigError("unknown schedule '" + s + "' (expected paired|interleaved)");
}

// Gradient-evaluation units charged per hypergradient. A backward sweep in
// dual arithmetic counts as two.
inline std::size_t hypergradient_cost(HypergradMode m) { return m == HypergradMode::first_order ? 1 : 4; }

/// A two-level objective: loss(split, inner weights, outer variables), usable
/// with both double and Dual scalars.
template <class P>
concept BilevelObjective = requires(const P& p, const VarMap<double>& vd, const VarMap<Dual>& vu) {
  { p.loss(Split::train, vd, vd) } -> std::same_as<Var<double>>;
  { p.loss(Split::validation, vu, vu) } -> std::same_as<Var<Dual>>;
};

struct LossGradient {
  double loss = 0.0;
  ParamMap<double> d_weights;
  ParamMap<double> d_outer;
};

template <BilevelObjective P>
LossGradient loss_gradient(const P& problem, Split split, const ParamMap<double>& weights,
                           const ParamMap<double>& outer, bool want_weights, bool want_outer) {
  Tape<double> tape;
  const auto w = want_weights ? register_parameters(tape, weights) : register_constants(tape, weights);
  const auto a = want_outer ? register_parameters(tape, outer) : register_constants(tape, outer);
  const Var<double> loss = problem.loss(split, w, a);
  std::vector<std::string> wanted;
  if (want_weights) wanted = names_of(weights);
  if (want_outer)
    for (const auto& n : names_of(outer)) wanted.push_back(n);
  LossGradient out;
  out.loss = loss.value().item();
  const auto g = tape.backward(loss, std::span<const std::string>(wanted));
  for (const auto& [name, grad] : g) {
    (weights.count(name) ? out.d_weights : out.d_outer).emplace(name, grad);
  }
  return out;
}

/// Ŵ = W − η·∇_W L_tr(W, β). The inputs are not modified.
template <BilevelObjective P>
ParamMap<double> lookahead(const P& problem, const ParamMap<double>& weights, const ParamMap<double>& outer, double eta,
                           std::size_t* grad_evals = nullptr) {
  if (!(eta >= 0.0)) throw DomainError("lookahead: eta must be >= 0");
  const auto g = loss_gradient(problem, Split::train, weights, outer, true, false);
  if (grad_evals) ++*grad_evals;
  if (!all_finite(g.d_weights)) throw NumericError("lookahead: non-finite training gradient");
  ParamMap<double> out = weights;
  axpy(out, -eta, g.d_weights);
  return out;
}

// d/dt ∇_β L_tr(W + t·direction, β) at t = 0, exactly.
template <BilevelObjective P>
ParamMap<double> mixed_second_order(const P& problem, const ParamMap<double>& weights, const ParamMap<double>& outer,
                                    const ParamMap<double>& direction) {
  Tape<Dual> tape;
  VarMap<Dual> w;
  for (const auto& [name, value] : weights) w.emplace(name, tape.constant(with_tangent(value, direction.at(name))));
  const auto a = register_parameters(tape, lift_all<Dual>(outer));
  const Var<Dual> loss = problem.loss(Split::train, w, a);
  const auto names = names_of(outer);
  const auto g = tape.backward(loss, std::span<const std::string>(names));
  ParamMap<double> out;
  for (const auto& [name, grad] : g) out.emplace(name, tangents(grad));
  return out;
}

struct Hypergradient {
  ParamMap<double> grad;     // same names and shapes as the outer variables
  double val_loss = 0.0;     // L_val at the lookahead weights
  std::size_t grad_evals = 0;
};

/// Gradient of L_val(W − η∇_W L_tr(W, β), β) with respect to β.
template <BilevelObjective P>
Hypergradient hypergradient(const P& problem, const ParamMap<double>& weights, const ParamMap<double>& outer, double eta,
                            HypergradMode mode) {
  Hypergradient h;
  if (mode == HypergradMode::first_order) {
    const auto g = loss_gradient(problem, Split::validation, weights, outer, false, true);
    h.grad = g.d_outer;
    h.val_loss = g.loss;
    h.grad_evals = 1;
    return h;
  }
  std::size_t evals = 0;
  const auto w_hat = lookahead(problem, weights, outer, eta, &evals);
  const auto val = loss_gradient(problem, Split::validation, w_hat, outer, true, true);
  ++evals;
  h.val_loss = val.loss;
  h.grad = val.d_outer;
  // Mixed term: (∂²L_tr/∂β∂W)·∇_Ŵ L_val, subtracted with weight η.
  ParamMap<double> mixed;
  if (mode == HypergradMode::exact) {
    mixed = mixed_second_order(problem, weights, outer, val.d_weights);
    evals += 2;
  } else {
    const double norm = global_norm(val.d_weights);
    if (norm > 0.0) {
      const double eps = 0.01 / norm;
      ParamMap<double> plus = weights;
      ParamMap<double> minus = weights;
      axpy(plus, eps, val.d_weights);
      axpy(minus, -eps, val.d_weights);
      const auto gp = loss_gradient(problem, Split::train, plus, outer, false, true);
      const auto gm = loss_gradient(problem, Split::train, minus, outer, false, true);
      for (const auto& [name, a] : gp.d_outer) {
        Tensor<double> d = sub(a, gm.d_outer.at(name));
        mixed.emplace(name, scale(d, 1.0 / (2.0 * eps)));
      }
      evals += 2;
    }
  }
  for (const auto& [name, m] : mixed) axpy(h.grad.at(name), -eta, m);
  h.grad_evals = evals;
  return h;
}

/// Binds a network and a pair of batches into a bilevel objective: inner
/// weights are the LoRA factors and head, outer variables the selection
/// logits, everything else is frozen.
class NetworkObjective {
 public:
  NetworkObjective(const Network& net, const Dataset& train, const Dataset& validation)
      : net_(&net), train_(&train), validation_(&validation) {}

  template <class T>
  Var<T> loss(Split split, const VarMap<T>& weights, const VarMap<T>& outer) const {
    const VarMap<T>& any = weights.empty() ? outer : weights;
    if (any.empty()) throw DomainError("NetworkObjective: nothing to differentiate");
    Tape<T>& tape = any.begin()->second.tape();
    VarMap<T> all = weights;
    all.insert(outer.begin(), outer.end());
    for (const auto& [name, value] : net_->params)
      if (!all.count(name)) all.emplace(name, tape.constant(lift<T>(value)));
    return forward(net_->spec, net_->mode, all, split == Split::train ? *train_ : *validation_).loss;
  }

 private:
  const Network* net_;
  const Dataset* train_;
  const Dataset* validation_;
};

struct SearchConfig {
  double eta = 1e-4;
  double lr_w = 1e-4;
  double lr_a = 1e-3;
  std::size_t batch_size = 16;
  std::size_t max_meta_epochs = 50;
  std::size_t patience = 5;
  double min_delta = 1e-5;
  HypergradMode hypergrad_mode = HypergradMode::exact;
  ConstraintMode constraint_mode = ConstraintMode::softmax;
  Schedule schedule = Schedule::paired;
  StepRule optimizer = StepRule::sgd;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eta >= 0.0)) throw ConfigError("search.eta must be >= 0");
    if (!(lr_w > 0.0)) throw ConfigError("search.lr_w must be > 0");
    if (!(lr_a > 0.0)) throw ConfigError("search.lr_a must be > 0");
    if (patience < 1) throw ConfigError("search.patience must be >= 1");
    if (batch_size < 1) throw ConfigError("search.batch_size must be >= 1");
  }
};

inline Network lookahead_step(const Network& net, const Dataset& batch_tr, double eta) {
  const NetworkObjective obj(net, batch_tr, batch_tr);
  Network out = net;
  const auto w_hat = lookahead(obj, net.subset(net.weight_names()), net.subset(net.selection_names()), eta);
  for (const auto& [name, value] : w_hat) out.params[name] = value;
  return out;
}

inline Hypergradient hypergradient(const Network& net, const Dataset& batch_tr, const Dataset& batch_val,
                                   double eta, HypergradMode mode) {
  const NetworkObjective obj(net, batch_tr, batch_val);
  return hypergradient(obj, net.subset(net.weight_names()), net.subset(net.selection_names()), eta, mode);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::map<std::string, AlphaVector> alphas;
  double wall_ms = 0.0;  // since search start
};

struct SearchTrajectory {
  double initial_val_loss = 0.0;
  std::vector<EpochRecord> epochs;
};

struct SearchResult {
  Network net;
  SearchTrajectory trajectory;
  std::map<std::string, std::vector<double>> final_beta;
  std::size_t grad_evals = 0;
  double wall_ms = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

inline std::map<std::string, AlphaVector> alpha_snapshot(const Network& net) {
  std::map<std::string, AlphaVector> out;
  for (const auto& l : net.lora_layers())
    if (auto it = net.params.find(l + ".lora_beta"); it != net.params.end()) out[l] = alphas(it->second.vec(), net.mode);
  return out;
}

/// Alternating search: inner gradient steps on the LoRA weights over d_tr,
/// outer steps on the selection logits along the lookahead hypergradient.
///
/// Stops after max_meta_epochs or when the validation loss has not improved
/// by more than min_delta for `patience` epochs. A non-finite loss ends the
/// search with aborted = true and the trajectory recorded so far.
inline SearchResult meta_search(Network net, const Dataset& d_tr, const Dataset& d_val, const SearchConfig& cfg) {
  cfg.validate();
  d_tr.validate();
  d_val.validate();
  if (net.scope != TrainScope::lora_search) throw DomainError("meta_search: network has no selection variables");
  net.mode = cfg.constraint_mode;

  const auto start = std::chrono::steady_clock::now();
  SearchResult r;
  const auto weight_names = net.weight_names();
  const auto selection_names = net.selection_names();
  Rng rng(mix_seed(cfg.seed, 0x5ea7c4));
  r.trajectory.initial_val_loss = evaluate(net, d_val).loss;

  auto abort = [&](const std::string& why) {
    r.aborted = true;
    r.abort_reason = why;
  };

  Adam weight_opt(cfg.lr_w);
  Adam selection_opt(cfg.lr_a);

  auto inner_step = [&](const Dataset& batch, double& loss_sum) -> bool {
    Gradients<double> g;
    const double loss = loss_and_gradients(net, batch, weight_names, g);
    ++r.grad_evals;
    if (!std::isfinite(loss)) return false;
    loss_sum += loss;
    if (cfg.optimizer == StepRule::adam) {
      weight_opt.step(net.params, g);
    } else {
      for (const auto& [name, grad] : g) axpy(net.params.at(name), -cfg.lr_w, grad);
    }
    return true;
  };

  auto outer_step = [&](const Dataset& batch_tr, const Dataset& batch_val) -> bool {
    Hypergradient h;
    try {
      h = hypergradient(net, batch_tr, batch_val, cfg.eta, cfg.hypergrad_mode);
    } catch (const NumericError&) {
      return false;
    }
    r.grad_evals += h.grad_evals;
    if (!std::isfinite(h.val_loss) || !all_finite(h.grad)) return false;
    if (cfg.optimizer == StepRule::adam) {
      Gradients<double> g;
      for (const auto& [name, grad] : h.grad) g.set(name, grad);
      selection_opt.step(net.params, g);
    } else {
      for (const auto& [name, grad] : h.grad) axpy(net.params.at(name), -cfg.lr_a, grad);
    }
    return true;
  };

  std::vector<std::size_t> tr_order(d_tr.size());
  std::vector<std::size_t> val_order(d_val.size());
  double best = r.trajectory.initial_val_loss;
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_meta_epochs; ++epoch) {
    std::iota(tr_order.begin(), tr_order.end(), std::size_t{0});
    std::iota(val_order.begin(), val_order.end(), std::size_t{0});
    rng.shuffle(tr_order);
    rng.shuffle(val_order);
    std::vector<Dataset> tr_batches;
    std::vector<Dataset> val_batches;
    for (const auto& idx : make_batches(tr_order, cfg.batch_size)) tr_batches.push_back(d_tr.subset(idx));
    for (const auto& idx : make_batches(val_order, cfg.batch_size)) val_batches.push_back(d_val.subset(idx));

    double loss_sum = 0.0;
    bool ok = true;
    if (cfg.schedule == Schedule::paired) {
      for (const auto& b : tr_batches) {
        if (!(ok = inner_step(b, loss_sum))) break;
      }
      for (std::size_t i = 0; ok && i < val_batches.size(); ++i) {
        ok = outer_step(tr_batches[i % tr_batches.size()], val_batches[i]);
      }
    } else {
      for (std::size_t i = 0; ok && i < tr_batches.size(); ++i) {
        ok = inner_step(tr_batches[i], loss_sum) &&
             outer_step(tr_batches[i], val_batches[i % val_batches.size()]);
      }
    }
    if (!ok) {
      abort("non-finite loss in meta-epoch " + std::to_string(epoch));
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(tr_batches.size());
    rec.val_loss = evaluate(net, d_val).loss;
    rec.alphas = alpha_snapshot(net);
    rec.wall_ms = elapsed_ms(start);
    if (!std::isfinite(rec.val_loss)) {
      abort("non-finite validation loss in meta-epoch " + std::to_string(epoch));
      break;
    }
    r.trajectory.epochs.push_back(std::move(rec));

    const double val = r.trajectory.epochs.back().val_loss;
    if (val < best - cfg.min_delta) {
      best = val;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  for (const auto& n : selection_names) {
    const std::string layer = n.substr(0, n.size() - std::string(".lora_beta").size());
    r.final_beta[layer] = net.params.at(n).vec();
  }
  r.net = std::move(net);
  r.wall_ms = elapsed_ms(start);
  return r;
}

}  // namespace lorank
