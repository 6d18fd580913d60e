#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lorank/data.hpp"
#include "lorank/errors.hpp"
#include "lorank/lora.hpp"
#include "lorank/params.hpp"
#include "lorank/rng.hpp"

namespace lorank {

enum class NetworkKind { mlp, tiny_attention };
enum class TaskKind { classification, regression };

inline std::string to_string(NetworkKind k) { return k == NetworkKind::mlp ? "mlp" : "tiny_attention"; }
inline std::string to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "regression"; }

inline NetworkKind parse_network_kind(const std::string& s) {
  if (s == "mlp") return NetworkKind::mlp;
  if (s == "tiny_attention") return NetworkKind::tiny_attention;
  throw ConfigError("unknown model kind '" + s + "' (expected mlp|tiny_attention)");
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw ConfigError("unknown task '" + s + "' (expected classification|regression)");
}

struct LinearShape {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
};

/// Architecture description.
///
/// mlp:            layer_dims = {input, hidden..., output}; linears fc0..fcH-1
///                 map between consecutive dims and `head` produces the output.
/// tiny_attention: layer_dims = {d_model, d_ff, output}; one single-head
///                 attention block (attn_q, attn_k, attn_v, attn_o), a relu FFN
///                 (ffn1, ffn2) with residuals, mean-pool over the sequence,
///                 then `head`. Inputs are rows of seq_len·d_model values.
///
/// lora_mask has one entry per non-head linear; empty selects the default
/// placement (every mlp hidden linear; attn_q and attn_v for attention).
struct NetworkSpec {
  NetworkKind kind = NetworkKind::mlp;
  std::vector<std::size_t> layer_dims{8, 16, 16, 4};
  std::vector<bool> lora_mask;
  std::size_t k_init = kDefaultRankBudget;
  TaskKind task = TaskKind::regression;
  std::size_t seq_len = 1;
  double lora_init_std = kDefaultLoraInitStd;

  std::size_t output_dim() const { return layer_dims.back(); }
  std::size_t model_dim() const { return layer_dims.front(); }
  std::size_t input_dim() const {
    return kind == NetworkKind::mlp ? layer_dims.front() : seq_len * layer_dims.front();
  }

  std::vector<LinearShape> linears() const {
    std::vector<LinearShape> out;
    if (kind == NetworkKind::mlp) {
      for (std::size_t i = 0; i + 2 < layer_dims.size(); ++i)
        out.push_back({"fc" + std::to_string(i), layer_dims[i], layer_dims[i + 1], true});
    } else {
      const std::size_t d = layer_dims[0];
      const std::size_t ff = layer_dims[1];
      out.push_back({"attn_q", d, d, false});
      out.push_back({"attn_k", d, d, false});
      out.push_back({"attn_v", d, d, false});
      out.push_back({"attn_o", d, d, false});
      out.push_back({"ffn1", d, ff, true});
      out.push_back({"ffn2", ff, d, true});
    }
    return out;
  }

  LinearShape head() const {
    const std::size_t in = kind == NetworkKind::mlp ? layer_dims[layer_dims.size() - 2] : layer_dims[0];
    return {"head", in, output_dim(), true};
  }

  std::vector<bool> effective_mask() const {
    if (!lora_mask.empty()) return lora_mask;
    const auto ls = linears();
    std::vector<bool> m(ls.size(), kind == NetworkKind::mlp);
    if (kind == NetworkKind::tiny_attention) {
      m[0] = true;  // attn_q
      m[2] = true;  // attn_v
    }
    return m;
  }

  void validate() const {
    if (kind == NetworkKind::mlp && layer_dims.size() < 2)
      throw DomainError("mlp layer_dims needs at least input and output");
    if (kind == NetworkKind::tiny_attention && layer_dims.size() != 3)
      throw DomainError("tiny_attention layer_dims must be {d_model, d_ff, output}");
    if (std::any_of(layer_dims.begin(), layer_dims.end(), [](auto d) { return d == 0; }))
      throw DomainError("layer dimensions must be >= 1");
    if (!lora_mask.empty() && lora_mask.size() != linears().size())
      throw DomainError("lora_mask has " + std::to_string(lora_mask.size()) + " entries for " +
                        std::to_string(linears().size()) + " linear layers");
    if (k_init == 0) throw DomainError("k_init must be >= 1");
    if (seq_len == 0) throw DomainError("seq_len must be >= 1");
    if (task == TaskKind::classification && output_dim() < 2)
      throw DomainError("classification needs at least 2 classes");
  }
};

/// Which parameters receive updates.
///   full:        every parameter (pretraining, full finetuning)
///   lora_search: LoRA factors, selection logits and the head
///   lora_fixed:  LoRA factors and the head (ranks fixed)
enum class TrainScope { full, lora_search, lora_fixed };

struct Network {
  NetworkSpec spec;
  ParamMap<double> params;
  TrainScope scope = TrainScope::full;
  ConstraintMode mode = ConstraintMode::softmax;

  bool has_lora(const std::string& linear) const { return params.count(linear + ".lora_u") != 0; }

  // LoRA-carrying linears in architectural order.
  std::vector<std::string> lora_layers() const {
    std::vector<std::string> out;
    for (const auto& l : spec.linears())
      if (has_lora(l.name)) out.push_back(l.name);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params) {
      if (scope == TrainScope::full || is_head(name) || is_factor(name) ||
          (scope == TrainScope::lora_search && is_selection(name))) {
        out.push_back(name);
      }
    }
    return out;
  }

  // Trainable weights excluding selection logits: what the inner step updates.
  std::vector<std::string> weight_names() const {
    std::vector<std::string> out;
    for (const auto& n : trainable_names())
      if (!is_selection(n)) out.push_back(n);
    return out;
  }

  std::vector<std::string> selection_names() const {
    std::vector<std::string> out;
    if (scope != TrainScope::lora_search) return out;
    for (const auto& l : lora_layers())
      if (params.count(l + ".lora_beta")) out.push_back(l + ".lora_beta");
    return out;
  }

  LoraLinear lora_layer(const std::string& linear) const {
    if (!has_lora(linear)) throw DomainError("layer " + linear + " carries no LoRA update");
    LoraLinear l;
    l.w_tilde = params.at(linear + ".w");
    l.u = params.at(linear + ".lora_u");
    l.v = params.at(linear + ".lora_v");
    if (auto it = params.find(linear + ".lora_beta"); it != params.end()) l.beta = it->second;
    return l;
  }

  // Installs the factors (and logits, if any). The frozen weight is not written.
  void set_lora_layer(const std::string& linear, const LoraLinear& layer) {
    layer.validate();
    if (!(layer.w_tilde == params.at(linear + ".w")))
      throw DomainError("set_lora_layer: frozen weight of " + linear + " differs");
    params[linear + ".lora_u"] = layer.u;
    params[linear + ".lora_v"] = layer.v;
    if (layer.has_selection()) {
      params[linear + ".lora_beta"] = layer.beta;
    } else {
      params.erase(linear + ".lora_beta");
    }
  }

  void remove_lora(const std::string& linear) {
    params.erase(linear + ".lora_u");
    params.erase(linear + ".lora_v");
    params.erase(linear + ".lora_beta");
  }

  ParamMap<double> subset(const std::vector<std::string>& names) const {
    ParamMap<double> out;
    for (const auto& n : names) out.emplace(n, params.at(n));
    return out;
  }

  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }
  static bool is_head(const std::string& n) { return n.rfind("head.", 0) == 0; }
  static bool is_factor(const std::string& n) { return ends_with(n, ".lora_u") || ends_with(n, ".lora_v"); }
  static bool is_selection(const std::string& n) { return ends_with(n, ".lora_beta"); }
};

inline std::size_t trainable_parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const auto& name : net.trainable_names()) n += net.params.at(name).size();
  return n;
}

inline std::size_t total_parameter_count(const Network& net) { return scalar_count(net.params); }

/// Seeded initialization of the base (non-LoRA) weights.
inline Network init_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  Rng rng(seed);
  auto init = [&](const LinearShape& l, double gain) {
    Tensor<double> w(l.in, l.out);
    const double sd = std::sqrt(gain / static_cast<double>(l.in));
    for (auto& x : w.data()) x = rng.normal(0.0, sd);
    net.params[l.name + ".w"] = std::move(w);
    if (l.bias) net.params[l.name + ".b"] = Tensor<double>(1, l.out);
  };
  for (const auto& l : spec.linears()) init(l, spec.kind == NetworkKind::mlp || l.name == "ffn1" ? 2.0 : 1.0);
  init(spec.head(), 1.0);
  return net;
}

/// Adds LoRA factors to the masked linears.
///
/// `ranks` overrides the budget per layer (0 leaves the layer without an
/// update); without selection logits the update is a plain fixed-rank u·v.
inline Network attach_lora(Network net, std::uint64_t seed, ConstraintMode mode = ConstraintMode::softmax,
                           const std::map<std::string, std::size_t>& ranks = {}, bool with_selection = true) {
  const auto ls = net.spec.linears();
  const auto mask = net.spec.effective_mask();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    net.remove_lora(ls[i].name);
    if (!mask[i]) continue;
    const auto it = ranks.find(ls[i].name);
    const std::size_t k = it == ranks.end() ? net.spec.k_init : it->second;
    if (k == 0) continue;
    const auto layer = init_lora(net.params.at(ls[i].name + ".w"), k, mix_seed(seed, i), net.spec.lora_init_std, mode,
                                 with_selection);
    net.set_lora_layer(ls[i].name, layer);
  }
  net.mode = mode;
  net.scope = with_selection ? TrainScope::lora_search : TrainScope::lora_fixed;
  return net;
}

template <class T>
struct ForwardOutput {
  Var<T> loss;
  Var<T> output;  // logits or regression outputs, N×o
};

namespace detail {

template <class T>
Var<T> linear_weight(const VarMap<T>& p, const std::string& name, ConstraintMode mode) {
  const Var<T>& w = p.at(name + ".w");
  const auto u = p.find(name + ".lora_u");
  if (u == p.end()) return w;
  std::optional<Var<T>> beta;
  if (auto b = p.find(name + ".lora_beta"); b != p.end()) beta = b->second;
  return effective_weight(w, u->second, p.at(name + ".lora_v"), beta, mode);
}

template <class T>
Var<T> apply_linear(const VarMap<T>& p, const LinearShape& l, const Var<T>& x, const Var<T>& weight) {
  Var<T> y = matmul(x, weight);
  if (l.bias) y = add_row(y, p.at(l.name + ".b"));
  return y;
}

}  // namespace detail

/// Loss and outputs for one batch. `p` must hold a Var for every parameter
/// of the network; which of them are tape parameters is the caller's choice.
template <class T>
ForwardOutput<T> forward(const NetworkSpec& spec, ConstraintMode mode, const VarMap<T>& p, const Dataset& batch) {
  if (p.empty()) throw DomainError("forward: no parameters");
  Tape<T>& tape = p.begin()->second.tape();
  if (batch.features.cols() != spec.input_dim()) {
    throw DimensionError("forward: batch width " + std::to_string(batch.features.cols()) +
                         " does not match network input " + std::to_string(spec.input_dim()));
  }
  const auto ls = spec.linears();
  const auto head = spec.head();
  Var<T> out;
  if (spec.kind == NetworkKind::mlp) {
    Var<T> h = tape.constant(lift<T>(batch.features));
    for (const auto& l : ls) h = relu(detail::apply_linear(p, l, h, detail::linear_weight(p, l.name, mode)));
    out = detail::apply_linear(p, head, h, p.at("head.w"));
  } else {
    const std::size_t d = spec.model_dim();
    const std::size_t len = spec.seq_len;
    const Var<T> wq = detail::linear_weight(p, "attn_q", mode);
    const Var<T> wk = detail::linear_weight(p, "attn_k", mode);
    const Var<T> wv = detail::linear_weight(p, "attn_v", mode);
    const Var<T> wo = detail::linear_weight(p, "attn_o", mode);
    const Var<T> w1 = detail::linear_weight(p, "ffn1", mode);
    const Var<T> w2 = detail::linear_weight(p, "ffn2", mode);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Var<T>> pooled;
    pooled.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor<T> xi(len, d);
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < d; ++j) xi(t, j) = T(batch.features(i, t * d + j));
      const Var<T> x = tape.constant(std::move(xi));
      const Var<T> q = matmul(x, wq);
      const Var<T> k = matmul(x, wk);
      const Var<T> v = matmul(x, wv);
      const Var<T> attn = row_softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
      const Var<T> h = add(x, matmul(matmul(attn, v), wo));
      const Var<T> f = detail::apply_linear(p, ls[5], relu(detail::apply_linear(p, ls[4], h, w1)), w2);
      pooled.push_back(mean_pool_rows(add(h, f)));
    }
    out = detail::apply_linear(p, head, concat_rows(pooled), p.at("head.w"));
  }
  if (spec.task == TaskKind::classification) {
    if (!batch.is_classification()) throw DomainError("forward: classification network given regression targets");
    return {cross_entropy_loss(out, std::span<const int>(batch.labels)), out};
  }
  if (batch.is_classification()) throw DomainError("forward: regression network given class labels");
  return {mse_loss(out, lift<T>(batch.targets)), out};
}

// Places every network parameter on the tape; names in `trainable` become
// tape parameters, the rest constants.
template <class T>
VarMap<T> place(Tape<T>& tape, const ParamMap<T>& params, const std::set<std::string>& trainable) {
  VarMap<T> out;
  for (const auto& [name, value] : params)
    out.emplace(name, trainable.count(name) ? tape.parameter(name, value) : tape.constant(value));
  return out;
}

struct Evaluation {
  double loss = 0.0;
  std::optional<double> accuracy;
  Tensor<double> outputs;
};

inline double accuracy_of(const Tensor<double>& logits, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    hit += static_cast<int>(best) == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(logits.rows());
}

inline Evaluation evaluate(const Network& net, const Dataset& data, bool recording = false) {
  data.validate();
  Tape<double> tape(recording);
  const auto p = place(tape, net.params, {});
  const auto f = forward(net.spec, net.mode, p, data);
  Evaluation e;
  e.loss = f.loss.value().item();
  e.outputs = f.output.value();
  if (net.spec.task == TaskKind::classification) e.accuracy = accuracy_of(e.outputs, data.labels);
  return e;
}

/// Loss on `data` and its gradient with respect to `wanted`.
inline double loss_and_gradients(const Network& net, const Dataset& data, const std::vector<std::string>& wanted,
                                 Gradients<double>& grads) {
  Tape<double> tape;
  const auto p = place(tape, net.params, std::set<std::string>(wanted.begin(), wanted.end()));
  const auto f = forward(net.spec, net.mode, p, data);
  grads = tape.backward(f.loss, std::span<const std::string>(wanted));
  return f.loss.value().item();
}

/// Full-batch gradient descent on every weight; no LoRA.
inline Network pretrain(const NetworkSpec& spec, const Dataset& data, std::size_t steps, double lr, std::uint64_t seed) {
  data.validate();
  Network net = init_network(spec, seed);
  const auto names = net.trainable_names();
  for (std::size_t step = 0; step < steps; ++step) {
    Gradients<double> g;
    const double loss = loss_and_gradients(net, data, names, g);
    if (!std::isfinite(loss)) throw TrainingError("pretrain: non-finite loss", step);
    for (const auto& [name, grad] : g) axpy(net.params.at(name), -lr, grad);
  }
  return net;
}

}  // namespace lorank
