#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lorank/bilevel.hpp"
#include "lorank/optim.hpp"

namespace lorank {

struct RankDecision {
  std::string layer;
  AlphaVector alpha;
  ConstraintMode mode = ConstraintMode::softmax;
  double threshold = 0.0;
  std::vector<std::size_t> kept;  // ascending

  std::size_t rank() const noexcept { return kept.size(); }
};

/// λ = 1/k under softmax, mean(α) with no constraint, 0.5 under sigmoid.
inline double rank_threshold(const AlphaVector& alpha, ConstraintMode mode) {
  if (alpha.empty()) throw DomainError("rank_threshold: empty selection vector");
  const double k = static_cast<double>(alpha.size());
  switch (mode) {
    case ConstraintMode::softmax: return 1.0 / k;
    case ConstraintMode::sigmoid: return 0.5;
    case ConstraintMode::none: return std::accumulate(alpha.begin(), alpha.end(), 0.0) / k;
  }
  return 0.0;
}

/// Keeps every component with α_j ≥ λ; ties at λ are kept.
inline RankDecision threshold_ranks(const AlphaVector& alpha, ConstraintMode mode, std::string layer = {}) {
  RankDecision d;
  d.layer = std::move(layer);
  d.alpha = alpha;
  d.mode = mode;
  d.threshold = rank_threshold(alpha, mode);
  for (std::size_t j = 0; j < alpha.size(); ++j)
    if (alpha[j] >= d.threshold) d.kept.push_back(j);
  return d;
}

/// One decision per selection-carrying LoRA layer, in layer order.
inline std::vector<RankDecision> decide_ranks(const Network& net) {
  std::vector<RankDecision> out;
  for (const auto& [layer, a] : alpha_snapshot(net)) out.push_back(threshold_ranks(a, net.mode, layer));
  const auto order = net.lora_layers();
  std::stable_sort(out.begin(), out.end(), [&](const RankDecision& x, const RankDecision& y) {
    return std::find(order.begin(), order.end(), x.layer) < std::find(order.begin(), order.end(), y.layer);
  });
  return out;
}

/// Drops unselected components and folds α into the kept columns of u, so the
/// result computes the soft update minus the dropped terms.
inline LoraLinear prune(const LoraLinear& layer, const RankDecision& decision) {
  layer.validate();
  if (!layer.has_selection()) throw DomainError("prune: layer has no selection variables");
  if (decision.alpha.size() != layer.rank())
    throw DimensionError("prune: decision for " + std::to_string(decision.alpha.size()) + " components, layer has " +
                         std::to_string(layer.rank()));
  if (decision.rank() == 0) throw DomainError("prune: rank 0 requested for layer " + decision.layer);
  const std::size_t m = layer.u.rows();
  const std::size_t n = layer.v.cols();
  const std::size_t r = decision.rank();
  LoraLinear out;
  out.w_tilde = layer.w_tilde;
  out.u = Tensor<double>(m, r);
  out.v = Tensor<double>(r, n);
  for (std::size_t c = 0; c < r; ++c) {
    const std::size_t j = decision.kept[c];
    for (std::size_t i = 0; i < m; ++i) out.u(i, c) = layer.u(i, j) * decision.alpha[j];
    for (std::size_t i = 0; i < n; ++i) out.v(c, i) = layer.v(j, i);
  }
  return out;
}

enum class RetrainInit { fresh, warm };

inline std::string to_string(RetrainInit i) { return i == RetrainInit::fresh ? "fresh" : "warm"; }

inline RetrainInit parse_retrain_init(const std::string& s) {
  if (s == "fresh") return RetrainInit::fresh;
  if (s == "warm") return RetrainInit::warm;
  throw ConfigError("unknown retrain init '" + s + "' (expected fresh|warm)");
}

struct RetrainConfig {
  TrainConfig train{50, 16, 1e-4, 0};
  RetrainInit init = RetrainInit::fresh;
};

struct RetrainResult {
  Network net;
  TrainMetrics metrics;
  std::map<std::string, std::size_t> ranks;
};

/// Rebuilds every LoRA layer at its decided rank (fresh u ~ N(0, std²), v = 0,
/// or the pruned factors) and trains factors and head on the merged data.
/// A layer decided at rank 0 (possible only without the sum constraint)
/// loses its update.
inline RetrainResult retrain(const Network& searched, const std::vector<RankDecision>& decisions,
                             const Dataset& d_merged, const RetrainConfig& cfg, const Dataset* d_eval = nullptr) {
  Network net = searched;
  RetrainResult out;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    out.ranks[d.layer] = d.rank();
    if (d.rank() == 0) {
      net.remove_lora(d.layer);
      continue;
    }
    if (cfg.init == RetrainInit::warm) {
      net.set_lora_layer(d.layer, prune(searched.lora_layer(d.layer), d));
    } else {
      net.set_lora_layer(d.layer, init_lora(net.params.at(d.layer + ".w"), d.rank(), mix_seed(cfg.train.seed, 100 + i),
                                            net.spec.lora_init_std, net.mode, false));
    }
  }
  net.scope = TrainScope::lora_fixed;
  out.metrics = train_network(net, d_merged, d_eval, cfg.train);
  out.net = std::move(net);
  return out;
}

}  // namespace lorank
