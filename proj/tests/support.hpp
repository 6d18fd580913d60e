#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lorank/finite_diff.hpp"
#include "lorank/model.hpp"
#include "lorank/rng.hpp"

namespace lorank::testing {

inline Tensor<double> random_tensor(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor<double> t(r, c);
  for (auto& x : t.data()) x = rng.normal(0.0, sd);
  return t;
}

inline Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      out(i, j) = s;
    }
  return out;
}

// max_i |a_i - b_i| / max(max_i |b_i|, floor), the usual per-tensor gradient-check metric.
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-8) {
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

template <class G1, class G2>
double max_relative_error(const G1& got, const G2& want) {
  double worst = 0.0;
  for (const auto& [name, w] : want) worst = std::max(worst, relative_error(got.at(name), w));
  return worst;
}

inline Dataset random_dataset(const NetworkSpec& spec, std::size_t n, Rng& rng) {
  Dataset d;
  d.features = random_tensor(n, spec.input_dim(), rng);
  if (spec.task == TaskKind::classification) {
    for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(spec.output_dim())));
  } else {
    d.targets = random_tensor(n, spec.output_dim(), rng);
  }
  return d;
}

inline NetworkSpec random_spec(Rng& rng, bool attention) {
  NetworkSpec s;
  s.task = rng.below(2) == 0 ? TaskKind::classification : TaskKind::regression;
  s.k_init = 2 + rng.below(3);
  if (attention) {
    s.kind = NetworkKind::tiny_attention;
    s.layer_dims = {2 + rng.below(3), 3 + rng.below(3), 2 + rng.below(2)};
    s.seq_len = 2 + rng.below(2);
  } else {
    s.layer_dims = {2 + rng.below(3)};
    for (std::size_t i = 0, h = 1 + rng.below(2); i < h; ++i) s.layer_dims.push_back(3 + rng.below(3));
    s.layer_dims.push_back(2 + rng.below(2));
  }
  return s;
}

// LoRA network with every parameter drawn at random, so no gradient is
// structurally zero.
inline Network random_lora_network(const NetworkSpec& spec, Rng& rng, ConstraintMode mode = ConstraintMode::softmax) {
  Network net = attach_lora(init_network(spec, rng.below(1u << 30)), rng.below(1u << 30), mode);
  for (auto& [name, t] : net.params) t = random_tensor(t.rows(), t.cols(), rng, 0.5);
  return net;
}

// Five-point central stencil, error O(h⁴). The larger step keeps round-off
// small on tensors whose gradients are tiny next to the loss.
template <class F>
Gradients<double> five_point_grad(F&& f, const ParamMap<double>& params, double h) {
  Gradients<double> out;
  ParamMap<double> p = params;
  for (const auto& [name, t] : params) {
    Tensor<double> g(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) {
      auto& x = p.at(name)[i];
      const double x0 = x;
      auto at = [&](double d) {
        x = x0 + d;
        return f(std::as_const(p));
      };
      g[i] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      x = x0;
    }
    out.set(name, std::move(g));
  }
  return out;
}

// Reverse-mode gradient of the data loss with respect to every parameter,
// against the five-point stencil. A stencil straddling a ReLU kink is not a
// valid reference, so each tensor is judged at its best of four steps; a
// wrong gradient disagrees at all of them.
inline double network_gradient_error(const Network& net, const Dataset& data) {
  std::vector<std::string> names;
  for (const auto& [name, _] : net.params) names.push_back(name);
  Gradients<double> got;
  loss_and_gradients(net, data, names, got);
  const auto loss_at = [&](const ParamMap<double>& p) {
    Network n = net;
    n.params = p;
    return evaluate(n, data).loss;
  };
  std::map<std::string, double> best;
  for (double h : {1e-3, 1e-4, 1e-5, 1e-6})
    for (const auto& [name, want] : five_point_grad(loss_at, net.params, h)) {
      const double e = relative_error(got.at(name), want);
      const auto it = best.find(name);
      if (it == best.end() || e < it->second) best[name] = e;
    }
  double worst = 0.0;
  for (const auto& [_, e] : best) worst = std::max(worst, e);
  return worst;
}

}  // namespace lorank::testing
