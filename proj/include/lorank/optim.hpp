#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lorank/model.hpp"

namespace lorank {

/// Adaptive moment estimation over a named parameter set.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamMap<double>& params, const Gradients<double>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      auto& p = params.at(name);
      auto [mit, fresh] = m_.try_emplace(name, g.rows(), g.cols());
      auto& m = mit->second;
      auto& v = v_.try_emplace(name, g.rows(), g.cols()).first->second;
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  ParamMap<double> m_, v_;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  std::uint64_t seed = 0;
};

struct TrainMetrics {
  double initial_loss = 0.0;  // full training set, before any step
  double train_loss = 0.0;    // full training set, after the last step
  double eval_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> train_accuracy;
  std::optional<double> eval_accuracy;
  std::size_t steps = 0;
  std::size_t grad_evals = 0;
  double wall_ms = 0.0;
  std::size_t trainable_params = 0;
};

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

/// Minibatch Adam on the network's trainable set; one gradient evaluation per step.
inline TrainMetrics train_network(Network& net, const Dataset& train, const Dataset* eval, const TrainConfig& cfg) {
  train.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainMetrics m;
  m.trainable_params = trainable_parameter_count(net);
  m.initial_loss = evaluate(net, train).loss;
  const auto names = net.trainable_names();
  Adam opt(cfg.lr);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (const auto& idx : make_batches(order, cfg.batch_size)) {
      Gradients<double> g;
      const double loss = loss_and_gradients(net, train.subset(idx), names, g);
      ++m.grad_evals;
      if (!std::isfinite(loss)) throw TrainingError("training diverged (non-finite loss)", m.steps);
      opt.step(net.params, g);
      ++m.steps;
    }
  }
  const auto tr = evaluate(net, train);
  if (!std::isfinite(tr.loss)) throw TrainingError("training diverged (non-finite loss)", m.steps);
  m.train_loss = tr.loss;
  m.train_accuracy = tr.accuracy;
  if (eval != nullptr) {
    const auto ev = evaluate(net, *eval);
    m.eval_loss = ev.loss;
    m.eval_accuracy = ev.accuracy;
  }
  m.wall_ms = elapsed_ms(start);
  return m;
}

}  // namespace lorank
