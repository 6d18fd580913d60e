#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lorank/errors.hpp"
#include "lorank/rng.hpp"
#include "lorank/tape.hpp"

namespace lorank {

/// How selection logits map to selection weights.
///   softmax: α = softmax(β), Σα = 1
///   sigmoid: α_j = 1/(1+e^{-β_j}), independent
///   none:    α = β, no constraint
enum class ConstraintMode { softmax, sigmoid, none };

inline std::string to_string(ConstraintMode m) {
  switch (m) {
    case ConstraintMode::softmax: return "softmax";
    case ConstraintMode::sigmoid: return "sigmoid";
    case ConstraintMode::none: return "none";
  }
  return "?";
}

inline ConstraintMode parse_constraint_mode(const std::string& s) {
  if (s == "softmax") return ConstraintMode::softmax;
  if (s == "sigmoid") return ConstraintMode::sigmoid;
  if (s == "none") return ConstraintMode::none;
  throw ConfigError("unknown constraint mode '" + s + "' (expected softmax|sigmoid|none)");
}

using AlphaVector = std::vector<double>;

template <class T>
Tensor<T> alphas(const Tensor<T>& beta, ConstraintMode mode) {
  if (beta.empty()) throw DomainError("alphas: empty selection vector");
  if (beta.rows() != 1) throw DimensionError("alphas: expected 1xk logits, got " + beta.shape());
  switch (mode) {
    case ConstraintMode::softmax: return row_softmax(beta);
    case ConstraintMode::sigmoid: return sigmoid(beta);
    case ConstraintMode::none: return beta;
  }
  return beta;
}

inline AlphaVector alphas(const AlphaVector& beta, ConstraintMode mode) {
  return alphas(Tensor<double>::row_vector(beta), mode).vec();
}

template <class T>
Var<T> alphas(const Var<T>& beta, ConstraintMode mode) {
  if (beta.value().empty()) throw DomainError("alphas: empty selection vector");
  if (beta.rows() != 1) throw DimensionError("alphas: expected 1xk logits, got " + beta.value().shape());
  switch (mode) {
    case ConstraintMode::softmax: return row_softmax(beta);
    case ConstraintMode::sigmoid: return sigmoid(beta);
    case ConstraintMode::none: return beta;
  }
  return beta;
}

namespace detail {
inline void check_factor_shapes(std::size_t um, std::size_t uk, std::size_t vk, std::size_t vn, std::size_t ak) {
  if (uk != vk || uk != ak || vn == 0 || um == 0) {
    throw DimensionError("delta: factor shapes " + Tensor<double>::shape_string(um, uk) + ", " +
                         Tensor<double>::shape_string(vk, vn) + " with " + std::to_string(ak) + " selection weights");
  }
}
}  // namespace detail

/// Σ_j α_j · u[:,j] ⊗ v[j,:]  ==  u · diag(α) · v.
inline Tensor<double> delta(const Tensor<double>& u, const Tensor<double>& v, const AlphaVector& alpha) {
  detail::check_factor_shapes(u.rows(), u.cols(), v.rows(), v.cols(), alpha.size());
  return matmul(matmul(u, diag(Tensor<double>::row_vector(alpha))), v);
}

template <class T>
Var<T> delta(const Var<T>& u, const Var<T>& v, const Var<T>& alpha) {
  detail::check_factor_shapes(u.rows(), u.cols(), v.rows(), v.cols(), alpha.value().size());
  return matmul(matmul(u, diag(alpha)), v);
}

/// Linear layer with frozen base weight and a low-rank update.
///
/// With selection logits (`beta` non-empty) the update is u·diag(α(β))·v;
/// after pruning the logits are dropped and the update is the plain u·v.
struct LoraLinear {
  Tensor<double> w_tilde;  // m×n, frozen
  Tensor<double> u;        // m×k
  Tensor<double> v;        // k×n
  Tensor<double> beta;     // 1×k, or empty once ranks are fixed

  std::size_t rank() const noexcept { return u.cols(); }
  bool has_selection() const noexcept { return !beta.empty(); }

  void validate() const {
    if (rank() == 0) throw DomainError("LoraLinear: rank must be at least 1");
    if (u.rows() != w_tilde.rows() || v.cols() != w_tilde.cols() || v.rows() != rank()) {
      throw DimensionError("LoraLinear: inconsistent shapes w=" + w_tilde.shape() + " u=" + u.shape() +
                           " v=" + v.shape());
    }
    if (has_selection() && (beta.rows() != 1 || beta.cols() != rank())) {
      throw DimensionError("LoraLinear: beta " + beta.shape() + " does not match rank " + std::to_string(rank()));
    }
  }
};

// Logit value that starts every component equally weighted. Under softmax
// and sigmoid this is 0 (α = 1/k and α = 0.5); with no constraint α = β
// itself, so starting at 0 would freeze u and v.
inline double initial_logit(ConstraintMode mode, std::size_t k) {
  return mode == ConstraintMode::none ? 1.0 / static_cast<double>(k) : 0.0;
}

inline constexpr double kDefaultLoraInitStd = 0.02;
inline constexpr std::size_t kDefaultRankBudget = 8;

/// u ~ N(0, std²), v = 0, β uniform. Δ is exactly zero at initialization.
inline LoraLinear init_lora(Tensor<double> w_tilde, std::size_t k, std::uint64_t seed,
                            double init_std = kDefaultLoraInitStd, ConstraintMode mode = ConstraintMode::softmax,
                            bool with_selection = true) {
  if (k == 0 || w_tilde.rows() == 0 || w_tilde.cols() == 0) throw DomainError("init_lora: m, n, k must be >= 1");
  LoraLinear layer;
  const std::size_t m = w_tilde.rows();
  const std::size_t n = w_tilde.cols();
  layer.w_tilde = std::move(w_tilde);
  layer.u = Tensor<double>(m, k);
  Rng rng(seed);
  for (auto& x : layer.u.data()) x = rng.normal(0.0, init_std);
  layer.v = Tensor<double>(k, n);
  if (with_selection) layer.beta = Tensor<double>(1, k, initial_logit(mode, k));
  return layer;
}

inline LoraLinear init_lora(std::size_t m, std::size_t n, std::size_t k, std::uint64_t seed) {
  if (m == 0 || n == 0) throw DomainError("init_lora: m, n, k must be >= 1");
  return init_lora(Tensor<double>(m, n), k, seed);
}

inline Tensor<double> effective_weight(const LoraLinear& layer, ConstraintMode mode = ConstraintMode::softmax) {
  layer.validate();
  if (!layer.has_selection()) return add(layer.w_tilde, matmul(layer.u, layer.v));
  return add(layer.w_tilde, delta(layer.u, layer.v, alphas(layer.beta.vec(), mode)));
}

template <class T>
Var<T> effective_weight(const Var<T>& w_tilde, const Var<T>& u, const Var<T>& v, const std::optional<Var<T>>& beta,
                        ConstraintMode mode) {
  if (!beta) return add(w_tilde, matmul(u, v));
  return add(w_tilde, delta(u, v, alphas(*beta, mode)));
}

}  // namespace lorank
