#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lorank/tape.hpp"

namespace lorank {

/// Named tensors, ordered by name so every sweep visits them identically.
template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <class T>
using VarMap = std::map<std::string, Var<T>>;

template <class T>
VarMap<T> register_parameters(Tape<T>& tape, const ParamMap<T>& params) {
  VarMap<T> out;
  for (const auto& [name, value] : params) out.emplace(name, tape.parameter(name, value));
  return out;
}

template <class T>
VarMap<T> register_constants(Tape<T>& tape, const ParamMap<T>& params) {
  VarMap<T> out;
  for (const auto& [name, value] : params) out.emplace(name, tape.constant(value));
  return out;
}

template <class T>
std::vector<std::string> names_of(const ParamMap<T>& params) {
  std::vector<std::string> out;
  out.reserve(params.size());
  for (const auto& kv : params) out.push_back(kv.first);
  return out;
}

template <class T>
ParamMap<T> to_param_map(const Gradients<T>& g) {
  return ParamMap<T>(g.begin(), g.end());
}

template <class U, class T>
ParamMap<U> lift_all(const ParamMap<T>& params) {
  ParamMap<U> out;
  for (const auto& [name, value] : params) out.emplace(name, lift<U>(value));
  return out;
}

// Euclidean norm over every entry of every tensor.
inline double global_norm(const ParamMap<double>& m) {
  double s = 0.0;
  for (const auto& [_, t] : m)
    for (double x : t.data()) s += x * x;
  return std::sqrt(s);
}

inline bool all_finite(const ParamMap<double>& m) {
  for (const auto& [_, t] : m)
    if (!all_finite(t)) return false;
  return true;
}

// params[name] += s·delta[name] for every name in delta.
inline void axpy(ParamMap<double>& params, double s, const ParamMap<double>& delta) {
  for (const auto& [name, d] : delta) axpy(params.at(name), s, d);
}

inline std::size_t scalar_count(const ParamMap<double>& m) {
  std::size_t n = 0;
  for (const auto& [_, t] : m) n += t.size();
  return n;
}

}  // namespace lorank
