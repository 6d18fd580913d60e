#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "lorank/errors.hpp"
#include "lorank/params.hpp"

namespace lorank {

/// Central-difference gradient of a scalar function of named parameters.
///
/// Test oracle: it never touches a tape. Each coordinate costs two
/// evaluations of f.
inline Gradients<double> finite_diff_grad(const std::function<double(const ParamMap<double>&)>& f,
                                          const ParamMap<double>& params, double step) {
  if (!(step > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
  ParamMap<double> work = params;
  Gradients<double> out;
  for (const auto& [name, value] : params) {
    Tensor<double> g(value.rows(), value.cols());
    Tensor<double>& p = work.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = f(work);
      p[i] = orig - step;
      const double fm = f(work);
      p[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("finite_diff_grad: non-finite evaluation at " + name + "[" + std::to_string(i) + "]");
      }
      g[i] = (fp - fm) / (2.0 * step);
    }
    out.set(name, std::move(g));
  }
  return out;
}

}  // namespace lorank
