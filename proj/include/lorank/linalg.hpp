#pragma once

#include <Eigen/SVD>
#include <vector>

#include "lorank/tensor.hpp"

namespace lorank {

inline std::vector<double> singular_values(const Tensor<double>& a) {
  if (a.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  return std::vector<double>(s.data(), s.data() + s.size());
}

/// Count of singular values above rel_tol·σ_max (0 for the zero matrix).
inline std::size_t numerical_rank(const Tensor<double>& a, double rel_tol = 1e-9) {
  const auto s = singular_values(a);
  if (s.empty() || s.front() == 0.0) return 0;
  std::size_t r = 0;
  for (double x : s) r += x > rel_tol * s.front();
  return r;
}

}  // namespace lorank
