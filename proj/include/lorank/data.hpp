#pragma once

#include <span>
#include <string>
#include <vector>

#include "lorank/errors.hpp"
#include "lorank/tensor.hpp"

namespace lorank {

/// Features plus either class labels (classification) or a target matrix
/// (regression).
struct Dataset {
  Tensor<double> features;   // N×d
  std::vector<int> labels;   // N, classification
  Tensor<double> targets;    // N×o, regression
  std::string provenance;

  std::size_t size() const noexcept { return features.rows(); }
  bool is_classification() const noexcept { return targets.empty(); }

  void validate() const {
    if (size() == 0) throw DomainError("dataset must contain at least one row");
    if (is_classification()) {
      if (labels.size() != size())
        throw DimensionError("dataset: " + std::to_string(labels.size()) + " labels for " + std::to_string(size()) + " rows");
    } else if (targets.rows() != size()) {
      throw DimensionError("dataset: target rows " + std::to_string(targets.rows()) + " for " +
                           std::to_string(size()) + " rows");
    }
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.features = gather_rows(features, idx);
    if (is_classification()) {
      out.labels.reserve(idx.size());
      for (auto i : idx) out.labels.push_back(labels.at(i));
    } else {
      out.targets = gather_rows(targets, idx);
    }
    out.provenance = provenance;
    return out;
  }
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.features.cols() != b.features.cols() || a.is_classification() != b.is_classification()) {
    throw DimensionError("concat: incompatible datasets");
  }
  Dataset out;
  std::vector<double> f(a.features.data().begin(), a.features.data().end());
  f.insert(f.end(), b.features.data().begin(), b.features.data().end());
  out.features = Tensor<double>(a.size() + b.size(), a.features.cols(), std::move(f));
  if (a.is_classification()) {
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  } else {
    if (a.targets.cols() != b.targets.cols()) throw DimensionError("concat: target widths differ");
    std::vector<double> t(a.targets.data().begin(), a.targets.data().end());
    t.insert(t.end(), b.targets.data().begin(), b.targets.data().end());
    out.targets = Tensor<double>(a.size() + b.size(), a.targets.cols(), std::move(t));
  }
  out.provenance = a.provenance;
  return out;
}

// Contiguous minibatches over a permutation of row indices.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  if (batch_size == 0) throw DomainError("batch size must be >= 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace lorank
