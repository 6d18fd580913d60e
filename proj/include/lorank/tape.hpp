#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lorank/errors.hpp"
#include "lorank/tensor.hpp"

namespace lorank {

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  const Tensor<T>& value() const { return tape_->value(index_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Gradients keyed by parameter name; shapes match the parameters.
template <class T>
class Gradients {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  const Tensor<T>& at(const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw UnknownParameterError(name);
    return it->second;
  }
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  void set(const std::string& name, Tensor<T> g) { grads_[name] = std::move(g); }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  const Map& map() const { return grads_; }

 private:
  Map grads_;
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order, so operands always precede their
/// users and the backward sweep is a single reverse pass over the node list.
/// With recording disabled, values are still computed (by the same kernels)
/// but no backward rules are stored.
template <class T>
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tape&, std::size_t self, const Tensor<T>& grad, std::vector<Tensor<T>>& grads)>;

  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t i) const { return nodes_[i].inputs; }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> parameter(const std::string& name, Tensor<T> value) {
    if (params_.count(name) != 0) throw DomainError("parameter registered twice: " + name);
    nodes_.push_back(Node{std::move(value), {}, {}, recording_});
    params_.emplace(name, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }

  // Appends an operation node. The backward rule is dropped when no operand
  // needs a gradient or recording is off.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    needs = needs && recording_;
    if (!needs) {
      backward = nullptr;
      inputs.clear();
    }
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  Gradients<T> backward(const Var<T>& loss, std::span<const std::string> wanted) const {
    if (&loss.tape() != this) throw DomainError("backward: loss belongs to another tape");
    const auto& lv = value(loss.index());
    if (lv.rows() != 1 || lv.cols() != 1) throw DimensionError("backward: loss must be 1x1, got " + lv.shape());
    if (!recording_) throw DomainError("backward: tape is not recording");
    for (const auto& w : wanted)
      if (params_.count(w) == 0) throw UnknownParameterError(w);

    std::vector<Tensor<T>> grads(nodes_.size());
    grads[loss.index()] = Tensor<T>(1, 1, T(1.0));
    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.backward || grads[i].empty()) continue;
      n.backward(*this, i, grads[i], grads);
    }

    Gradients<T> out;
    for (const auto& w : wanted) {
      const std::size_t idx = params_.at(w);
      if (grads[idx].empty()) {
        out.set(w, Tensor<T>(nodes_[idx].value.rows(), nodes_[idx].value.cols()));
      } else {
        out.set(w, std::move(grads[idx]));
      }
    }
    return out;
  }

  Gradients<T> backward(const Var<T>& loss, std::initializer_list<std::string> wanted) const {
    std::vector<std::string> w(wanted);
    return backward(loss, std::span<const std::string>(w));
  }

  static void accumulate(std::vector<Tensor<T>>& grads, std::size_t i, const Tensor<T>& g) {
    if (grads[i].empty()) {
      grads[i] = g;
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) grads[i][k] += g[k];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
  bool recording_ = true;
};

namespace detail {
template <class T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw DomainError("operands recorded on different tapes");
}
}  // namespace detail

// Traced primitives. Each computes its value with the kernel of the same name
// and records the exact backward rule.

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  return a.tape().record(matmul(a.value(), b.value()), {a.index(), b.index()},
                         [ia = a.index(), ib = b.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                            std::vector<Tensor<T>>& gs) {
                           if (t.requires_grad(ia)) Tape<T>::accumulate(gs, ia, matmul(g, transpose(t.value(ib))));
                           if (t.requires_grad(ib)) Tape<T>::accumulate(gs, ib, matmul(transpose(t.value(ia)), g));
                         });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  return a.tape().record(add(a.value(), b.value()), {a.index(), b.index()},
                         [ia = a.index(), ib = b.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                            std::vector<Tensor<T>>& gs) {
                           if (t.requires_grad(ia)) Tape<T>::accumulate(gs, ia, g);
                           if (t.requires_grad(ib)) Tape<T>::accumulate(gs, ib, g);
                         });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  return a.tape().record(sub(a.value(), b.value()), {a.index(), b.index()},
                         [ia = a.index(), ib = b.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                            std::vector<Tensor<T>>& gs) {
                           if (t.requires_grad(ia)) Tape<T>::accumulate(gs, ia, g);
                           if (t.requires_grad(ib)) Tape<T>::accumulate(gs, ib, scale(g, -1.0));
                         });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  return a.tape().record(hadamard(a.value(), b.value()), {a.index(), b.index()},
                         [ia = a.index(), ib = b.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                            std::vector<Tensor<T>>& gs) {
                           if (t.requires_grad(ia)) Tape<T>::accumulate(gs, ia, hadamard(g, t.value(ib)));
                           if (t.requires_grad(ib)) Tape<T>::accumulate(gs, ib, hadamard(g, t.value(ia)));
                         });
}

template <class T>
Var<T> scale(const Var<T>& a, double s) {
  return a.tape().record(scale(a.value(), s), {a.index()},
                         [ia = a.index(), s](const Tape<T>&, std::size_t, const Tensor<T>& g,
                                             std::vector<Tensor<T>>& gs) {
                           Tape<T>::accumulate(gs, ia, scale(g, s));
                         });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  return a.tape().record(transpose(a.value()), {a.index()},
                         [ia = a.index()](const Tape<T>&, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           Tape<T>::accumulate(gs, ia, transpose(g));
                         });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return a.tape().record(relu(a.value()), {a.index()},
                         [ia = a.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& x = t.value(ia);
                           Tensor<T> d(g.rows(), g.cols());
                           for (std::size_t k = 0; k < g.size(); ++k) d[k] = value_of(x[k]) > 0.0 ? g[k] : T(0.0);
                           Tape<T>::accumulate(gs, ia, d);
                         });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return a.tape().record(sigmoid(a.value()), {a.index()},
                         [ia = a.index()](const Tape<T>& t, std::size_t self, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& y = t.value(self);
                           Tensor<T> d(g.rows(), g.cols());
                           for (std::size_t k = 0; k < g.size(); ++k) d[k] = g[k] * y[k] * (T(1.0) - y[k]);
                           Tape<T>::accumulate(gs, ia, d);
                         });
}

template <class T>
Var<T> row_softmax(const Var<T>& a) {
  return a.tape().record(row_softmax(a.value()), {a.index()},
                         [ia = a.index()](const Tape<T>& t, std::size_t self, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& y = t.value(self);
                           Tensor<T> d(g.rows(), g.cols());
                           for (std::size_t i = 0; i < g.rows(); ++i) {
                             T dot(0.0);
                             for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
                             for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - dot);
                           }
                           Tape<T>::accumulate(gs, ia, d);
                         });
}

template <class T>
Var<T> mean_pool_rows(const Var<T>& a) {
  return a.tape().record(mean_pool_rows(a.value()), {a.index()},
                         [ia = a.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& x = t.value(ia);
                           const T inv(1.0 / static_cast<double>(x.rows()));
                           Tensor<T> d(x.rows(), x.cols());
                           for (std::size_t i = 0; i < x.rows(); ++i)
                             for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(0, j) * inv;
                           Tape<T>::accumulate(gs, ia, d);
                         });
}

template <class T>
Var<T> diag(const Var<T>& v) {
  return v.tape().record(diag(v.value()), {v.index()},
                         [iv = v.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& x = t.value(iv);
                           Tensor<T> d(x.rows(), x.cols());
                           for (std::size_t k = 0; k < x.size(); ++k) d[k] = g(k, k);
                           Tape<T>::accumulate(gs, iv, d);
                         });
}

template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& b) {
  detail::same_tape(x, b);
  return x.tape().record(add_row(x.value(), b.value()), {x.index(), b.index()},
                         [ix = x.index(), ib = b.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                            std::vector<Tensor<T>>& gs) {
                           if (t.requires_grad(ix)) Tape<T>::accumulate(gs, ix, g);
                           if (t.requires_grad(ib)) {
                             Tensor<T> d(1, g.cols());
                             for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
                             Tape<T>::accumulate(gs, ib, d);
                           }
                         });
}

// Sum of all entries, as a 1×1 node.
template <class T>
Var<T> sum(const Var<T>& a) {
  return a.tape().record(Tensor<T>::scalar(sum_all(a.value())), {a.index()},
                         [ia = a.index()](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                           const auto& x = t.value(ia);
                           Tape<T>::accumulate(gs, ia, Tensor<T>(x.rows(), x.cols(), g[0]));
                         });
}

// Stacks 1×n rows into an N×n matrix.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw DimensionError("concat_rows: no rows");
  const std::size_t n = rows.front().cols();
  Tensor<T> out(rows.size(), n);
  std::vector<std::size_t> idx;
  idx.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::same_tape(rows.front(), rows[i]);
    const auto& r = rows[i].value();
    if (r.rows() != 1 || r.cols() != n) throw DimensionError("concat_rows: row " + std::to_string(i) + " is " + r.shape());
    for (std::size_t j = 0; j < n; ++j) out(i, j) = r(0, j);
    idx.push_back(rows[i].index());
  }
  return rows.front().tape().record(std::move(out), idx,
                                    [idx](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                          std::vector<Tensor<T>>& gs) {
                                      for (std::size_t i = 0; i < idx.size(); ++i)
                                        if (t.requires_grad(idx[i])) Tape<T>::accumulate(gs, idx[i], slice_rows(g, i, i + 1));
                                    });
}

/// Mean over rows of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const int> labels) {
  using std::exp;
  using std::log;
  const auto& z = logits.value();
  if (labels.size() != z.rows()) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for logits " + z.shape());
  }
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= z.cols())
      throw DomainError("cross_entropy_loss: label " + std::to_string(l) + " out of range for " +
                        std::to_string(z.cols()) + " classes");
  const Tensor<T> p = row_softmax(z);
  T total(0.0);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    T mx = z(i, 0);
    for (std::size_t j = 1; j < z.cols(); ++j)
      if (value_of(z(i, j)) > value_of(mx)) mx = z(i, j);
    T s(0.0);
    for (std::size_t j = 0; j < z.cols(); ++j) s += exp(z(i, j) - mx);
    total += (mx + log(s)) - z(i, static_cast<std::size_t>(labels[i]));
  }
  const double n = static_cast<double>(z.rows());
  total *= T(1.0 / n);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record(Tensor<T>::scalar(total), {logits.index()},
                              [il = logits.index(), p, lab, n](const Tape<T>&, std::size_t, const Tensor<T>& g,
                                                               std::vector<Tensor<T>>& gs) {
                                Tensor<T> d = p;
                                for (std::size_t i = 0; i < d.rows(); ++i) d(i, static_cast<std::size_t>(lab[i])) -= T(1.0);
                                const T s = g[0] * T(1.0 / n);
                                for (std::size_t k = 0; k < d.size(); ++k) d[k] *= s;
                                Tape<T>::accumulate(gs, il, d);
                              });
}

/// Mean over all entries of (pred - target)^2.
template <class T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
  const auto& p = pred.value();
  detail::require_same_shape(p, target, "mse_loss");
  const double n = static_cast<double>(p.size());
  T total(0.0);
  for (std::size_t k = 0; k < p.size(); ++k) {
    const T d = p[k] - target[k];
    total += d * d;
  }
  total *= T(1.0 / n);
  return pred.tape().record(Tensor<T>::scalar(total), {pred.index()},
                            [ip = pred.index(), target, n](const Tape<T>& t, std::size_t, const Tensor<T>& g,
                                                           std::vector<Tensor<T>>& gs) {
                              const auto& pv = t.value(ip);
                              Tensor<T> d(pv.rows(), pv.cols());
                              const T s = g[0] * T(2.0 / n);
                              for (std::size_t k = 0; k < d.size(); ++k) d[k] = (pv[k] - target[k]) * s;
                              Tape<T>::accumulate(gs, ip, d);
                            });
}

}  // namespace lorank
