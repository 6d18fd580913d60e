#pragma once

#include <cmath>

namespace lorank {

/// First-order forward-mode number: val + eps·ε with ε² = 0.
///
/// Running the reverse-mode tape over Dual scalars yields, in the eps part of
/// each gradient, the directional derivative of that gradient along the seeded
/// tangent (forward-over-reverse). This is how the exact mixed second-order
/// term of the lookahead hypergradient is obtained.
struct Dual {
  double val = 0.0;
  double eps = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v) : val(v) {}  // NOLINT: implicit lift of constants
  constexpr Dual(double v, double e) : val(v), eps(e) {}

  constexpr Dual& operator+=(const Dual& o) {
    val += o.val;
    eps += o.eps;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    val -= o.val;
    eps -= o.eps;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    eps = eps * o.val + val * o.eps;
    val *= o.val;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    eps = (eps * o.val - val * o.eps) / (o.val * o.val);
    val /= o.val;
    return *this;
  }
  friend constexpr bool operator==(const Dual&, const Dual&) = default;
};

constexpr Dual operator-(const Dual& a) { return {-a.val, -a.eps}; }
constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.val);
  return {e, e * a.eps};
}
inline Dual log(const Dual& a) { return {std::log(a.val), a.eps / a.val}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.val);
  return {s, a.eps / (2.0 * s)};
}

constexpr double value_of(double x) { return x; }
constexpr double value_of(const Dual& x) { return x.val; }
constexpr double tangent_of(double) { return 0.0; }
constexpr double tangent_of(const Dual& x) { return x.eps; }

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(const Dual& x) { return std::isfinite(x.val) && std::isfinite(x.eps); }

}  // namespace lorank
