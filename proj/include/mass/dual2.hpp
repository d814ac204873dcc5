#pragma once

#include <array>
#include <cmath>

// Plain second-order forward jet over up to 12 variables, double coefficients.
// This is the value-level counterpart of jet.hpp and powers the analytic
// corpus: closed-form Lagrangians and energies are written once against D2 and
// differentiated exactly, with no tape involved.

namespace mass {

struct D2 {
  static constexpr int kMax = 12;
  static constexpr int kMaxTri = kMax * (kMax + 1) / 2;

  int m = 0;
  double v = 0.0;
  std::array<double, kMax> g{};
  std::array<double, kMaxTri> h{};

  static int tri(int m, int i, int j) { return i * m - i * (i + 1) / 2 + j; }
  int ntri() const { return m * (m + 1) / 2; }

  static D2 cst(int m, double value) {
    D2 r;
    r.m = m;
    r.v = value;
    return r;
  }
  static D2 var(int m, int idx, double value) {
    D2 r = cst(m, value);
    r.g[idx] = 1.0;
    return r;
  }

  double grad(int i) const { return g[i]; }
  double hess(int i, int j) const { return i <= j ? h[tri(m, i, j)] : h[tri(m, j, i)]; }
};

inline D2 operator+(const D2& a, const D2& b) {
  D2 r = a;
  r.v += b.v;
  for (int i = 0; i < r.m; ++i) r.g[i] += b.g[i];
  for (int i = 0; i < r.ntri(); ++i) r.h[i] += b.h[i];
  return r;
}
inline D2 operator-(const D2& a, const D2& b) {
  D2 r = a;
  r.v -= b.v;
  for (int i = 0; i < r.m; ++i) r.g[i] -= b.g[i];
  for (int i = 0; i < r.ntri(); ++i) r.h[i] -= b.h[i];
  return r;
}
inline D2 operator-(const D2& a) {
  D2 r = a;
  r.v = -r.v;
  for (int i = 0; i < r.m; ++i) r.g[i] = -r.g[i];
  for (int i = 0; i < r.ntri(); ++i) r.h[i] = -r.h[i];
  return r;
}
inline D2 operator+(const D2& a, double c) {
  D2 r = a;
  r.v += c;
  return r;
}
inline D2 operator+(double c, const D2& a) { return a + c; }
inline D2 operator-(const D2& a, double c) { return a + (-c); }
inline D2 operator-(double c, const D2& a) { return (-a) + c; }
inline D2 operator*(const D2& a, double c) {
  D2 r = a;
  r.v *= c;
  for (int i = 0; i < r.m; ++i) r.g[i] *= c;
  for (int i = 0; i < r.ntri(); ++i) r.h[i] *= c;
  return r;
}
inline D2 operator*(double c, const D2& a) { return a * c; }
inline D2 operator/(const D2& a, double c) { return a * (1.0 / c); }

inline D2 operator*(const D2& a, const D2& b) {
  const int m = a.m;
  D2 r = D2::cst(m, a.v * b.v);
  for (int i = 0; i < m; ++i) r.g[i] = a.v * b.g[i] + a.g[i] * b.v;
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      int k = D2::tri(m, i, j);
      r.h[k] = a.v * b.h[k] + a.h[k] * b.v + a.g[i] * b.g[j] + a.g[j] * b.g[i];
    }
  return r;
}

// unary chain rule: out = f(a) with f', f'' evaluated at a.v
inline D2 chain(const D2& a, double f, double fp, double fpp) {
  const int m = a.m;
  D2 r = D2::cst(m, f);
  for (int i = 0; i < m; ++i) r.g[i] = fp * a.g[i];
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      int k = D2::tri(m, i, j);
      r.h[k] = fp * a.h[k] + fpp * a.g[i] * a.g[j];
    }
  return r;
}

inline D2 inv(const D2& a) { return chain(a, 1.0 / a.v, -1.0 / (a.v * a.v), 2.0 / (a.v * a.v * a.v)); }
inline D2 operator/(const D2& a, const D2& b) { return a * inv(b); }
inline D2 operator/(double c, const D2& b) { return inv(b) * c; }

inline D2 sqrt(const D2& a) {
  double s = std::sqrt(a.v);
  return chain(a, s, 0.5 / s, -0.25 / (s * a.v));
}
inline D2 sin(const D2& a) { return chain(a, std::sin(a.v), std::cos(a.v), -std::sin(a.v)); }
inline D2 cos(const D2& a) { return chain(a, std::cos(a.v), -std::sin(a.v), -std::cos(a.v)); }
inline D2 exp(const D2& a) {
  double e = std::exp(a.v);
  return chain(a, e, e, e);
}
// |a| away from zero; second derivative is zero there
inline D2 abs(const D2& a) {
  double s = a.v >= 0.0 ? 1.0 : -1.0;
  return chain(a, std::fabs(a.v), s, 0.0);
}
inline D2 sq(const D2& a) { return a * a; }

}  // namespace mass
