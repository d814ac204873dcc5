#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mass/dual2.hpp"
#include "mass/linalg.hpp"
#include "mass/rng.hpp"

// Analytic corpus: closed-form Lagrangians, energies and ground-truth
// accelerations for every system, plus i.i.d. phase-space sampling. All
// physical constants (masses, lengths, g, G, c) are 1.

namespace mass {

struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

struct SingularMassMatrix : std::runtime_error {
  SingularMassMatrix() : std::runtime_error("velocity Hessian of L is numerically singular") {}
};

enum class SystemId {
  kSho,
  kPendulum,
  kKepler,
  kRelativistic,
  kSyntheticAlpha,
  kSyntheticBeta,
  kDoublePendulum,
  kSphericalPendulum,
  kTwoBody,
  kThreeBody,
};

struct PhasePoint {
  std::vector<double> x;
  std::vector<double> y;
};

// Coordinate-major sample storage: coordinate k of sample i sits at [k*n + i],
// which lines up with the per-coordinate tape leaves.
struct Batch {
  int d = 0;
  int n = 0;
  std::vector<double> x;     // d*n
  std::vector<double> y;     // d*n
  std::vector<double> ydot;  // d*n

  // paper convention xdot = y, kept as an alias rather than a copy
  std::span<const double> xdot() const { return {y.data(), y.size()}; }
};

using ScalarForm = std::function<D2(std::span<const D2>, std::span<const D2>)>;

struct SystemSpec {
  SystemId id;
  std::string name;
  int dim;
  ScalarForm lagrangian;
  ScalarForm kinetic;
  ScalarForm potential;
  bool has_force_law;
};

// ---- closed forms -------------------------------------------------------------

namespace forms {

inline D2 gamma_of(std::span<const D2> y) { return 1.0 / sqrt(1.0 - sq(y[0])); }

inline D2 sho_T(std::span<const D2>, std::span<const D2> y) { return 0.5 * sq(y[0]); }
inline D2 sho_V(std::span<const D2> x, std::span<const D2>) { return 0.5 * sq(x[0]); }
inline D2 sho_L(std::span<const D2> x, std::span<const D2> y) { return sho_T(x, y) - sho_V(x, y); }

inline D2 pend_V(std::span<const D2> x, std::span<const D2>) { return 1.0 - cos(x[0]); }
inline D2 pend_L(std::span<const D2> x, std::span<const D2> y) { return sho_T(x, y) - pend_V(x, y); }

inline D2 kepler_V(std::span<const D2> x, std::span<const D2>) { return -1.0 / abs(x[0]); }
inline D2 kepler_L(std::span<const D2> x, std::span<const D2> y) { return sho_T(x, y) - kepler_V(x, y); }

inline D2 rel_T(std::span<const D2>, std::span<const D2> y) { return gamma_of(y); }
inline D2 rel_L(std::span<const D2> x, std::span<const D2> y) {
  return -sqrt(1.0 - sq(y[0])) - 0.5 * sq(x[0]);
}

inline D2 alpha_L(std::span<const D2> x, std::span<const D2> y) {
  return -sqrt(1.0 - sq(y[0])) * (1.0 + 0.5 * sq(x[0]));
}
inline D2 alpha_V(std::span<const D2> x, std::span<const D2> y) {
  return 0.5 * sq(x[0]) * gamma_of(y);
}

inline D2 beta_L(std::span<const D2> x, std::span<const D2> y) {
  return -sqrt(1.0 - sq(y[0])) - 0.5 * sq(x[0]) * cos(y[0]);
}
inline D2 beta_V(std::span<const D2> x, std::span<const D2> y) {
  return 0.5 * sq(x[0]) * (cos(y[0]) + y[0] * sin(y[0]));
}

// equal unit masses and lengths; coordinates are the two angles
inline D2 double_pend_T(std::span<const D2> x, std::span<const D2> y) {
  return sq(y[0]) + 0.5 * sq(y[1]) + y[0] * y[1] * cos(x[0] - x[1]);
}
inline D2 double_pend_V(std::span<const D2> x, std::span<const D2>) {
  return -2.0 * cos(x[0]) - cos(x[1]);
}
inline D2 double_pend_L(std::span<const D2> x, std::span<const D2> y) {
  return double_pend_T(x, y) - double_pend_V(x, y);
}

inline D2 spherical_T(std::span<const D2> x, std::span<const D2> y) {
  return 0.5 * sq(y[0]) + 0.5 * sq(sin(x[0])) * sq(y[1]);
}
inline D2 spherical_V(std::span<const D2> x, std::span<const D2>) { return -cos(x[0]); }
inline D2 spherical_L(std::span<const D2> x, std::span<const D2> y) {
  return spherical_T(x, y) - spherical_V(x, y);
}

template <int NB>
inline D2 nbody_T(std::span<const D2>, std::span<const D2> y) {
  D2 t = D2::cst(y[0].m, 0.0);
  for (int i = 0; i < 2 * NB; ++i) t = t + 0.5 * sq(y[i]);
  return t;
}
template <int NB>
inline D2 nbody_V(std::span<const D2> x, std::span<const D2>) {
  D2 v = D2::cst(x[0].m, 0.0);
  for (int i = 0; i < NB; ++i)
    for (int j = i + 1; j < NB; ++j) {
      D2 dx = x[2 * i] - x[2 * j];
      D2 dy = x[2 * i + 1] - x[2 * j + 1];
      v = v - 1.0 / sqrt(sq(dx) + sq(dy));
    }
  return v;
}
template <int NB>
inline D2 nbody_L(std::span<const D2> x, std::span<const D2> y) {
  return nbody_T<NB>(x, y) - nbody_V<NB>(x, y);
}

}  // namespace forms

inline const std::vector<SystemSpec>& all_systems() {
  static const std::vector<SystemSpec> table = [] {
    std::vector<SystemSpec> v;
    v.push_back({SystemId::kSho, "sho", 1, forms::sho_L, forms::sho_T, forms::sho_V, true});
    v.push_back({SystemId::kPendulum, "pendulum", 1, forms::pend_L, forms::sho_T, forms::pend_V, true});
    v.push_back({SystemId::kKepler, "kepler", 1, forms::kepler_L, forms::sho_T, forms::kepler_V, true});
    v.push_back({SystemId::kRelativistic, "relativistic", 1, forms::rel_L, forms::rel_T, forms::sho_V, false});
    v.push_back({SystemId::kSyntheticAlpha, "alpha", 1, forms::alpha_L, forms::rel_T, forms::alpha_V, false});
    v.push_back({SystemId::kSyntheticBeta, "beta", 1, forms::beta_L, forms::rel_T, forms::beta_V, false});
    v.push_back({SystemId::kDoublePendulum, "double_pendulum", 2, forms::double_pend_L,
                 forms::double_pend_T, forms::double_pend_V, false});
    v.push_back({SystemId::kSphericalPendulum, "spherical_pendulum", 2, forms::spherical_L,
                 forms::spherical_T, forms::spherical_V, false});
    v.push_back({SystemId::kTwoBody, "two_body", 4, forms::nbody_L<2>, forms::nbody_T<2>,
                 forms::nbody_V<2>, false});
    v.push_back({SystemId::kThreeBody, "three_body", 6, forms::nbody_L<3>, forms::nbody_T<3>,
                 forms::nbody_V<3>, false});
    return v;
  }();
  return table;
}

inline const SystemSpec& system_spec(SystemId id) {
  return all_systems()[static_cast<size_t>(id)];
}

inline const SystemSpec* find_system(const std::string& name) {
  for (const auto& s : all_systems())
    if (s.name == name) return &s;
  return nullptr;
}

// ---- domain checks ------------------------------------------------------------

inline bool is_relativistic_family(SystemId id) {
  return id == SystemId::kRelativistic || id == SystemId::kSyntheticAlpha ||
         id == SystemId::kSyntheticBeta;
}

inline void check_domain(const SystemSpec& spec, std::span<const double> x,
                         std::span<const double> y) {
  if (is_relativistic_family(spec.id)) {
    for (double yi : y)
      if (std::fabs(yi) >= 1.0)
        throw DomainError(spec.name + ": |y| >= 1 is superluminal");
  }
  if (spec.id == SystemId::kKepler) {
    if (std::fabs(x[0]) < 0.1) throw DomainError("kepler: |x| below softening bound 0.1");
  }
}

// ---- accelerations ------------------------------------------------------------

// Exact Euler-Lagrange acceleration L_yy^{-1} (L_x - L_yx y) for any C^2
// Lagrangian, with L differentiated exactly through forward jets.
inline void euler_lagrange_accel(const ScalarForm& lagrangian, std::span<const double> x,
                                 std::span<const double> y, std::span<double> out) {
  const int d = static_cast<int>(x.size());
  const int m = 2 * d;
  std::vector<D2> xv(d), yv(d);
  for (int i = 0; i < d; ++i) xv[i] = D2::var(m, i, x[i]);
  for (int i = 0; i < d; ++i) yv[i] = D2::var(m, d + i, y[i]);
  D2 L = lagrangian(xv, yv);

  std::vector<double> lyy(static_cast<size_t>(d) * d), rhs(d);
  for (int i = 0; i < d; ++i) {
    double b = L.grad(i);  // L_x_i
    for (int j = 0; j < d; ++j) b -= L.hess(d + i, j) * y[j];
    rhs[i] = b;
    for (int j = 0; j < d; ++j) lyy[i * d + j] = L.hess(d + i, d + j);
  }
  if (!solve_sym(lyy.data(), d, rhs.data(), out.data())) throw SingularMassMatrix();
}

inline void force_law(const SystemSpec& spec, std::span<const double> x,
                      std::span<const double> y, std::span<double> out) {
  switch (spec.id) {
    case SystemId::kSho:
      out[0] = -x[0];
      break;
    case SystemId::kPendulum:
      out[0] = -std::sin(x[0]);
      break;
    case SystemId::kKepler:
      out[0] = -(x[0] > 0 ? 1.0 : -1.0) / (x[0] * x[0]);
      break;
    default:
      throw std::logic_error("no force law for " + spec.name);
  }
  (void)y;
}

// Ground-truth acceleration: classical force law for systems 1-3, the
// Euler-Lagrange oracle on the pinned Lagrangian for everything else.
inline void accel(const SystemSpec& spec, std::span<const double> x, std::span<const double> y,
                  std::span<double> out) {
  check_domain(spec, x, y);
  if (spec.has_force_law)
    force_law(spec, x, y, out);
  else
    euler_lagrange_accel(spec.lagrangian, x, y, out);
}

inline double total_energy(const SystemSpec& spec, std::span<const double> x,
                           std::span<const double> y) {
  check_domain(spec, x, y);
  const int d = spec.dim;
  std::vector<D2> xv(d), yv(d);
  for (int i = 0; i < d; ++i) xv[i] = D2::cst(2 * d, x[i]);
  for (int i = 0; i < d; ++i) yv[i] = D2::cst(2 * d, y[i]);
  return spec.kinetic(xv, yv).v + spec.potential(xv, yv).v;
}

inline double kinetic_value(const SystemSpec& spec, std::span<const double> x,
                            std::span<const double> y) {
  const int d = spec.dim;
  std::vector<D2> xv(d), yv(d);
  for (int i = 0; i < d; ++i) xv[i] = D2::cst(2 * d, x[i]);
  for (int i = 0; i < d; ++i) yv[i] = D2::cst(2 * d, y[i]);
  return spec.kinetic(xv, yv).v;
}

inline double potential_value(const SystemSpec& spec, std::span<const double> x,
                              std::span<const double> y) {
  const int d = spec.dim;
  std::vector<D2> xv(d), yv(d);
  for (int i = 0; i < d; ++i) xv[i] = D2::cst(2 * d, x[i]);
  for (int i = 0; i < d; ++i) yv[i] = D2::cst(2 * d, y[i]);
  return spec.potential(xv, yv).v;
}

// ---- sampling -------------------------------------------------------------------

// One uniform draw from the system's sampling box. Kepler draws |x| in
// [0.5, 2.5] with a random sign; the n-body problems reject configurations with
// pairwise separation < 0.3.
inline PhasePoint sample_point(const SystemSpec& spec, Rng& rng) {
  const int d = spec.dim;
  PhasePoint p;
  p.x.resize(d);
  p.y.resize(d);
  switch (spec.id) {
    case SystemId::kSho:
    case SystemId::kPendulum:
      p.x[0] = rng.uniform(-1.5, 1.5);
      p.y[0] = rng.uniform(-1.5, 1.5);
      break;
    case SystemId::kKepler: {
      double mag = rng.uniform(0.5, 2.5);
      p.x[0] = rng.coin() ? mag : -mag;
      p.y[0] = rng.uniform(-1.5, 1.5);
      break;
    }
    case SystemId::kRelativistic:
    case SystemId::kSyntheticAlpha:
    case SystemId::kSyntheticBeta:
      p.x[0] = rng.uniform(-1.5, 1.5);
      p.y[0] = rng.uniform(-0.9, 0.9);
      break;
    case SystemId::kDoublePendulum:
    case SystemId::kSphericalPendulum:
      for (int i = 0; i < d; ++i) p.x[i] = rng.uniform(-1.2, 1.2);
      for (int i = 0; i < d; ++i) p.y[i] = rng.uniform(-1.0, 1.0);
      break;
    case SystemId::kTwoBody:
    case SystemId::kThreeBody: {
      const int nb = d / 2;
      for (bool ok = false; !ok;) {
        for (int i = 0; i < d; ++i) p.x[i] = rng.uniform(-1.5, 1.5);
        ok = true;
        for (int i = 0; i < nb && ok; ++i)
          for (int j = i + 1; j < nb && ok; ++j) {
            double dx = p.x[2 * i] - p.x[2 * j];
            double dy = p.x[2 * i + 1] - p.x[2 * j + 1];
            if (std::sqrt(dx * dx + dy * dy) < 0.3) ok = false;
          }
      }
      for (int i = 0; i < d; ++i) p.y[i] = rng.uniform(-0.5, 0.5);
      break;
    }
  }
  return p;
}

inline Batch sample_batch(const SystemSpec& spec, int n, Rng& rng) {
  const int d = spec.dim;
  Batch b;
  b.d = d;
  b.n = n;
  b.x.resize(static_cast<size_t>(d) * n);
  b.y.resize(static_cast<size_t>(d) * n);
  b.ydot.resize(static_cast<size_t>(d) * n);
  std::vector<double> a(d);
  for (int i = 0; i < n; ++i) {
    PhasePoint p = sample_point(spec, rng);
    accel(spec, p.x, p.y, a);
    for (int k = 0; k < d; ++k) {
      b.x[static_cast<size_t>(k) * n + i] = p.x[k];
      b.y[static_cast<size_t>(k) * n + i] = p.y[k];
      b.ydot[static_cast<size_t>(k) * n + i] = a[k];
    }
  }
  return b;
}

}  // namespace mass
