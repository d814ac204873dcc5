#include <catch2/catch_amalgamated.hpp>

#include "mass/physics.hpp"
#include "mass/simulate.hpp"

using namespace mass;

namespace {

ScalarForm scaled(const ScalarForm& f, double c) {
  return [f, c](std::span<const D2> x, std::span<const D2> y) { return f(x, y) * c; };
}

double accel1(const SystemSpec& spec, double x, double y) {
  double out[1];
  accel(spec, std::vector<double>{x}, std::vector<double>{y}, std::span<double>(out, 1));
  return out[0];
}

}  // namespace

TEST_CASE("euler-lagrange hand examples", "[physics]") {
  double out[1];
  // L = y^2/2 - x^2/2 at (0.5, 0.7) -> ydot = -0.5
  ScalarForm sho = [](std::span<const D2> x, std::span<const D2> y) {
    return 0.5 * sq(y[0]) - 0.5 * sq(x[0]);
  };
  euler_lagrange_accel(sho, std::vector<double>{0.5}, std::vector<double>{0.7},
                       std::span<double>(out, 1));
  REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(-0.5, 1e-12));

  // pendulum at x = pi -> -sin(pi) = 0
  ScalarForm pend = [](std::span<const D2> x, std::span<const D2> y) {
    return 0.5 * sq(y[0]) - (1.0 - cos(x[0]));
  };
  euler_lagrange_accel(pend, std::vector<double>{M_PI}, std::vector<double>{0.3},
                       std::span<double>(out, 1));
  REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(0.0, 1e-12));

  // relativistic oscillator: ydot = -x (1 - y^2)^{3/2}; at (1, 0) -> -1
  euler_lagrange_accel(forms::rel_L, std::vector<double>{1.0}, std::vector<double>{0.0},
                       std::span<double>(out, 1));
  REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(-1.0, 1e-10));
}

TEST_CASE("gauge invariance of the euler-lagrange oracle", "[physics]") {
  Rng rng(41);
  const SystemSpec& dp = system_spec(SystemId::kDoublePendulum);
  for (int trial = 0; trial < 40; ++trial) {
    // random point in the double pendulum domain
    std::vector<double> x = {rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
    std::vector<double> y = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double a0[2], a1[2], a2[2];
    euler_lagrange_accel(dp.lagrangian, x, y, a0);

    euler_lagrange_accel(scaled(dp.lagrangian, 2.7), x, y, a1);
    for (int k = 0; k < 2; ++k) REQUIRE_THAT(a1[k], Catch::Matchers::WithinAbs(a0[k], 1e-8));

    // total time derivative gauge: L + d/dt f(x) = L + (df/dx) . y
    ScalarForm gauged = [&dp](std::span<const D2> x_, std::span<const D2> y_) {
      D2 f = sin(x_[0]) * cos(x_[1]) + 0.5 * sq(x_[0]);
      D2 total = dp.lagrangian(x_, y_);
      // (df/dx) . y expressed through fresh jets of f's partials
      D2 dfdx0 = cos(x_[0]) * cos(x_[1]) + x_[0];
      D2 dfdx1 = -sin(x_[0]) * sin(x_[1]);
      return total + dfdx0 * y_[0] + dfdx1 * y_[1];
      (void)f;
    };
    euler_lagrange_accel(gauged, x, y, a2);
    for (int k = 0; k < 2; ++k) REQUIRE_THAT(a2[k], Catch::Matchers::WithinAbs(a0[k], 1e-8));
  }
}

TEST_CASE("force law and lagrangian route agree on systems 1-3", "[physics]") {
  Rng rng(7);
  for (SystemId id : {SystemId::kSho, SystemId::kPendulum, SystemId::kKepler}) {
    const SystemSpec& spec = system_spec(id);
    for (int i = 0; i < 1000; ++i) {
      PhasePoint p = sample_point(spec, rng);
      double f[1], el[1];
      force_law(spec, p.x, p.y, f);
      euler_lagrange_accel(spec.lagrangian, p.x, p.y, el);
      REQUIRE_THAT(el[0], Catch::Matchers::WithinAbs(f[0], 1e-8));
    }
  }
}

TEST_CASE("acceleration spot checks", "[physics]") {
  REQUIRE(accel1(system_spec(SystemId::kSho), 1.0, 0.3) == -1.0);
  REQUIRE_THAT(accel1(system_spec(SystemId::kKepler), 2.0, 0.0),
               Catch::Matchers::WithinAbs(-0.25, 1e-14));
  // relativistic closed form -x (1-y^2)^{3/2}
  const SystemSpec& rel = system_spec(SystemId::kRelativistic);
  for (double y : {0.0, 0.3, -0.7}) {
    double expect = -0.8 * std::pow(1 - y * y, 1.5);
    REQUIRE_THAT(accel1(rel, 0.8, y), Catch::Matchers::WithinAbs(expect, 1e-10));
  }
}

TEST_CASE("alpha matches relativistic to first order at small x", "[physics]") {
  const SystemSpec& alpha = system_spec(SystemId::kSyntheticAlpha);
  const SystemSpec& rel = system_spec(SystemId::kRelativistic);
  // hand Euler-Lagrange for alpha at y = 0 gives -x / (1 + x^2/2)
  double prev = 1e9;
  for (double x : {0.4, 0.2, 0.1, 0.05}) {
    double hand = -x / (1.0 + 0.5 * x * x);
    REQUIRE_THAT(accel1(alpha, x, 0.0), Catch::Matchers::WithinAbs(hand, 1e-10));
    double err = std::fabs(accel1(alpha, x, 0.0) - accel1(rel, x, 0.0));
    REQUIRE(err < prev / 4.0);  // cubic shrinkage under halving
    prev = err;
  }
  REQUIRE(prev < 1e-4);
}

TEST_CASE("domain errors", "[physics]") {
  double out[1];
  REQUIRE_THROWS_AS(accel(system_spec(SystemId::kRelativistic), std::vector<double>{0.1},
                          std::vector<double>{1.0}, std::span<double>(out, 1)),
                    DomainError);
  REQUIRE_THROWS_AS(accel(system_spec(SystemId::kKepler), std::vector<double>{0.05},
                          std::vector<double>{0.0}, std::span<double>(out, 1)),
                    DomainError);
  // singular mass matrix: L with L_yy == 0
  ScalarForm bad = [](std::span<const D2> x, std::span<const D2> y) {
    return x[0] * y[0];  // linear in y
  };
  REQUIRE_THROWS_AS(euler_lagrange_accel(bad, std::vector<double>{1.0}, std::vector<double>{1.0},
                                         std::span<double>(out, 1)),
                    SingularMassMatrix);
}

TEST_CASE("total energy values", "[physics]") {
  REQUIRE(total_energy(system_spec(SystemId::kPendulum), std::vector<double>{0.0},
                       std::vector<double>{0.0}) == 0.0);
  REQUIRE_THAT(total_energy(system_spec(SystemId::kSho), std::vector<double>{1.0},
                            std::vector<double>{1.0}),
               Catch::Matchers::WithinAbs(1.0, 1e-15));
  REQUIRE_THAT(total_energy(system_spec(SystemId::kRelativistic), std::vector<double>{0.0},
                            std::vector<double>{0.6}),
               Catch::Matchers::WithinAbs(1.25, 1e-12));
}

TEST_CASE("energy is conserved along exact trajectories", "[physics]") {
  // systems 1-6 under dt=1e-3 for 1e4 steps; relative change < 1e-6
  for (SystemId id : {SystemId::kSho, SystemId::kPendulum, SystemId::kKepler,
                      SystemId::kRelativistic, SystemId::kSyntheticAlpha,
                      SystemId::kSyntheticBeta}) {
    const SystemSpec& spec = system_spec(id);
    PhasePoint start;
    // the 1-D Kepler run must be unbound (E > 0), otherwise it falls into the
    // softening bound; everything else oscillates
    start.x = {id == SystemId::kKepler ? 1.2 : 0.9};
    start.y = {id == SystemId::kKepler ? 1.4 : (is_relativistic_family(id) ? 0.4 : 0.5)};
    Trajectory traj = rk4_rollout(spec, start, 1e-3, 10000);
    REQUIRE(traj.blowup_index == -1);
    double e0 = traj.energies.front();
    double emax = 0;
    for (double e : traj.energies) emax = std::max(emax, std::fabs(e - e0));
    CAPTURE(spec.name);
    REQUIRE(emax / std::fabs(e0) < 1e-6);
  }
}

TEST_CASE("spherical pendulum reproduces the stated equations of motion", "[physics]") {
  const SystemSpec& sph = system_spec(SystemId::kSphericalPendulum);
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    double th = rng.uniform(0.3, 1.2), phi = rng.uniform(-1.2, 1.2);
    double thd = rng.uniform(-1, 1), phid = rng.uniform(-1, 1);
    double out[2];
    accel(sph, std::vector<double>{th, phi}, std::vector<double>{thd, phid}, out);
    double expect_th = std::sin(th) * std::cos(th) * phid * phid - std::sin(th);
    double expect_phi = -2.0 * thd * phid * std::cos(th) / std::sin(th);
    REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(expect_th, 1e-8));
    REQUIRE_THAT(out[1], Catch::Matchers::WithinAbs(expect_phi, 1e-8));
  }
  // conical equilibrium: phidot = sqrt(1 / cos(theta)) gives thetaddot = 0
  double th = 1.0;
  double out[2];
  accel(sph, std::vector<double>{th, 0.2}, std::vector<double>{0.0, std::sqrt(1.0 / std::cos(th))},
        out);
  REQUIRE(std::fabs(out[0]) < 1e-10);
}

TEST_CASE("n-body matches the brute-force pairwise law", "[physics]") {
  Rng rng(29);
  for (SystemId id : {SystemId::kTwoBody, SystemId::kThreeBody}) {
    const SystemSpec& spec = system_spec(id);
    const int nb = spec.dim / 2;
    for (int trial = 0; trial < 50; ++trial) {
      PhasePoint p = sample_point(spec, rng);
      std::vector<double> got(spec.dim);
      accel(spec, p.x, p.y, got);
      std::vector<double> expect(spec.dim, 0.0);
      for (int i = 0; i < nb; ++i)
        for (int j = 0; j < nb; ++j) {
          if (i == j) continue;
          double dx = p.x[2 * j] - p.x[2 * i], dy = p.x[2 * j + 1] - p.x[2 * i + 1];
          double r3 = std::pow(dx * dx + dy * dy, 1.5);
          expect[2 * i] += dx / r3;
          expect[2 * i + 1] += dy / r3;
        }
      for (int k = 0; k < spec.dim; ++k)
        REQUIRE_THAT(got[k], Catch::Matchers::WithinAbs(expect[k], 1e-8));
    }
  }
}

TEST_CASE("sampling is reproducible and respects conventions", "[physics]") {
  const SystemSpec& sho = system_spec(SystemId::kSho);
  Rng a(77), b(77);
  Batch ba = sample_batch(sho, 512, a);
  Batch bb = sample_batch(sho, 512, b);
  REQUIRE(ba.x == bb.x);
  REQUIRE(ba.y == bb.y);
  REQUIRE(ba.ydot == bb.ydot);
  REQUIRE(ba.n == 512);
  // xdot is the y field exactly
  REQUIRE(ba.xdot().data() == ba.y.data());

  // sample mean of x within 3 sigma of the domain midpoint
  Rng c(3);
  Batch big = sample_batch(sho, 10000, c);
  double mean = 0;
  for (int i = 0; i < big.n; ++i) mean += big.x[i];
  mean /= big.n;
  double sigma = 3.0 / std::sqrt(12.0) / std::sqrt(10000.0);
  REQUIRE(std::fabs(mean - 0.0) < 3 * sigma);

  // kepler magnitudes stay inside [0.5, 2.5]
  Rng k(5);
  Batch kb = sample_batch(system_spec(SystemId::kKepler), 2000, k);
  for (int i = 0; i < kb.n; ++i) {
    REQUIRE(std::fabs(kb.x[i]) >= 0.5);
    REQUIRE(std::fabs(kb.x[i]) <= 2.5);
  }

  // n-body separation floor
  Rng n(9);
  Batch nb = sample_batch(system_spec(SystemId::kThreeBody), 200, n);
  for (int i = 0; i < nb.n; ++i)
    for (int b1 = 0; b1 < 3; ++b1)
      for (int b2 = b1 + 1; b2 < 3; ++b2) {
        double dx = nb.x[(2 * b1) * nb.n + i] - nb.x[(2 * b2) * nb.n + i];
        double dy = nb.x[(2 * b1 + 1) * nb.n + i] - nb.x[(2 * b2 + 1) * nb.n + i];
        REQUIRE(std::sqrt(dx * dx + dy * dy) >= 0.3);
      }
}
