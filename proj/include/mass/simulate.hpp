#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mass/physics.hpp"

// Fixed-step RK4 rollout of xdot = y, ydot = field(x, y), with optional energy
// accounting against a SystemSpec.

namespace mass {

using AccelField =
    std::function<void(std::span<const double> x, std::span<const double> y, std::span<double>)>;

struct Trajectory {
  int d = 0;
  double dt = 0.0;
  std::vector<double> times;    // steps+1
  std::vector<double> states;   // (steps+1) x 2d, row-major (x..., y...)
  std::vector<double> energies; // steps+1 when a spec is supplied
  int blowup_index = -1;        // first non-finite step, -1 if none

  std::span<const double> state(int i) const {
    return {states.data() + static_cast<size_t>(i) * 2 * d, static_cast<size_t>(2 * d)};
  }
  int steps() const { return static_cast<int>(times.size()) - 1; }
};

inline Trajectory rk4_rollout(const AccelField& field, const PhasePoint& start, double dt,
                              int steps, const SystemSpec* spec = nullptr) {
  if (dt <= 0.0) throw std::invalid_argument("dt must be positive");
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  const int d = static_cast<int>(start.x.size());
  Trajectory traj;
  traj.d = d;
  traj.dt = dt;

  std::vector<double> s(2 * d);
  std::copy(start.x.begin(), start.x.end(), s.begin());
  std::copy(start.y.begin(), start.y.end(), s.begin() + d);

  std::vector<double> k1(2 * d), k2(2 * d), k3(2 * d), k4(2 * d), tmp(2 * d);
  auto deriv = [&](const std::vector<double>& st, std::vector<double>& out) {
    std::span<const double> x(st.data(), d), y(st.data() + d, d);
    for (int i = 0; i < d; ++i) out[i] = y[i];
    field(x, y, std::span<double>(out.data() + d, d));
  };
  auto push = [&](int i) {
    traj.times.push_back(i * dt);
    traj.states.insert(traj.states.end(), s.begin(), s.end());
    if (spec) {
      std::span<const double> x(s.data(), d), y(s.data() + d, d);
      traj.energies.push_back(total_energy(*spec, x, y));
    }
  };

  push(0);
  for (int i = 0; i < steps; ++i) {
    deriv(s, k1);
    for (int j = 0; j < 2 * d; ++j) tmp[j] = s[j] + 0.5 * dt * k1[j];
    deriv(tmp, k2);
    for (int j = 0; j < 2 * d; ++j) tmp[j] = s[j] + 0.5 * dt * k2[j];
    deriv(tmp, k3);
    for (int j = 0; j < 2 * d; ++j) tmp[j] = s[j] + dt * k3[j];
    deriv(tmp, k4);
    bool finite = true;
    for (int j = 0; j < 2 * d; ++j) {
      s[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
      finite = finite && std::isfinite(s[j]);
    }
    if (!finite) {
      traj.blowup_index = i + 1;
      break;
    }
    push(i + 1);
  }
  return traj;
}

inline Trajectory rk4_rollout(const SystemSpec& spec, const PhasePoint& start, double dt,
                              int steps) {
  AccelField f = [&spec](std::span<const double> x, std::span<const double> y,
                         std::span<double> out) { accel(spec, x, y, out); };
  return rk4_rollout(f, start, dt, steps, &spec);
}

// Mean over consecutive windows of |E(t + window) - E(t)| / |E(0)|. Falls back
// to absolute drift when E(0) == 0 (flagged through `relative`).
inline double energy_drift(const Trajectory& traj, int window = 100, bool* relative = nullptr) {
  const auto& e = traj.energies;
  double e0 = std::fabs(e.empty() ? 0.0 : e[0]);
  bool rel = e0 != 0.0;
  if (relative) *relative = rel;
  double scale = rel ? e0 : 1.0;
  double acc = 0.0;
  int count = 0;
  for (size_t t = 0; t + window < e.size(); t += window) {
    acc += std::fabs(e[t + window] - e[t]) / scale;
    ++count;
  }
  return count == 0 ? 0.0 : acc / count;
}

}  // namespace mass
