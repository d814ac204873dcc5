#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <vector>

// Small dense routines used by the differentiable pseudo-inverse ops and the
// analysis battery. Everything is row-major double, sized for d <= 6 in the
// hot path and <= a few hundred in analysis.

namespace mass {

struct SingularFit : std::runtime_error {
  SingularFit() : std::runtime_error("normal matrix singular beyond ridge") {}
};

// ---- symmetric eigendecomposition (cyclic Jacobi) -------------------------

// A is n x n symmetric (row-major, fully stored). On return eigval[i] holds the
// eigenvalues and eigvec column i (eigvec[r*n+i]) the matching unit eigenvector.
// Deterministic: fixed sweep order, fixed iteration cap.
inline void jacobi_eigh(const double* a, int n, double* eigval, double* eigvec,
                        double tol = 1e-14, int max_sweeps = 64) {
  std::vector<double> m(a, a + static_cast<size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) eigvec[r * n + c] = (r == c) ? 1.0 : 0.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (int r = 0; r < n; ++r)
      for (int c = r + 1; c < n; ++c) s += m[r * n + c] * m[r * n + c];
    return std::sqrt(2.0 * s);
  };
  double scale = 0.0;
  for (int i = 0; i < n * n; ++i) scale = std::max(scale, std::fabs(m[i]));
  if (scale == 0.0) {
    for (int i = 0; i < n; ++i) eigval[i] = 0.0;
    return;
  }

  for (int sweep = 0; sweep < max_sweeps && off_norm() > tol * scale * n; ++sweep) {
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = m[p * n + q];
        if (std::fabs(apq) <= tol * scale) continue;
        double app = m[p * n + p], aqq = m[q * n + q];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double mkp = m[k * n + p], mkq = m[k * n + q];
          m[k * n + p] = c * mkp - s * mkq;
          m[k * n + q] = s * mkp + c * mkq;
        }
        for (int k = 0; k < n; ++k) {
          double mpk = m[p * n + k], mqk = m[q * n + k];
          m[p * n + k] = c * mpk - s * mqk;
          m[q * n + k] = s * mpk + c * mqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = eigvec[k * n + p], vkq = eigvec[k * n + q];
          eigvec[k * n + p] = c * vkp - s * vkq;
          eigvec[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) eigval[i] = m[i * n + i];
}

// Moore-Penrose pseudo-inverse of a symmetric matrix with relative cutoff
// rcond * max|eigenvalue|. out may alias a.
inline void pinv_sym(const double* a, int n, double* out, double rcond = 1e-10) {
  std::vector<double> lam(n), q(static_cast<size_t>(n) * n);
  jacobi_eigh(a, n, lam.data(), q.data());
  double lmax = 0.0;
  for (int i = 0; i < n; ++i) lmax = std::max(lmax, std::fabs(lam[i]));
  double cut = rcond * lmax;
  std::vector<double> res(static_cast<size_t>(n) * n, 0.0);
  for (int k = 0; k < n; ++k) {
    if (std::fabs(lam[k]) <= cut) continue;
    double g = 1.0 / lam[k];
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) res[r * n + c] += g * q[r * n + k] * q[c * n + k];
  }
  std::memcpy(out, res.data(), sizeof(double) * n * n);
}

// ---- one-sided Jacobi SVD for small square matrices ------------------------

// A = U diag(sigma) V^T with sigma >= 0. All buffers n x n row-major.
inline void jacobi_svd(const double* a, int n, double* u, double* sigma, double* v,
                       double tol = 1e-14, int max_sweeps = 64) {
  std::vector<double> b(a, a + static_cast<size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) v[r * n + c] = (r == c) ? 1.0 : 0.0;

  double scale = 0.0;
  for (int i = 0; i < n * n; ++i) scale = std::max(scale, std::fabs(a[i]));
  if (scale == 0.0) scale = 1.0;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double app = 0, aqq = 0, apq = 0;
        for (int k = 0; k < n; ++k) {
          app += b[k * n + p] * b[k * n + p];
          aqq += b[k * n + q] * b[k * n + q];
          apq += b[k * n + p] * b[k * n + q];
        }
        if (std::fabs(apq) <= tol * scale * scale) continue;
        rotated = true;
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double bkp = b[k * n + p], bkq = b[k * n + q];
          b[k * n + p] = c * bkp - s * bkq;
          b[k * n + q] = s * bkp + c * bkq;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
    if (!rotated) break;
  }
  for (int j = 0; j < n; ++j) {
    double s2 = 0.0;
    for (int k = 0; k < n; ++k) s2 += b[k * n + j] * b[k * n + j];
    double s = std::sqrt(s2);
    sigma[j] = s;
    for (int k = 0; k < n; ++k) u[k * n + j] = (s > 0.0) ? b[k * n + j] / s : 0.0;
  }
}

// Moore-Penrose pseudo-inverse of a general square matrix, cutoff on singular
// values at rcond * sigma_max.
inline void pinv_gen(const double* a, int n, double* out, double rcond = 1e-10) {
  std::vector<double> u(static_cast<size_t>(n) * n), v(static_cast<size_t>(n) * n), s(n);
  jacobi_svd(a, n, u.data(), s.data(), v.data());
  double smax = 0.0;
  for (int i = 0; i < n; ++i) smax = std::max(smax, s[i]);
  double cut = rcond * smax;
  std::vector<double> res(static_cast<size_t>(n) * n, 0.0);
  for (int k = 0; k < n; ++k) {
    if (s[k] <= cut) continue;
    double g = 1.0 / s[k];
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) res[r * n + c] += g * v[r * n + k] * u[c * n + k];
  }
  std::memcpy(out, res.data(), sizeof(double) * n * n);
}

// Solve the symmetric system A x = b through the eigendecomposition, rejecting
// condition numbers above cond_limit.
inline bool solve_sym(const double* a, int n, const double* b, double* x,
                      double cond_limit = 1e12) {
  std::vector<double> lam(n), q(static_cast<size_t>(n) * n);
  jacobi_eigh(a, n, lam.data(), q.data());
  double lmax = 0.0, lmin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    lmax = std::max(lmax, std::fabs(lam[i]));
    lmin = std::min(lmin, std::fabs(lam[i]));
  }
  if (lmin == 0.0 || lmax / lmin > cond_limit) return false;
  for (int i = 0; i < n; ++i) x[i] = 0.0;
  for (int k = 0; k < n; ++k) {
    double qb = 0.0;
    for (int r = 0; r < n; ++r) qb += q[r * n + k] * b[r];
    double g = qb / lam[k];
    for (int r = 0; r < n; ++r) x[r] += g * q[r * n + k];
  }
  return true;
}

// ---- least squares ----------------------------------------------------------

// Ordinary least squares beta = argmin ||X beta - y||^2 via ridge-damped normal
// equations. X is rows x cols row-major. Throws SingularFit when the damped
// normal matrix is still numerically singular.
inline std::vector<double> lstsq(const double* x, int rows, int cols, const double* y,
                                 double ridge = 0.0) {
  std::vector<double> g(static_cast<size_t>(cols) * cols, 0.0), rhs(cols, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<size_t>(r) * cols;
    for (int i = 0; i < cols; ++i) {
      rhs[i] += xr[i] * y[r];
      for (int j = i; j < cols; ++j) g[i * cols + j] += xr[i] * xr[j];
    }
  }
  for (int i = 0; i < cols; ++i) {
    g[i * cols + i] += ridge;
    for (int j = 0; j < i; ++j) g[i * cols + j] = g[j * cols + i];
  }
  std::vector<double> lam(cols), q(static_cast<size_t>(cols) * cols);
  jacobi_eigh(g.data(), cols, lam.data(), q.data());
  double lmax = 0.0;
  for (int i = 0; i < cols; ++i) lmax = std::max(lmax, std::fabs(lam[i]));
  if (lmax == 0.0) throw SingularFit();
  std::vector<double> beta(cols, 0.0);
  for (int k = 0; k < cols; ++k) {
    if (std::fabs(lam[k]) <= 1e-14 * lmax) {
      if (ridge == 0.0) throw SingularFit();
      continue;
    }
    double qb = 0.0;
    for (int r = 0; r < cols; ++r) qb += q[r * cols + k] * rhs[r];
    double f = qb / lam[k];
    for (int r = 0; r < cols; ++r) beta[r] += f * q[r * cols + k];
  }
  return beta;
}

// R^2 of predictions against targets: 1 - SS_res / SS_tot (SS_tot centered).
inline double r_squared(const double* pred, const double* target, int n) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += target[i];
  mean /= n;
  double ss_res = 0.0, ss_tot = 0.0;
  for (int i = 0; i < n; ++i) {
    double e = target[i] - pred[i];
    double t = target[i] - mean;
    ss_res += e * e;
    ss_tot += t * t;
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - ss_res / ss_tot;
}

// Pearson correlation; returns 0 for constant inputs (flagged by caller).
inline double pearson(const double* a, const double* b, int n) {
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mass
