#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mass/linalg.hpp"
#include "mass/rng.hpp"

// Interpretability battery core: significant-term census, correlation
// clustering, PCA agreement, Hamiltonian/Lagrangian classification, reference
// fits and the constrained two-term distillation. Everything here works on
// plain matrices; run-level wrappers that read persisted records live in
// report.hpp.

namespace mass {

struct ZeroVector : std::runtime_error {
  ZeroVector() : std::runtime_error("significant_count of an all-zero vector") {}
};

struct DegenerateRun : std::runtime_error {
  explicit DegenerateRun(const std::string& w) : std::runtime_error(w) {}
};

// ---- significant terms -----------------------------------------------------

// Smallest k such that the k largest |v_i| reach fraction * sum|v|; ties break
// toward the lower index.
inline int significant_count(std::span<const double> v, double fraction) {
  if (fraction <= 0.0 || fraction > 1.0) throw std::invalid_argument("fraction in (0,1]");
  double total = 0.0;
  for (double x : v) total += std::fabs(x);
  if (total == 0.0) throw ZeroVector();
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    double fa = std::fabs(v[a]), fb = std::fabs(v[b]);
    if (fa != fb) return fa > fb;
    return a < b;
  });
  double target = fraction * total, cum = 0.0;
  for (size_t k = 0; k < idx.size(); ++k) {
    cum += std::fabs(v[idx[k]]);
    if (cum >= target) return static_cast<int>(k + 1);
  }
  return static_cast<int>(v.size());
}

// indices of the significant set itself, magnitude-descending
inline std::vector<int> significant_indices(std::span<const double> v, double fraction) {
  int k = significant_count(v, fraction);
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    double fa = std::fabs(v[a]), fb = std::fabs(v[b]);
    if (fa != fb) return fa > fb;
    return a < b;
  });
  idx.resize(k);
  return idx;
}

// ---- activation matrices ------------------------------------------------------

// B x T view of one run's final-layer activations on the frozen evaluation
// batch. For d > 1 the per-term vectors are collapsed to Euclidean norms.
struct ActivationMatrix {
  int b = 0;
  int t = 0;
  std::vector<double> values;    // b-major, b x t
  std::vector<double> sample_x;  // d x b, coordinate-major
  std::vector<double> sample_y;
  int d = 1;

  double at(int row, int col) const { return values[static_cast<size_t>(row) * t + col]; }
  std::vector<double> column(int col) const {
    std::vector<double> out(b);
    for (int r = 0; r < b; ++r) out[r] = at(r, col);
    return out;
  }
  std::vector<double> mean_abs_per_term() const {
    std::vector<double> m(t, 0.0);
    for (int r = 0; r < b; ++r)
      for (int c = 0; c < t; ++c) m[c] += std::fabs(at(r, c));
    for (double& x : m) x /= b;
    return m;
  }
};

// raw dump layout is [sample][term][component]
inline ActivationMatrix make_activation_matrix(std::span<const double> dump, int b, int t, int d) {
  ActivationMatrix m;
  m.b = b;
  m.t = t;
  m.d = d;
  m.values.resize(static_cast<size_t>(b) * t);
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < t; ++c) {
      const double* comp = dump.data() + (static_cast<size_t>(r) * t + c) * d;
      if (d == 1) {
        m.values[static_cast<size_t>(r) * t + c] = comp[0];
      } else {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += comp[k] * comp[k];
        m.values[static_cast<size_t>(r) * t + c] = std::sqrt(s);
      }
    }
  return m;
}

// ---- correlation clustering -----------------------------------------------------

struct ClusterResult {
  std::vector<int> kept;         // significant column indices (catalog order ids)
  std::vector<int> ordering;     // leaf order after clustering, indices into kept
  std::vector<double> corr;      // reordered correlation matrix, k x k
  std::vector<int> constant_columns;  // kept-indices whose correlations were zeroed
  int k = 0;
};

// Pearson correlations of the significant columns, ordered by average-linkage
// agglomerative clustering on 1 - |rho|. Constant columns correlate as 0 and
// are reported rather than dropped.
inline ClusterResult correlation_cluster(const ActivationMatrix& acts, double fraction = 0.99) {
  ClusterResult res;
  std::vector<double> mean_abs = acts.mean_abs_per_term();
  res.kept = significant_indices(mean_abs, fraction);
  const int k = static_cast<int>(res.kept.size());
  if (k < 2) throw std::invalid_argument("need at least 2 significant columns to cluster");
  res.k = k;

  std::vector<std::vector<double>> cols(k);
  std::vector<bool> constant(k, false);
  for (int i = 0; i < k; ++i) {
    cols[i] = acts.column(res.kept[i]);
    double mn = cols[i][0], mx = cols[i][0];
    for (double v : cols[i]) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    if (mx - mn == 0.0) {
      constant[i] = true;
      res.constant_columns.push_back(i);
    }
  }
  std::vector<double> rho(static_cast<size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i) {
    rho[i * k + i] = 1.0;
    for (int j = i + 1; j < k; ++j) {
      double r = (constant[i] || constant[j])
                     ? 0.0
                     : pearson(cols[i].data(), cols[j].data(), acts.b);
      rho[i * k + j] = rho[j * k + i] = r;
    }
  }

  // average-linkage agglomeration on 1 - |rho|; ties merge the smallest pair
  struct Cluster {
    std::vector<int> leaves;
    int size;
  };
  std::vector<Cluster> clusters(k);
  std::vector<double> dist(static_cast<size_t>(k) * k, 0.0);
  std::vector<bool> alive(k, true);
  for (int i = 0; i < k; ++i) clusters[i] = {{i}, 1};
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) dist[i * k + j] = 1.0 - std::fabs(rho[i * k + j]);

  for (int merges = 0; merges < k - 1; ++merges) {
    int bi = -1, bj = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
      if (!alive[i]) continue;
      for (int j = i + 1; j < k; ++j) {
        if (!alive[j]) continue;
        if (dist[i * k + j] < best) {
          best = dist[i * k + j];
          bi = i;
          bj = j;
        }
      }
    }
    for (int x = 0; x < k; ++x) {
      if (!alive[x] || x == bi || x == bj) continue;
      dist[bi * k + x] = dist[x * k + bi] =
          (clusters[bi].size * dist[bi * k + x] + clusters[bj].size * dist[bj * k + x]) /
          (clusters[bi].size + clusters[bj].size);
    }
    clusters[bi].leaves.insert(clusters[bi].leaves.end(), clusters[bj].leaves.begin(),
                               clusters[bj].leaves.end());
    clusters[bi].size += clusters[bj].size;
    alive[bj] = false;
  }
  for (int i = 0; i < k; ++i)
    if (alive[i]) res.ordering = clusters[i].leaves;

  res.corr.resize(static_cast<size_t>(k) * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      res.corr[i * k + j] = rho[res.ordering[i] * k + res.ordering[j]];
  return res;
}

// ---- PCA agreement ------------------------------------------------------------

struct PcaResult {
  std::vector<double> explained;   // ratios, descending, sum 1
  std::vector<double> projection;  // B x 1 first-component scores
};

// PCA of the centered B x T activation matrix. The leading loading's sign is
// canonicalized on its largest-magnitude entry so that parity-flipped runs
// show up as negated projections.
inline PcaResult pca_first_component(const ActivationMatrix& acts) {
  const int b = acts.b, t = acts.t;
  std::vector<double> centered(static_cast<size_t>(b) * t);
  for (int c = 0; c < t; ++c) {
    double mean = 0.0;
    for (int r = 0; r < b; ++r) mean += acts.at(r, c);
    mean /= b;
    for (int r = 0; r < b; ++r) centered[static_cast<size_t>(r) * t + c] = acts.at(r, c) - mean;
  }
  std::vector<double> cov(static_cast<size_t>(t) * t, 0.0);
  for (int r = 0; r < b; ++r) {
    const double* row = centered.data() + static_cast<size_t>(r) * t;
    for (int i = 0; i < t; ++i)
      for (int j = i; j < t; ++j) cov[i * t + j] += row[i] * row[j];
  }
  for (int i = 0; i < t; ++i)
    for (int j = i; j < t; ++j) {
      cov[i * t + j] /= (b - 1);
      cov[j * t + i] = cov[i * t + j];
    }
  std::vector<double> lam(t), q(static_cast<size_t>(t) * t);
  jacobi_eigh(cov.data(), t, lam.data(), q.data());
  std::vector<int> order(t);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int c) { return lam[a] > lam[c]; });
  double total = 0.0;
  for (double l : lam) total += std::max(l, 0.0);
  if (total <= 0.0) throw DegenerateRun("activation matrix has rank 0");

  PcaResult res;
  res.explained.resize(t);
  for (int i = 0; i < t; ++i) res.explained[i] = std::max(lam[order[i]], 0.0) / total;

  std::vector<double> v1(t);
  for (int i = 0; i < t; ++i) v1[i] = q[i * t + order[0]];
  int argmax = 0;
  for (int i = 1; i < t; ++i)
    if (std::fabs(v1[i]) > std::fabs(v1[argmax])) argmax = i;
  if (v1[argmax] < 0)
    for (double& x : v1) x = -x;
  res.projection.resize(b);
  for (int r = 0; r < b; ++r) {
    double s = 0.0;
    for (int i = 0; i < t; ++i) s += centered[static_cast<size_t>(r) * t + i] * v1[i];
    res.projection[r] = s;
  }
  return res;
}

struct PcaAgreement {
  std::vector<double> explained_first;  // per run
  std::vector<double> cross_corr;       // runs x runs Pearson of projections
  std::vector<int> excluded;            // degenerate run indices
  int runs = 0;
};

inline PcaAgreement pca_agreement(std::span<const ActivationMatrix> runs) {
  if (!runs.empty()) {
    for (const auto& r : runs)
      if (r.sample_x != runs[0].sample_x || r.sample_y != runs[0].sample_y)
        throw std::invalid_argument("pca_agreement requires one frozen evaluation batch");
  }
  PcaAgreement agg;
  std::vector<PcaResult> results;
  std::vector<int> live;
  for (size_t i = 0; i < runs.size(); ++i) {
    try {
      results.push_back(pca_first_component(runs[i]));
      live.push_back(static_cast<int>(i));
    } catch (const DegenerateRun&) {
      agg.excluded.push_back(static_cast<int>(i));
    }
  }
  const int n = static_cast<int>(live.size());
  agg.runs = n;
  agg.explained_first.resize(n);
  agg.cross_corr.assign(static_cast<size_t>(n) * n, 1.0);
  for (int i = 0; i < n; ++i) agg.explained_first[i] = results[i].explained.empty() ? 0 : results[i].explained[0];
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double r = pearson(results[i].projection.data(), results[j].projection.data(),
                         static_cast<int>(results[i].projection.size()));
      agg.cross_corr[i * n + j] = agg.cross_corr[j * n + i] = r;
    }
  return agg;
}

// ---- theory classification ----------------------------------------------------

struct TheoryFit {
  enum class Label { kHamiltonian, kLagrangian, kDegenerate };
  double c0 = 0, c1 = 0, c2 = 0;
  Label label = Label::kDegenerate;
  double r2 = 0;
};

// least squares of S on [1, T, V]; Lagrangian iff c1 and c2 have opposite sign
inline TheoryFit classify_theory_values(std::span<const double> s, std::span<const double> t,
                                        std::span<const double> v) {
  const int n = static_cast<int>(s.size());
  TheoryFit fit;
  std::vector<double> x(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i) {
    x[i * 3 + 0] = 1.0;
    x[i * 3 + 1] = t[i];
    x[i * 3 + 2] = v[i];
  }
  std::vector<double> beta;
  try {
    beta = lstsq(x.data(), n, 3, s.data());
  } catch (const SingularFit&) {
    return fit;  // collinear T, V
  }
  fit.c0 = beta[0];
  fit.c1 = beta[1];
  fit.c2 = beta[2];
  std::vector<double> pred(n);
  for (int i = 0; i < n; ++i) pred[i] = beta[0] + beta[1] * t[i] + beta[2] * v[i];
  fit.r2 = r_squared(pred.data(), s.data(), n);
  double prod = fit.c1 * fit.c2;
  fit.label = prod < 0   ? TheoryFit::Label::kLagrangian
              : prod > 0 ? TheoryFit::Label::kHamiltonian
                         : TheoryFit::Label::kDegenerate;
  return fit;
}

// ---- linear reference fits ---------------------------------------------------------

// deterministic 80/20 row split
inline void split_rows(int n, uint64_t split_seed, std::vector<int>& train, std::vector<int>& test,
                       double train_fraction = 0.8) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(split_seed);
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.index(i + 1)]);
  int cut = static_cast<int>(std::lround(train_fraction * n));
  train.assign(idx.begin(), idx.begin() + cut);
  test.assign(idx.begin() + cut, idx.end());
}

// OLS of target on the given columns with an 80/20 holdout; returns held-out
// R^2. Rows of `x` are samples (row-major, n x cols).
inline double linear_fit_r2(std::span<const double> x, int n, int cols,
                            std::span<const double> target, uint64_t split_seed) {
  std::vector<int> train, test;
  split_rows(n, split_seed, train, test);
  std::vector<double> xt(train.size() * cols), yt(train.size());
  for (size_t r = 0; r < train.size(); ++r) {
    std::copy_n(x.data() + static_cast<size_t>(train[r]) * cols, cols, xt.data() + r * cols);
    yt[r] = target[train[r]];
  }
  double ridge = 0.0;
  for (size_t r = 0; r < train.size(); ++r)
    for (int c = 0; c < cols; ++c) ridge += xt[r * cols + c] * xt[r * cols + c];
  ridge = 1e-12 * ridge / cols;
  std::vector<double> beta = lstsq(xt.data(), static_cast<int>(train.size()), cols, yt.data(), ridge);
  std::vector<double> pred(test.size()), want(test.size());
  for (size_t r = 0; r < test.size(); ++r) {
    const double* row = x.data() + static_cast<size_t>(test[r]) * cols;
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += row[c] * beta[c];
    pred[r] = acc;
    want[r] = target[test[r]];
  }
  return r_squared(pred.data(), want.data(), static_cast<int>(test.size()));
}

// ---- constrained two-term distillation -----------------------------------------

struct DistillResult {
  std::vector<double> c;  // length T
  std::vector<double> d;  // 1 - c, exactly
  double r2_train = 0;
  double r2_test = 0;
};

// min E[(u_hat - u)^2 + (v_hat - v)^2] with u_hat = A c, v_hat = A d and
// c_j + d_j = 1. Substituting d = 1 - c leaves ordinary least squares of the
// stacked system [A; A] c ~ [u; s - v] with s the row sums of A.
// acts is the raw dump [sample][term][component]; u, v are sample x component.
inline DistillResult distill_constrained(std::span<const double> acts, int b, int t, int d,
                                         std::span<const double> u, std::span<const double> v,
                                         uint64_t split_seed) {
  const int rows = b * d;
  std::vector<double> a(static_cast<size_t>(rows) * t);
  std::vector<double> su(static_cast<size_t>(rows)), sv(rows), rowsum(rows, 0.0);
  for (int s = 0; s < b; ++s)
    for (int k = 0; k < d; ++k) {
      int r = s * d + k;
      for (int i = 0; i < t; ++i) {
        double val = acts[(static_cast<size_t>(s) * t + i) * d + k];
        a[static_cast<size_t>(r) * t + i] = val;
        rowsum[r] += val;
      }
      su[r] = u[static_cast<size_t>(s) * d + k];
      sv[r] = v[static_cast<size_t>(s) * d + k];
    }

  // split on samples so all components of one sample stay together
  std::vector<int> train_s, test_s;
  split_rows(b, split_seed, train_s, test_s);
  auto expand = [&](const std::vector<int>& samples) {
    std::vector<int> rws;
    for (int s : samples)
      for (int k = 0; k < d; ++k) rws.push_back(s * d + k);
    return rws;
  };
  std::vector<int> train = expand(train_s), test = expand(test_s);

  // stacked normal equations on the training rows
  std::vector<double> xs(2 * train.size() * t), ys(2 * train.size());
  for (size_t r = 0; r < train.size(); ++r) {
    const double* row = a.data() + static_cast<size_t>(train[r]) * t;
    std::copy_n(row, t, xs.data() + r * t);
    std::copy_n(row, t, xs.data() + (train.size() + r) * t);
    ys[r] = su[train[r]];
    ys[train.size() + r] = rowsum[train[r]] - sv[train[r]];
  }
  DistillResult res;
  res.c = lstsq(xs.data(), static_cast<int>(2 * train.size()), t, ys.data(), 1e-10);
  res.d.resize(t);
  for (int i = 0; i < t; ++i) res.d[i] = 1.0 - res.c[i];

  auto joint_r2 = [&](const std::vector<int>& rws) {
    std::vector<double> pu(rws.size()), pv(rws.size()), tu(rws.size()), tv(rws.size());
    for (size_t r = 0; r < rws.size(); ++r) {
      const double* row = a.data() + static_cast<size_t>(rws[r]) * t;
      double uhat = 0.0;
      for (int i = 0; i < t; ++i) uhat += row[i] * res.c[i];
      pu[r] = uhat;
      pv[r] = rowsum[rws[r]] - uhat;
      tu[r] = su[rws[r]];
      tv[r] = sv[rws[r]];
    }
    double mu = 0, mv = 0;
    for (size_t r = 0; r < rws.size(); ++r) {
      mu += tu[r];
      mv += tv[r];
    }
    mu /= rws.size();
    mv /= rws.size();
    double ss_res = 0, ss_tot = 0;
    for (size_t r = 0; r < rws.size(); ++r) {
      ss_res += (pu[r] - tu[r]) * (pu[r] - tu[r]) + (pv[r] - tv[r]) * (pv[r] - tv[r]);
      ss_tot += (tu[r] - mu) * (tu[r] - mu) + (tv[r] - mv) * (tv[r] - mv);
    }
    return ss_tot == 0.0 ? (ss_res == 0.0 ? 1.0 : -1e18) : 1.0 - ss_res / ss_tot;
  };
  res.r2_train = joint_r2(train);
  res.r2_test = joint_r2(test);
  return res;
}

// ---- activation strips -----------------------------------------------------------

// mean |a_i| per term per run, each row scaled to max 1
inline std::vector<double> activation_strip(std::span<const ActivationMatrix> runs) {
  if (runs.size() < 2) throw std::invalid_argument("activation_strip needs at least 2 runs");
  const int t = runs[0].t;
  std::vector<double> strip(runs.size() * static_cast<size_t>(t));
  for (size_t s = 0; s < runs.size(); ++s) {
    std::vector<double> m = runs[s].mean_abs_per_term();
    double mx = 0.0;
    for (double x : m) mx = std::max(mx, x);
    for (int i = 0; i < t; ++i) strip[s * t + i] = mx > 0 ? m[i] / mx : 0.0;
  }
  return strip;
}

}  // namespace mass
