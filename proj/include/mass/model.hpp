#pragma once

#include <span>
#include <string>
#include <vector>

#include "mass/jet.hpp"
#include "mass/linalg.hpp"
#include "mass/physics.hpp"
#include "mass/rng.hpp"
#include "mass/sha256.hpp"
#include "mass/tape.hpp"

// The model: one scalar MLP per system over augmented inputs, the fixed
// ordered bank of T=172 derivative terms, stabilized pseudo-inverses, and the
// shared final linear layer that predicts xdot and ydot.

namespace mass {

// ---- input augmentation ----------------------------------------------------

// (x, y, x*x, y*y, x*y) with elementwise products; length 5d
inline std::vector<double> augment(std::span<const double> x, std::span<const double> y) {
  const int d = static_cast<int>(x.size());
  std::vector<double> u(5 * d);
  for (int k = 0; k < d; ++k) {
    u[k] = x[k];
    u[d + k] = y[k];
    u[2 * d + k] = x[k] * x[k];
    u[3 * d + k] = y[k] * y[k];
    u[4 * d + k] = x[k] * y[k];
  }
  return u;
}

// Jet version: seeds for the 2d raw inputs plus the squared/cross channels,
// built so the bank's derivatives are taken with respect to (x, y) only.
inline std::vector<JetNodes> augment_jets(Tape& t, std::span<const NodeId> x_ids,
                                          std::span<const NodeId> y_ids, NodeId one) {
  const int d = static_cast<int>(x_ids.size());
  const int m = 2 * d;
  std::vector<JetNodes> jets;
  jets.reserve(5 * d);
  std::vector<JetNodes> jx(d), jy(d);
  for (int k = 0; k < d; ++k) jx[k] = jet_var(t, m, k, x_ids[k], one);
  for (int k = 0; k < d; ++k) jy[k] = jet_var(t, m, d + k, y_ids[k], one);
  for (int k = 0; k < d; ++k) jets.push_back(jx[k]);
  for (int k = 0; k < d; ++k) jets.push_back(jy[k]);
  for (int k = 0; k < d; ++k) jets.push_back(jet_mul(t, jx[k], jx[k]));
  for (int k = 0; k < d; ++k) jets.push_back(jet_mul(t, jy[k], jy[k]));
  for (int k = 0; k < d; ++k) jets.push_back(jet_mul(t, jx[k], jy[k]));
  return jets;
}

// ---- scalar network ----------------------------------------------------------

struct NetShape {
  int dim = 1;
  int hidden = 4;
  int width = 20;

  int input() const { return 5 * dim; }

  int param_count() const {
    int in = input(), n = 0;
    for (int l = 0; l < hidden; ++l) {
      n += width * in + width;
      in = width;
    }
    return n + in + 1;  // output row + bias
  }

  // offsets of layer l's weight block and bias block within the net's params
  int weight_ofs(int l) const {
    int in = input(), ofs = 0;
    for (int i = 0; i < l; ++i) {
      ofs += width * in + width;
      in = width;
    }
    return ofs;
  }
  int bias_ofs(int l) const {
    int in = (l == 0) ? input() : width;
    int out = (l == hidden) ? 1 : width;
    return weight_ofs(l) + out * in;
  }
  int layer_in(int l) const { return l == 0 ? input() : width; }
  int layer_out(int l) const { return l == hidden ? 1 : width; }
};

// fan-in scaled uniform init for both weights and biases
inline void init_net_params(const NetShape& shape, std::span<double> params, Rng& rng) {
  for (int l = 0; l <= shape.hidden; ++l) {
    int in = shape.layer_in(l), out = shape.layer_out(l);
    double s = 1.0 / std::sqrt(static_cast<double>(in));
    double* w = params.data() + shape.weight_ofs(l);
    for (int i = 0; i < out * in; ++i) w[i] = rng.uniform(-s, s);
    double* b = params.data() + shape.bias_ofs(l);
    for (int i = 0; i < out; ++i) b[i] = rng.uniform(-s, s);
  }
}

// Forward through the softplus MLP with full second-order jets. `param_base`
// is the tape id of the net's first parameter leaf. Throws NonFiniteValue with
// the offending layer index when requested.
inline JetNodes eval_net_jet(Tape& t, const NetShape& shape, NodeId param_base,
                             std::span<const JetNodes> inputs, bool check_finite = true) {
  const int m = inputs.empty() ? 0 : inputs[0].m;
  const int tri_n = m * (m + 1) / 2;
  std::vector<JetNodes> cur(inputs.begin(), inputs.end());
  std::vector<JetNodes> next;
  std::vector<NodeId> ins;

  for (int l = 0; l <= shape.hidden; ++l) {
    const int n_in = shape.layer_in(l), n_out = shape.layer_out(l);
    const NodeId w_base = param_base + shape.weight_ofs(l);
    const NodeId b_base = param_base + shape.bias_ofs(l);
    next.assign(n_out, JetNodes::zero(m));

    // one dense op per jet coefficient; a coefficient that is structurally
    // zero in every input stays structurally zero
    auto layer_coeff = [&](auto pick, NodeId bias) -> NodeId {
      ins.resize(n_in);
      bool any = false;
      for (int i = 0; i < n_in; ++i) {
        ins[i] = pick(cur[i]);
        any = any || ins[i] != kNoNode;
      }
      if (!any && bias == kNoNode) return kNoNode;
      return t.dense(w_base, bias, n_out, ins);
    };

    NodeId val0 = layer_coeff([](const JetNodes& j) { return j.val; }, b_base);
    for (int u = 0; u < n_out; ++u) next[u].val = val0 + u;
    for (int gi = 0; gi < m; ++gi) {
      NodeId g0 = layer_coeff([gi](const JetNodes& j) { return j.g[gi]; }, kNoNode);
      if (g0 != kNoNode)
        for (int u = 0; u < n_out; ++u) next[u].g[gi] = g0 + u;
    }
    for (int hi = 0; hi < tri_n; ++hi) {
      NodeId h0 = layer_coeff([hi](const JetNodes& j) { return j.h[hi]; }, kNoNode);
      if (h0 != kNoNode)
        for (int u = 0; u < n_out; ++u) next[u].h[hi] = h0 + u;
    }
    if (check_finite)
      for (int u = 0; u < n_out; ++u)
        if (!t.all_finite(next[u].val)) throw NonFiniteValue(l);
    if (l == shape.hidden) {
      if (check_finite) {
        const JetNodes& out = next[0];
        bool ok = t.all_finite(out.val);
        for (int i = 0; i < m && ok; ++i)
          if (out.g[i] != kNoNode) ok = t.all_finite(out.g[i]);
        for (int i = 0; i < tri_n && ok; ++i)
          if (out.h[i] != kNoNode) ok = t.all_finite(out.h[i]);
        if (!ok) throw NonFiniteValue(shape.hidden);
      }
      return next[0];
    }
    cur.resize(n_out);
    for (int u = 0; u < n_out; ++u) {
      // fused softplus over the whole jet; coefficients come back dense
      std::vector<NodeId> packed(1 + m + tri_n);
      packed[0] = next[u].val;
      for (int i = 0; i < m; ++i) packed[1 + i] = next[u].g[i];
      for (int i = 0; i < tri_n; ++i) packed[1 + m + i] = next[u].h[i];
      NodeId first = t.softplus_jet(packed, m);
      JetNodes act = JetNodes::zero(m);
      act.val = first;
      for (int i = 0; i < m; ++i) act.g[i] = first + 1 + i;
      for (int i = 0; i < tri_n; ++i) act.h[i] = first + 1 + m + i;
      cur[u] = act;
    }
  }
  return cur[0];  // unreachable
}

// Plain value-only forward; same accumulation order as the jet path.
inline double net_value(const NetShape& shape, std::span<const double> net_params,
                        std::span<const double> x, std::span<const double> y) {
  std::vector<double> cur = augment(x, y);
  std::vector<double> next;
  for (int l = 0; l <= shape.hidden; ++l) {
    const int n_in = shape.layer_in(l), n_out = shape.layer_out(l);
    const double* w = net_params.data() + shape.weight_ofs(l);
    const double* b = net_params.data() + shape.bias_ofs(l);
    next.assign(n_out, 0.0);
    for (int u = 0; u < n_out; ++u) {
      double acc = b[u];
      for (int i = 0; i < n_in; ++i) acc += w[u * n_in + i] * cur[i];
      next[u] = acc;
    }
    if (l == shape.hidden) return next[0];
    cur.resize(n_out);
    for (int u = 0; u < n_out; ++u)
      cur[u] = next[u] > 0.0 ? next[u] + std::log1p(std::exp(-next[u]))
                             : std::log1p(std::exp(next[u]));
  }
  return 0.0;  // unreachable
}

// ---- stabilized pseudo-inverse (numeric) ----------------------------------------

inline constexpr double kPinvRcond = 1e-10;

// pinv(M + b*I) of a symmetric d x d block through the eigendecomposition with
// relative cutoff 1e-10 * max|eigenvalue|.
inline void stabilized_pinv(const double* m, int d, double b, double* out) {
  std::vector<double> a(m, m + static_cast<size_t>(d) * d);
  for (int i = 0; i < d; ++i) a[i * d + i] += b;
  pinv_sym(a.data(), d, out, kPinvRcond);
}

// general-matrix variant for the cross block when d > 1
inline void stabilized_pinv_general(const double* m, int d, double b, double* out) {
  std::vector<double> a(m, m + static_cast<size_t>(d) * d);
  for (int i = 0; i < d; ++i) a[i * d + i] += b;
  pinv_gen(a.data(), d, out, kPinvRcond);
}

// ---- term catalog ---------------------------------------------------------------

inline constexpr int kNumVectors = 4;   // x, y, Sx, Sy
inline constexpr int kNumMatrices = 6;  // Sxx, Syy, Sxy, and their pinvs
inline constexpr int kTermCount = kNumVectors + kNumMatrices * kNumVectors +
                                  kNumMatrices * kNumMatrices * kNumVectors;  // 172

struct TermDescriptor {
  int type;  // 1, 2 or 3
  int m1 = -1;
  int m2 = -1;
  int v = -1;
};

// Fixed lexicographic ordering: type 1 over V, type 2 over A x V, type 3 over
// A x A x V. Identical for every dimension and persisted with every run.
struct TermCatalog {
  std::vector<TermDescriptor> entries;

  static const TermCatalog& standard() {
    static const TermCatalog cat = [] {
      TermCatalog c;
      c.entries.reserve(kTermCount);
      for (int v = 0; v < kNumVectors; ++v) c.entries.push_back({1, -1, -1, v});
      for (int a = 0; a < kNumMatrices; ++a)
        for (int v = 0; v < kNumVectors; ++v) c.entries.push_back({2, a, -1, v});
      for (int a1 = 0; a1 < kNumMatrices; ++a1)
        for (int a2 = 0; a2 < kNumMatrices; ++a2)
          for (int v = 0; v < kNumVectors; ++v) c.entries.push_back({3, a1, a2, v});
      return c;
    }();
    return cat;
  }

  static std::string vector_name(int v) {
    static const char* names[] = {"x", "y", "Sx", "Sy"};
    return names[v];
  }
  static std::string matrix_name(int a) {
    static const char* names[] = {"Sxx", "Syy", "Sxy", "Sxx^-1", "Syy^-1", "Sxy^-1"};
    return names[a];
  }

  std::string term_name(int i) const {
    const TermDescriptor& e = entries[i];
    switch (e.type) {
      case 1:
        return vector_name(e.v);
      case 2:
        return matrix_name(e.m1) + "*" + vector_name(e.v);
      default:
        return matrix_name(e.m1) + "*" + matrix_name(e.m2) + "*" + vector_name(e.v);
    }
  }

  // canonical serialization, one term per line; the hash pins the ordering
  std::string text() const {
    std::string s;
    for (size_t i = 0; i < entries.size(); ++i) s += term_name(static_cast<int>(i)) + "\n";
    return s;
  }
  std::string hash() const { return Sha256::hash_hex(text()); }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
      if (term_name(static_cast<int>(i)) == name) return static_cast<int>(i);
    return -1;
  }
};

// ---- term bank (tape) -------------------------------------------------------------

// Node grid for one system's bank on a recorded tape. kNoNode marks terms that
// are structurally zero for the function at hand.
struct TermBankNodes {
  int d = 0;
  JetNodes sjet;
  std::vector<NodeId> terms;   // kTermCount * d, term-major
  NodeId term(int i, int k) const { return terms[static_cast<size_t>(i) * d + k]; }
};

namespace detail {

// out[k] = sum_l A[k*d+l] * v[l], folding structural zeros
inline void matvec_nodes(Tape& t, std::span<const NodeId> a, std::span<const NodeId> v, int d,
                         NodeId* out) {
  std::vector<NodeId> prods;
  for (int k = 0; k < d; ++k) {
    prods.clear();
    for (int l = 0; l < d; ++l) {
      NodeId ae = a[k * d + l];
      NodeId ve = v[l];
      if (ae == kNoNode || ve == kNoNode) continue;
      prods.push_back(t.mul(ae, ve));
    }
    if (prods.empty())
      out[k] = kNoNode;
    else if (prods.size() == 1)
      out[k] = prods[0];
    else
      out[k] = t.sum(prods);
  }
}

}  // namespace detail

// Evaluates every catalog term from the scalar jet. The three learned
// stabilizers enter only through pinv(M + b*I); b_nodes = {b_xx, b_yy, b_xy}.
inline TermBankNodes build_term_bank(Tape& t, const TermCatalog& cat, const JetNodes& sjet,
                                     std::span<const NodeId> x_ids, std::span<const NodeId> y_ids,
                                     std::span<const NodeId> b_nodes) {
  const int d = static_cast<int>(x_ids.size());
  const int m = 2 * d;
  TermBankNodes bank;
  bank.d = d;
  bank.sjet = sjet;

  NodeId zero = kNoNode;  // created on demand for pinv inputs
  auto real_node = [&](NodeId n) {
    if (n != kNoNode) return n;
    if (zero == kNoNode) zero = t.leaf(0.0);
    return zero;
  };

  // vectors: x, y, Sx, Sy
  std::vector<NodeId> vecs(static_cast<size_t>(kNumVectors) * d);
  for (int k = 0; k < d; ++k) {
    vecs[0 * d + k] = x_ids[k];
    vecs[1 * d + k] = y_ids[k];
    vecs[2 * d + k] = sjet.g[k];
    vecs[3 * d + k] = sjet.g[d + k];
  }

  // plain Hessian blocks as d x d grids (entries may be kNoNode)
  std::vector<NodeId> mats(static_cast<size_t>(kNumMatrices) * d * d, kNoNode);
  auto mat = [&](int a) { return mats.data() + static_cast<size_t>(a) * d * d; };
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      mat(0)[i * d + j] = sjet.h[tri_index(m, std::min(i, j), std::max(i, j))];
      mat(1)[i * d + j] = sjet.h[tri_index(m, d + std::min(i, j), d + std::max(i, j))];
      mat(2)[i * d + j] = sjet.h[tri_index(m, i, d + j)];
    }

  // stabilized inverses: symmetric path for Sxx, Syy (and Sxy when d == 1,
  // where it is a 1 x 1 block); SVD path for the general cross block
  for (int a = 0; a < 3; ++a) {
    const NodeId b = b_nodes[a];
    if (a < 2 || d == 1) {
      std::vector<NodeId> packed;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
          NodeId e = mat(a)[i * d + j];
          packed.push_back(i == j ? t.add(real_node(e), b) : real_node(e));
        }
      std::vector<NodeId> pv = t.pinv_sym(packed, d);
      int k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) {
          mat(3 + a)[i * d + j] = pv[k];
          mat(3 + a)[j * d + i] = pv[k];
        }
    } else {
      std::vector<NodeId> full;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          NodeId e = mat(a)[i * d + j];
          full.push_back(i == j ? t.add(real_node(e), b) : real_node(e));
        }
      std::vector<NodeId> pv = t.pinv_gen(full, d);
      for (int i = 0; i < d * d; ++i) mat(3 + a)[i] = pv[i];
    }
  }

  bank.terms.assign(static_cast<size_t>(kTermCount) * d, kNoNode);
  // type-2 results are reused as the right factor of every type-3 product
  std::vector<NodeId> type2(static_cast<size_t>(kNumMatrices) * kNumVectors * d, kNoNode);

  int idx = 0;
  for (int v = 0; v < kNumVectors; ++v, ++idx)
    for (int k = 0; k < d; ++k) bank.terms[static_cast<size_t>(idx) * d + k] = vecs[v * d + k];
  for (int a = 0; a < kNumMatrices; ++a)
    for (int v = 0; v < kNumVectors; ++v, ++idx) {
      NodeId* out = &type2[(static_cast<size_t>(a) * kNumVectors + v) * d];
      detail::matvec_nodes(t, {mat(a), static_cast<size_t>(d) * d},
                           {&vecs[static_cast<size_t>(v) * d], static_cast<size_t>(d)}, d, out);
      for (int k = 0; k < d; ++k) bank.terms[static_cast<size_t>(idx) * d + k] = out[k];
    }
  for (int a1 = 0; a1 < kNumMatrices; ++a1)
    for (int a2 = 0; a2 < kNumMatrices; ++a2)
      for (int v = 0; v < kNumVectors; ++v, ++idx) {
        const NodeId* inner = &type2[(static_cast<size_t>(a2) * kNumVectors + v) * d];
        detail::matvec_nodes(t, {mat(a1), static_cast<size_t>(d) * d},
                             {inner, static_cast<size_t>(d)}, d,
                             &bank.terms[static_cast<size_t>(idx) * d]);
      }
  (void)cat;
  return bank;
}

// ---- final layer ----------------------------------------------------------------

// Weighted activations a_i = w_i t_i and the two linear heads. Weight ids are
// parameter leaves: w_base_y + i and w_base_x + i.
struct PredictionNodes {
  int d = 0;
  std::vector<NodeId> acts_y;  // kTermCount * d
  std::vector<NodeId> acts_x;
  std::vector<NodeId> pred_y;  // d
  std::vector<NodeId> pred_x;

  NodeId act_y(int i, int k) const { return acts_y[static_cast<size_t>(i) * d + k]; }
};

inline PredictionNodes build_predictions(Tape& t, const TermBankNodes& bank, NodeId w_base_y,
                                         NodeId w_base_x) {
  const int d = bank.d;
  PredictionNodes p;
  p.d = d;
  p.acts_y.assign(static_cast<size_t>(kTermCount) * d, kNoNode);
  p.acts_x.assign(static_cast<size_t>(kTermCount) * d, kNoNode);
  p.pred_y.resize(d);
  p.pred_x.resize(d);
  std::vector<NodeId> sum_y, sum_x;
  for (int k = 0; k < d; ++k) {
    sum_y.clear();
    sum_x.clear();
    for (int i = 0; i < kTermCount; ++i) {
      NodeId term = bank.term(i, k);
      if (term == kNoNode) continue;
      NodeId ay = t.mul(w_base_y + i, term);
      NodeId ax = t.mul(w_base_x + i, term);
      p.acts_y[static_cast<size_t>(i) * d + k] = ay;
      p.acts_x[static_cast<size_t>(i) * d + k] = ax;
      sum_y.push_back(ay);
      sum_x.push_back(ax);
    }
    p.pred_y[k] = sum_y.empty() ? t.leaf(0.0) : t.sum(sum_y);
    p.pred_x[k] = sum_x.empty() ? t.leaf(0.0) : t.sum(sum_x);
  }
  return p;
}

// ---- multi-system parameter layout ---------------------------------------------

// Flat parameter vector: per system [net params | 3 stabilizers], then the
// shared final layer [ydot row | xdot row].
struct ModelLayout {
  struct SystemBlock {
    NetShape net;
    int net_ofs = 0;
    int b_ofs = 0;
  };
  std::vector<SystemBlock> systems;
  int final_ofs = 0;
  int total = 0;

  static ModelLayout make(std::span<const SystemId> ids, int width = 20, int hidden = 4) {
    ModelLayout l;
    int ofs = 0;
    for (SystemId id : ids) {
      SystemBlock blk;
      blk.net = NetShape{system_spec(id).dim, hidden, width};
      blk.net_ofs = ofs;
      ofs += blk.net.param_count();
      blk.b_ofs = ofs;
      ofs += 3;
      l.systems.push_back(blk);
    }
    l.final_ofs = ofs;
    l.total = ofs + 2 * kTermCount;
    return l;
  }

  int w_ydot(int term) const { return final_ofs + term; }
  int w_xdot(int term) const { return final_ofs + kTermCount + term; }
  int system_end(int k) const { return systems[k].b_ofs + 3; }
};

inline std::vector<double> init_params(const ModelLayout& layout, Rng& rng,
                                       double b_init = 0.1, double final_init = 0.05) {
  std::vector<double> theta(layout.total);
  for (const auto& blk : layout.systems) {
    init_net_params(blk.net, {theta.data() + blk.net_ofs, static_cast<size_t>(blk.net.param_count())},
                    rng);
    for (int i = 0; i < 3; ++i) theta[blk.b_ofs + i] = b_init;
  }
  for (int i = 0; i < 2 * kTermCount; ++i)
    theta[layout.final_ofs + i] = rng.uniform(-final_init, final_init);
  return theta;
}

// Stable text description of every tensor in the flat vector; written next to
// each snapshot so the raw little-endian arrays can be reloaded from anywhere.
inline std::string describe_tensors(const ModelLayout& layout,
                                    std::span<const std::string> system_names) {
  std::string s = "# name offset count\n";
  auto line = [&](const std::string& name, int ofs, int count) {
    s += name + " " + std::to_string(ofs) + " " + std::to_string(count) + "\n";
  };
  for (size_t j = 0; j < layout.systems.size(); ++j) {
    const auto& blk = layout.systems[j];
    const std::string pre = system_names[j] + ".";
    for (int l = 0; l <= blk.net.hidden; ++l) {
      line(pre + "w" + std::to_string(l), blk.net_ofs + blk.net.weight_ofs(l),
           blk.net.layer_out(l) * blk.net.layer_in(l));
      line(pre + "b" + std::to_string(l), blk.net_ofs + blk.net.bias_ofs(l), blk.net.layer_out(l));
    }
    line(pre + "stabilizers", blk.b_ofs, 3);
  }
  line("final.w_ydot", layout.final_ofs, kTermCount);
  line("final.w_xdot", layout.final_ofs + kTermCount, kTermCount);
  return s;
}

}  // namespace mass
