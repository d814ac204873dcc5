#pragma once

#include <array>
#include <span>
#include <vector>

#include "mass/tape.hpp"

// Second-order jets over the 2d phase-space inputs. A JetNodes carries tape
// node ids for the value, the gradient and the packed upper-triangular Hessian
// of one scalar quantity; kNoNode marks coefficients that are structurally
// zero, which keeps the input layer sparse. Everything recorded through these
// helpers stays differentiable with respect to the tape parameters.

namespace mass {

inline constexpr int kMaxVars = 12;  // 2d with d <= 6
inline constexpr int kMaxTri = kMaxVars * (kMaxVars + 1) / 2;

// packed index of Hessian entry (i, j) with i <= j, row-wise upper triangle
inline int tri_index(int m, int i, int j) { return i * m - i * (i + 1) / 2 + j; }

struct JetNodes {
  int m = 0;
  NodeId val = kNoNode;
  std::array<NodeId, kMaxVars> g{};
  std::array<NodeId, kMaxTri> h{};

  static JetNodes zero(int m) {
    JetNodes j;
    j.m = m;
    j.g.fill(kNoNode);
    j.h.fill(kNoNode);
    return j;
  }
};

// seed jet for input variable `idx`: value is a batch leaf, gradient e_idx
inline JetNodes jet_var(Tape& t, int m, int idx, NodeId value_node, NodeId one_node) {
  JetNodes j = JetNodes::zero(m);
  j.val = value_node;
  j.g[idx] = one_node;
  return j;
}

inline JetNodes jet_const(Tape& t, int m, NodeId value_node) {
  JetNodes j = JetNodes::zero(m);
  j.val = value_node;
  return j;
}

inline JetNodes jet_add(Tape& t, const JetNodes& a, const JetNodes& b) {
  JetNodes r = JetNodes::zero(a.m);
  auto padd = [&](NodeId x, NodeId y) {
    if (x == kNoNode) return y;
    if (y == kNoNode) return x;
    return t.add(x, y);
  };
  r.val = padd(a.val, b.val);
  for (int i = 0; i < a.m; ++i) r.g[i] = padd(a.g[i], b.g[i]);
  int tn = a.m * (a.m + 1) / 2;
  for (int i = 0; i < tn; ++i) r.h[i] = padd(a.h[i], b.h[i]);
  return r;
}

inline JetNodes jet_scale(Tape& t, const JetNodes& a, double c) {
  JetNodes r = JetNodes::zero(a.m);
  auto ps = [&](NodeId x) { return x == kNoNode ? kNoNode : t.scale(x, c); };
  r.val = ps(a.val);
  for (int i = 0; i < a.m; ++i) r.g[i] = ps(a.g[i]);
  int tn = a.m * (a.m + 1) / 2;
  for (int i = 0; i < tn; ++i) r.h[i] = ps(a.h[i]);
  return r;
}

// full product rule, folding structural zeros
inline JetNodes jet_mul(Tape& t, const JetNodes& a, const JetNodes& b) {
  const int m = a.m;
  JetNodes r = JetNodes::zero(m);
  auto pmul = [&](NodeId x, NodeId y) -> NodeId {
    if (x == kNoNode || y == kNoNode) return kNoNode;
    return t.mul(x, y);
  };
  auto padd = [&](NodeId x, NodeId y) -> NodeId {
    if (x == kNoNode) return y;
    if (y == kNoNode) return x;
    return t.add(x, y);
  };
  r.val = pmul(a.val, b.val);
  for (int i = 0; i < m; ++i)
    r.g[i] = padd(pmul(a.val, b.g[i]), pmul(a.g[i], b.val));
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      int k = tri_index(m, i, j);
      NodeId s = padd(pmul(a.val, b.h[k]), pmul(a.h[k], b.val));
      if (i == j) {
        NodeId gg = pmul(a.g[i], b.g[i]);
        if (gg != kNoNode) s = padd(s, t.scale(gg, 2.0));
      } else {
        s = padd(s, pmul(a.g[i], b.g[j]));
        s = padd(s, pmul(a.g[j], b.g[i]));
      }
      r.h[k] = s;
    }
  return r;
}

// softplus with exact first and second order propagation:
//   v' = sp(v),  g' = sig(v) g,  H' = sig(v) H + sig'(v) g g^T
inline JetNodes jet_softplus(Tape& t, const JetNodes& a) {
  const int m = a.m;
  JetNodes r = JetNodes::zero(m);
  r.val = t.softplus(a.val);
  NodeId sig = t.sigmoid(a.val);
  bool any_g = false;
  for (int i = 0; i < m; ++i) {
    if (a.g[i] != kNoNode) {
      r.g[i] = t.mul(sig, a.g[i]);
      any_g = true;
    }
  }
  NodeId sigp = kNoNode;  // sig * (1 - sig), built only if a gradient exists
  if (any_g) sigp = t.mul(sig, t.add_const(t.neg(sig), 1.0));
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      int k = tri_index(m, i, j);
      NodeId s = kNoNode;
      if (a.h[k] != kNoNode) s = t.mul(sig, a.h[k]);
      if (a.g[i] != kNoNode && a.g[j] != kNoNode) {
        NodeId gg = t.mul(a.g[i], a.g[j]);
        NodeId curv = t.mul(sigp, gg);
        s = (s == kNoNode) ? curv : t.add(s, curv);
      }
      r.h[k] = s;
    }
  return r;
}

// ---- numeric extraction -----------------------------------------------------

// Value plus exact first/second derivatives of S with respect to (x, y),
// extracted from one lane of a recorded jet. The Hessian is materialized as a
// full symmetric 2d x 2d matrix from the packed coefficients.
struct Jet2 {
  int d = 0;
  double value = 0.0;
  std::vector<double> grad;  // 2d
  std::vector<double> hess;  // (2d)^2 row-major

  double sx(int i) const { return grad[i]; }
  double sy(int i) const { return grad[d + i]; }
  double sxx(int i, int j) const { return hess[i * 2 * d + j]; }
  double syy(int i, int j) const { return hess[(d + i) * 2 * d + d + j]; }
  double sxy(int i, int j) const { return hess[i * 2 * d + d + j]; }
};

inline Jet2 read_jet2(const Tape& t, const JetNodes& jet, int lane) {
  Jet2 out;
  const int m = jet.m;
  out.d = m / 2;
  out.value = jet.val == kNoNode ? 0.0 : t.value_at(jet.val, lane);
  out.grad.assign(m, 0.0);
  out.hess.assign(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    if (jet.g[i] != kNoNode) out.grad[i] = t.value_at(jet.g[i], lane);
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      NodeId n = jet.h[tri_index(m, i, j)];
      double v = n == kNoNode ? 0.0 : t.value_at(n, lane);
      out.hess[i * m + j] = v;
      out.hess[j * m + i] = v;
    }
  return out;
}

}  // namespace mass
