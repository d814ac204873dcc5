#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mass/linalg.hpp"

// Reverse-mode tape over the model parameters. Every node is either a scalar
// (width 1) or a batch of `lanes` values; parameters are scalar leaves, sample
// data are batch leaves, and the broadcasting rules between the two give the
// per-parameter adjoints directly. Recording computes values eagerly; a
// recorded graph can be replayed on fresh leaf values with forward_all(), which
// is how the trainer reuses one graph per phase.

namespace mass {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

struct NonFiniteValue : std::runtime_error {
  int layer;
  explicit NonFiniteValue(int layer_index)
      : std::runtime_error("non-finite value in scalar network layer " +
                           std::to_string(layer_index)),
        layer(layer_index) {}
};

struct TapeMismatch : std::runtime_error {
  TapeMismatch() : std::runtime_error("loss node is not a scalar node of this tape") {}
};

enum class OpK : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kAbs,
  kScale,     // out = c * a
  kAddConst,  // out = a + c
  kSoftplus,
  kSigmoid,
  kDot,       // out = bias? + sum_i w_i * h_i  (ext = [w0,h0,w1,h1,...], b in `b`)
  kSum,       // out = sum_k in_k               (ext list)
  kMeanLanes, // batch -> scalar mean
  kPinvSym,   // pseudo-inverse of a packed symmetric d x d block, per lane
  kPinvGen,   // pseudo-inverse of a general d x d block, per lane
  kSoftplusJet,  // fused second-order softplus unit over a packed jet
  kPredictHead,  // fused linear heads plus the mean-L1 of weighted activations
  kDense,        // out[u] = bias_u? + sum_i W[u,i] * in_i over one whole layer
};

struct OpRec {
  OpK kind;
  int16_t dim = 0;  // pinv only
  NodeId out = kNoNode;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  double c = 0.0;
  int32_t ext = -1;  // offset into ext_ids
  int32_t n_ext = 0;
  int64_t aux = -1;  // offset into aux scratch (pinv factors)
};

class Tape {
 public:
  explicit Tape(int lanes) : lanes_(lanes) {}

  int lanes() const { return lanes_; }
  int size() const { return static_cast<int>(slots_.size()); }

  void clear() {
    slots_.clear();
    ops_.clear();
    ext_ids_.clear();
    aux_.clear();
    values_.clear();
    adjoint_.clear();
    param_base_ = kNoNode;
    param_count_ = 0;
  }

  // ---- leaves --------------------------------------------------------------

  NodeId leaf(double v) {
    NodeId id = alloc_slot(1);
    values_[slots_[id].ofs] = v;
    ops_.push_back({OpK::kLeaf, 0, id});
    return id;
  }

  NodeId leaf_batch(std::span<const double> v) {
    if (static_cast<int>(v.size()) != lanes_) throw std::logic_error("leaf_batch width");
    NodeId id = alloc_slot(lanes_);
    std::copy(v.begin(), v.end(), values_.begin() + slots_[id].ofs);
    ops_.push_back({OpK::kLeaf, 0, id});
    return id;
  }

  NodeId leaf_batch_zero() {
    NodeId id = alloc_slot(lanes_);
    std::fill_n(values_.begin() + slots_[id].ofs, lanes_, 0.0);
    ops_.push_back({OpK::kLeaf, 0, id});
    return id;
  }

  // Registers the parameter vector as a contiguous block of scalar leaves.
  NodeId attach_params(std::span<const double> theta) {
    param_base_ = size();
    param_count_ = static_cast<int>(theta.size());
    for (double v : theta) leaf(v);
    return param_base_;
  }

  NodeId param_base() const { return param_base_; }
  int param_count() const { return param_count_; }

  void set_param_values(std::span<const double> theta) {
    for (int i = 0; i < param_count_; ++i)
      values_[slots_[param_base_ + i].ofs] = theta[i];
  }

  void set_leaf(NodeId id, double v) { values_[slots_[id].ofs] = v; }

  void set_leaf_batch(NodeId id, std::span<const double> v) {
    std::copy(v.begin(), v.end(), values_.begin() + slots_[id].ofs);
  }

  // ---- reads ---------------------------------------------------------------

  int width(NodeId id) const { return slots_[id].width; }

  double value1(NodeId id) const { return values_[slots_[id].ofs]; }

  std::span<const double> values(NodeId id) const {
    return {values_.data() + slots_[id].ofs, static_cast<size_t>(slots_[id].width)};
  }

  double value_at(NodeId id, int lane) const {
    const Slot& s = slots_[id];
    return values_[s.ofs + (s.width == 1 ? 0 : lane)];
  }

  std::span<const double> param_adjoints() const {
    // scalar leaves are allocated back to back, so the block is contiguous
    return {adjoint_.data() + slots_[param_base_].ofs, static_cast<size_t>(param_count_)};
  }

  double adjoint1(NodeId id) const { return adjoint_[slots_[id].ofs]; }

  double adjoint_at(NodeId id, int lane) const {
    const Slot& s = slots_[id];
    return adjoint_[s.ofs + (s.width == 1 ? 0 : lane)];
  }

  bool all_finite(NodeId id) const {
    const Slot& s = slots_[id];
    for (int l = 0; l < s.width; ++l)
      if (!std::isfinite(values_[s.ofs + l])) return false;
    return true;
  }

  // ---- elementary ops --------------------------------------------------------

  NodeId add(NodeId a, NodeId b) { return binary(OpK::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(OpK::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(OpK::kMul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(OpK::kDiv, a, b); }

  NodeId neg(NodeId a) { return unary(OpK::kNeg, a); }
  NodeId abs(NodeId a) { return unary(OpK::kAbs, a); }
  NodeId softplus(NodeId a) { return unary(OpK::kSoftplus, a); }
  NodeId sigmoid(NodeId a) { return unary(OpK::kSigmoid, a); }

  NodeId scale(NodeId a, double c) { return unary_c(OpK::kScale, a, c); }
  NodeId add_const(NodeId a, double c) { return unary_c(OpK::kAddConst, a, c); }

  // out = bias? + sum_i w_i * h_i. Weights must be scalar nodes.
  NodeId dot(std::span<const NodeId> weights, std::span<const NodeId> inputs,
             NodeId bias = kNoNode) {
    if (weights.size() != inputs.size()) throw std::logic_error("dot arity");
    if (dot_w_.size() < weights.size()) {
      dot_w_.resize(weights.size());
      dot_h_.resize(weights.size());
      dot_ha_.resize(weights.size());
      dot_wbar_.resize(weights.size());
    }
    int w = 1;
    for (NodeId h : inputs)
      if (slots_[h].width != 1) w = lanes_;
    OpRec op{OpK::kDot, 0, alloc_slot(w), kNoNode, bias};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = static_cast<int32_t>(2 * weights.size());
    for (size_t i = 0; i < weights.size(); ++i) {
      if (slots_[weights[i]].width != 1) throw std::logic_error("dot weight width");
      ext_ids_.push_back(weights[i]);
      ext_ids_.push_back(inputs[i]);
    }
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  NodeId sum(std::span<const NodeId> inputs) {
    if (inputs.empty()) throw std::logic_error("sum of nothing");
    int w = 1;
    for (NodeId h : inputs)
      if (slots_[h].width != 1) w = lanes_;
    OpRec op{OpK::kSum, 0, alloc_slot(w)};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = static_cast<int32_t>(inputs.size());
    ext_ids_.insert(ext_ids_.end(), inputs.begin(), inputs.end());
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  NodeId mean_lanes(NodeId a) {
    OpRec op{OpK::kMeanLanes, 0, alloc_slot(1), a};
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  // ---- pseudo-inverse ops ------------------------------------------------------
  //
  // Both take the d x d block entry-by-entry and emit the pinv entries as fresh
  // nodes. The symmetric variant works on the packed upper triangle (i <= j,
  // row-wise) and keeps the eigenfactors per lane for the reverse sweep; the
  // general variant recovers everything it needs from its input/output values.

  // inputs: d*(d+1)/2 packed entries of symmetric M. outputs: packed pinv(M).
  std::vector<NodeId> pinv_sym(std::span<const NodeId> packed, int d) {
    int t = d * (d + 1) / 2;
    if (static_cast<int>(packed.size()) != t) throw std::logic_error("pinv_sym arity");
    int w = 1;
    for (NodeId h : packed)
      if (slots_[h].width != 1) w = lanes_;
    OpRec op{OpK::kPinvSym, static_cast<int16_t>(d), kNoNode};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = t;
    ext_ids_.insert(ext_ids_.end(), packed.begin(), packed.end());
    std::vector<NodeId> outs(t);
    for (int i = 0; i < t; ++i) outs[i] = alloc_slot(w);
    op.out = outs[0];
    op.aux = static_cast<int64_t>(aux_.size());
    aux_.resize(aux_.size() + static_cast<size_t>(w) * (d * d + d));
    ops_.push_back(op);
    forward_op(ops_.back());
    return outs;
  }

  // inputs: d*d row-major entries of M. outputs: row-major pinv(M).
  std::vector<NodeId> pinv_gen(std::span<const NodeId> entries, int d) {
    if (static_cast<int>(entries.size()) != d * d) throw std::logic_error("pinv_gen arity");
    int w = 1;
    for (NodeId h : entries)
      if (slots_[h].width != 1) w = lanes_;
    OpRec op{OpK::kPinvGen, static_cast<int16_t>(d), kNoNode};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = d * d;
    ext_ids_.insert(ext_ids_.end(), entries.begin(), entries.end());
    std::vector<NodeId> outs(d * d);
    for (int i = 0; i < d * d; ++i) outs[i] = alloc_slot(w);
    op.out = outs[0];
    ops_.push_back(op);
    forward_op(ops_.back());
    return outs;
  }

  // Fused softplus over a full second-order jet: inputs are the 1 + m + tri(m)
  // coefficient ids of the pre-activation (kNoNode marks structural zeros),
  // outputs are the matching coefficients of softplus(z). Returns the first
  // output id; outputs are consecutive.
  NodeId softplus_jet(std::span<const NodeId> coeffs, int m) {
    const int n = 1 + m + m * (m + 1) / 2;
    if (static_cast<int>(coeffs.size()) != n) throw std::logic_error("softplus_jet arity");
    OpRec op{OpK::kSoftplusJet, static_cast<int16_t>(m), kNoNode};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = n;
    ext_ids_.insert(ext_ids_.end(), coeffs.begin(), coeffs.end());
    NodeId first = kNoNode;
    for (int i = 0; i < n; ++i) {
      NodeId id = alloc_slot(lanes_);
      if (i == 0) first = id;
    }
    op.out = first;
    op.aux = static_cast<int64_t>(aux_.size());
    aux_.resize(aux_.size() + lanes_);  // per-lane sigmoid for the reverse sweep
    ops_.push_back(op);
    forward_op(ops_.back());
    return first;
  }

  // Fused final layer for training: both linear heads plus the batch mean of
  // the summed |w_i t_i| over every term, component and head. Terms are the
  // T x d grid (kNoNode allowed); weight rows are consecutive parameter slots
  // starting at w_y and w_x. Outputs: pred_y[d], pred_x[d], then the scalar
  // L1 mean.
  NodeId predict_head(std::span<const NodeId> terms, int terms_count, int d, NodeId w_y,
                      NodeId w_x) {
    if (static_cast<int>(terms.size()) != terms_count * d)
      throw std::logic_error("predict_head arity");
    OpRec op{OpK::kPredictHead, static_cast<int16_t>(d), kNoNode, w_y, w_x};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = terms_count * d;
    ext_ids_.insert(ext_ids_.end(), terms.begin(), terms.end());
    NodeId first = kNoNode;
    for (int i = 0; i < 2 * d; ++i) {
      NodeId id = alloc_slot(lanes_);
      if (i == 0) first = id;
    }
    alloc_slot(1);  // L1 mean
    op.out = first;
    ops_.push_back(op);
    forward_op(ops_.back());
    return first;
  }

  // One affine layer over a vector of nodes: out_u = bias_u? + sum_i W[u,i] in_i
  // with W the contiguous parameter block starting at w_base (row-major
  // n_out x n_in) and bias the block at b_base. Inputs may be kNoNode
  // (structural zero) or scalar nodes. Returns the first of n_out consecutive
  // output slots; output width is the widest input (scalar when all inputs
  // are scalar or missing).
  NodeId dense(NodeId w_base, NodeId b_base, int n_out, std::span<const NodeId> inputs) {
    int w = (b_base != kNoNode) ? 1 : 1;
    for (NodeId h : inputs)
      if (h != kNoNode && slots_[h].width != 1) w = lanes_;
    OpRec op{OpK::kDense, static_cast<int16_t>(n_out), kNoNode, w_base, b_base};
    op.ext = static_cast<int32_t>(ext_ids_.size());
    op.n_ext = static_cast<int32_t>(inputs.size());
    ext_ids_.insert(ext_ids_.end(), inputs.begin(), inputs.end());
    NodeId first = kNoNode;
    for (int u = 0; u < n_out; ++u) {
      NodeId id = alloc_slot(w);
      if (u == 0) first = id;
    }
    op.out = first;
    if (dense_ptr_.size() < inputs.size()) {
      dense_ptr_.resize(inputs.size());
      dense_aptr_.resize(inputs.size());
    }
    ops_.push_back(op);
    forward_op(ops_.back());
    return first;
  }

  // ---- execution ---------------------------------------------------------------

  // Replays the recorded graph from current leaf values.
  void forward_all() {
    for (OpRec& op : ops_) forward_op(op);
  }

  // Reverse sweep; fills adjoints of every node, seeded with 1 on `loss`.
  void backward(NodeId loss) {
    if (loss < 0 || loss >= size() || slots_[loss].width != 1) throw TapeMismatch();
    adjoint_.assign(values_.size(), 0.0);
    adjoint_[slots_[loss].ofs] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) backward_op(*it);
  }

 private:
  struct Slot {
    int64_t ofs;
    int32_t width;
  };

  NodeId alloc_slot(int width) {
    NodeId id = static_cast<NodeId>(slots_.size());
    slots_.push_back({static_cast<int64_t>(values_.size()), width});
    values_.resize(values_.size() + width);
    return id;
  }

  NodeId binary(OpK k, NodeId a, NodeId b) {
    int w = (slots_[a].width == 1 && slots_[b].width == 1) ? 1 : lanes_;
    OpRec op{k, 0, alloc_slot(w), a, b};
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  NodeId unary(OpK k, NodeId a) {
    OpRec op{k, 0, alloc_slot(slots_[a].width), a};
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  NodeId unary_c(OpK k, NodeId a, double c) {
    OpRec op{k, 0, alloc_slot(slots_[a].width), a, kNoNode, c};
    ops_.push_back(op);
    forward_op(ops_.back());
    return op.out;
  }

  // four-accumulator reductions: vectorizable at a fixed, deterministic order
  static double dot4(const double* a, const double* b, int n) {
    double r0 = 0, r1 = 0, r2 = 0, r3 = 0;
    int l = 0;
    for (; l + 4 <= n; l += 4) {
      r0 += a[l] * b[l];
      r1 += a[l + 1] * b[l + 1];
      r2 += a[l + 2] * b[l + 2];
      r3 += a[l + 3] * b[l + 3];
    }
    double r = (r0 + r1) + (r2 + r3);
    for (; l < n; ++l) r += a[l] * b[l];
    return r;
  }
  static double sum4(const double* a, int n) {
    double r0 = 0, r1 = 0, r2 = 0, r3 = 0;
    int l = 0;
    for (; l + 4 <= n; l += 4) {
      r0 += a[l];
      r1 += a[l + 1];
      r2 += a[l + 2];
      r3 += a[l + 3];
    }
    double r = (r0 + r1) + (r2 + r3);
    for (; l < n; ++l) r += a[l];
    return r;
  }
  static double sumabs4(const double* a, int n) {
    double r0 = 0, r1 = 0, r2 = 0, r3 = 0;
    int l = 0;
    for (; l + 4 <= n; l += 4) {
      r0 += std::fabs(a[l]);
      r1 += std::fabs(a[l + 1]);
      r2 += std::fabs(a[l + 2]);
      r3 += std::fabs(a[l + 3]);
    }
    double r = (r0 + r1) + (r2 + r3);
    for (; l < n; ++l) r += std::fabs(a[l]);
    return r;
  }

  static double softplus_val(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  static double sigmoid_val(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  void forward_op(const OpRec& op) {
    if (op.kind == OpK::kLeaf) return;
    const int L = lanes_;
    auto vptr = [&](NodeId id) { return values_.data() + slots_[id].ofs; };
    auto wid = [&](NodeId id) { return slots_[id].width; };
    double* out = values_.data() + slots_[op.out].ofs;
    int ow = slots_[op.out].width;

    switch (op.kind) {
      case OpK::kAdd:
      case OpK::kSub:
      case OpK::kMul:
      case OpK::kDiv: {
        const double* a = vptr(op.a);
        const double* b = vptr(op.b);
        int sa = wid(op.a) == 1 ? 0 : 1, sb = wid(op.b) == 1 ? 0 : 1;
        int n = ow;
        switch (op.kind) {
          case OpK::kAdd:
            for (int l = 0; l < n; ++l) out[l] = a[l * sa] + b[l * sb];
            break;
          case OpK::kSub:
            for (int l = 0; l < n; ++l) out[l] = a[l * sa] - b[l * sb];
            break;
          case OpK::kMul:
            for (int l = 0; l < n; ++l) out[l] = a[l * sa] * b[l * sb];
            break;
          default:
            for (int l = 0; l < n; ++l) out[l] = a[l * sa] / b[l * sb];
            break;
        }
        break;
      }
      case OpK::kNeg: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = -a[l];
        break;
      }
      case OpK::kAbs: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = std::fabs(a[l]);
        break;
      }
      case OpK::kScale: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = op.c * a[l];
        break;
      }
      case OpK::kAddConst: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = a[l] + op.c;
        break;
      }
      case OpK::kSoftplus: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = softplus_val(a[l]);
        break;
      }
      case OpK::kSigmoid: {
        const double* a = vptr(op.a);
        for (int l = 0; l < ow; ++l) out[l] = sigmoid_val(a[l]);
        break;
      }
      case OpK::kDot: {
        double acc0 = (op.b != kNoNode) ? values_[slots_[op.b].ofs] : 0.0;
        if (ow == 1) {
          for (int i = 0; i < op.n_ext; i += 2) {
            double w = values_[slots_[ext_ids_[op.ext + i]].ofs];
            acc0 += w * values_[slots_[ext_ids_[op.ext + i + 1]].ofs];
          }
          out[0] = acc0;
          break;
        }
        // scalar inputs fold into the broadcast part; wide inputs stream
        // through a lane-chunked accumulator so `out` is written once
        int n_wide = 0;
        for (int i = 0; i < op.n_ext; i += 2) {
          NodeId h = ext_ids_[op.ext + i + 1];
          double w = values_[slots_[ext_ids_[op.ext + i]].ofs];
          if (wid(h) == 1) {
            acc0 += w * values_[slots_[h].ofs];
          } else {
            dot_w_[n_wide] = w;
            dot_h_[n_wide++] = vptr(h);
          }
        }
        constexpr int kChunk = 128;
        double acc[kChunk];
        for (int c0 = 0; c0 < L; c0 += kChunk) {
          int n = std::min(kChunk, L - c0);
          for (int l = 0; l < n; ++l) acc[l] = acc0;
          for (int i = 0; i < n_wide; ++i) {
            const double* hv = dot_h_[i] + c0;
            double w = dot_w_[i];
            for (int l = 0; l < n; ++l) acc[l] += w * hv[l];
          }
          for (int l = 0; l < n; ++l) out[c0 + l] = acc[l];
        }
        break;
      }
      case OpK::kSum: {
        if (ow == 1) {
          double acc = 0.0;
          for (int i = 0; i < op.n_ext; ++i) acc += values_[slots_[ext_ids_[op.ext + i]].ofs];
          out[0] = acc;
          break;
        }
        double acc0 = 0.0;
        for (int i = 0; i < op.n_ext; ++i) {
          NodeId h = ext_ids_[op.ext + i];
          if (wid(h) == 1) acc0 += values_[slots_[h].ofs];
        }
        for (int l = 0; l < L; ++l) out[l] = acc0;
        for (int i = 0; i < op.n_ext; ++i) {
          NodeId h = ext_ids_[op.ext + i];
          if (wid(h) == 1) continue;
          const double* hv = vptr(h);
          for (int l = 0; l < L; ++l) out[l] += hv[l];
        }
        break;
      }
      case OpK::kMeanLanes: {
        const double* a = vptr(op.a);
        if (wid(op.a) == 1) {
          out[0] = a[0];
          break;
        }
        double acc = 0.0;
        for (int l = 0; l < L; ++l) acc += a[l];
        out[0] = acc / L;
        break;
      }
      case OpK::kPinvSym:
        forward_pinv_sym(op);
        break;
      case OpK::kPinvGen:
        forward_pinv_gen(op);
        break;
      case OpK::kSoftplusJet: {
        const int m = op.dim;
        const int nc = 1 + m + m * (m + 1) / 2;
        const double* in[91];
        double* outp[91];
        for (int i = 0; i < nc; ++i) {
          NodeId id = ext_ids_[op.ext + i];
          in[i] = id == kNoNode ? nullptr : vptr(id);
          outp[i] = values_.data() + slots_[op.out + i].ofs;
        }
        double* sig = aux_.data() + op.aux;
        double gv[12];
        for (int l = 0; l < L; ++l) {
          double v = in[0] ? in[0][l] : 0.0;
          // one exp serves softplus, sigmoid and both derivative factors
          double e = std::exp(-std::fabs(v));
          double lp = std::log1p(e);
          double s = v >= 0.0 ? 1.0 / (1.0 + e) : 1.0 - 1.0 / (1.0 + e);
          sig[l] = s;
          double sp1 = s * (1.0 - s);
          outp[0][l] = v >= 0.0 ? v + lp : lp;
          for (int i = 0; i < m; ++i) {
            gv[i] = in[1 + i] ? in[1 + i][l] : 0.0;
            outp[1 + i][l] = s * gv[i];
          }
          int c = 1 + m;
          for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j, ++c) {
              double h = in[c] ? in[c][l] : 0.0;
              outp[c][l] = s * h + sp1 * gv[i] * gv[j];
            }
        }
        break;
      }
      case OpK::kPredictHead: {
        const int d = op.dim;
        const int terms = op.n_ext / d;
        const int64_t l1_ofs = slots_[op.out + 2 * d].ofs;
        double l1acc = 0.0;
        for (int k = 0; k < d; ++k) {
          double* py = values_.data() + slots_[op.out + k].ofs;
          double* px = values_.data() + slots_[op.out + d + k].ofs;
          std::fill_n(py, L, 0.0);
          std::fill_n(px, L, 0.0);
          for (int i = 0; i < terms; ++i) {
            NodeId tn = ext_ids_[op.ext + i * d + k];
            if (tn == kNoNode) continue;
            double wy = values_[slots_[op.a + i].ofs];
            double wx = values_[slots_[op.b + i].ofs];
            const Slot& ts = slots_[tn];
            if (ts.width == 1) {
              double ay = wy * values_[ts.ofs], ax = wx * values_[ts.ofs];
              for (int l = 0; l < L; ++l) {
                py[l] += ay;
                px[l] += ax;
              }
              l1acc += L * (std::fabs(ay) + std::fabs(ax));
            } else {
              const double* tv = values_.data() + ts.ofs;
              for (int l = 0; l < L; ++l) py[l] += wy * tv[l];
              for (int l = 0; l < L; ++l) px[l] += wx * tv[l];
              // |w t| = |w| |t|, so one absolute-sum serves both heads
              l1acc += (std::fabs(wy) + std::fabs(wx)) * sumabs4(tv, L);
            }
          }
        }
        values_[l1_ofs] = l1acc / L;
        break;
      }
      case OpK::kDense: {
        const int n_out = op.dim, n_in = op.n_ext;
        const double* wrow = values_.data() + slots_[op.a].ofs;  // params are contiguous
        const double* brow = op.b == kNoNode ? nullptr : values_.data() + slots_[op.b].ofs;
        if (ow == 1) {
          for (int u = 0; u < n_out; ++u) {
            double acc = brow ? brow[u] : 0.0;
            for (int i = 0; i < n_in; ++i) {
              NodeId hn = ext_ids_[op.ext + i];
              if (hn == kNoNode) continue;
              acc += wrow[u * n_in + i] * values_[slots_[hn].ofs];
            }
            values_[slots_[op.out + u].ofs] = acc;
          }
          break;
        }
        if (dense_acc_.size() < static_cast<size_t>(n_out) * kDenseChunk)
          dense_acc_.resize(static_cast<size_t>(n_out) * kDenseChunk);
        if (dense_base_.size() < static_cast<size_t>(n_out)) dense_base_.resize(n_out);
        // per-unit broadcast part: bias plus scalar inputs
        for (int u = 0; u < n_out; ++u) {
          double acc = brow ? brow[u] : 0.0;
          for (int i = 0; i < n_in; ++i) {
            NodeId hn = ext_ids_[op.ext + i];
            if (hn != kNoNode && slots_[hn].width == 1)
              acc += wrow[u * n_in + i] * values_[slots_[hn].ofs];
          }
          dense_base_[u] = acc;
        }
        for (int c0 = 0; c0 < L; c0 += kDenseChunk) {
          const int n = std::min(kDenseChunk, L - c0);
          for (int u = 0; u < n_out; ++u) {
            double* acc = dense_acc_.data() + static_cast<size_t>(u) * kDenseChunk;
            double b = dense_base_[u];
            for (int l = 0; l < n; ++l) acc[l] = b;
          }
          for (int i = 0; i < n_in; ++i) {
            NodeId hn = ext_ids_[op.ext + i];
            if (hn == kNoNode || slots_[hn].width == 1) continue;
            const double* hv = values_.data() + slots_[hn].ofs + c0;
            for (int u = 0; u < n_out; ++u) {
              double w = wrow[u * n_in + i];
              double* acc = dense_acc_.data() + static_cast<size_t>(u) * kDenseChunk;
              for (int l = 0; l < n; ++l) acc[l] += w * hv[l];
            }
          }
          for (int u = 0; u < n_out; ++u)
            std::memcpy(values_.data() + slots_[op.out + u].ofs + c0,
                        dense_acc_.data() + static_cast<size_t>(u) * kDenseChunk,
                        sizeof(double) * n);
        }
        break;
      }
      case OpK::kLeaf:
        break;
    }
  }

  void backward_op(const OpRec& op) {
    if (op.kind == OpK::kLeaf) return;
    const int L = lanes_;
    auto vptr = [&](NodeId id) { return values_.data() + slots_[id].ofs; };
    auto aptr = [&](NodeId id) { return adjoint_.data() + slots_[id].ofs; };
    auto wid = [&](NodeId id) { return slots_[id].width; };
    const double* g = adjoint_.data() + slots_[op.out].ofs;
    int ow = slots_[op.out].width;

    // adds the lane-wise product g * f into the adjoint of node t
    auto acc_prod = [&](NodeId t, const double* f, int fstride) {
      double* ta = aptr(t);
      if (wid(t) == 1) {
        double s = 0.0;
        if (ow == 1)
          s = g[0] * f[0];
        else
          for (int l = 0; l < L; ++l) s += g[l] * f[l * fstride];
        ta[0] += s;
      } else {
        for (int l = 0; l < ow; ++l) ta[l] += g[l] * f[l * fstride];
      }
    };
    auto acc_scaled = [&](NodeId t, double c) {
      double* ta = aptr(t);
      if (wid(t) == 1) {
        double s = 0.0;
        for (int l = 0; l < ow; ++l) s += g[l];
        ta[0] += c * s;
      } else if (ow == 1) {
        for (int l = 0; l < L; ++l) ta[l] += c * g[0];
      } else {
        for (int l = 0; l < ow; ++l) ta[l] += c * g[l];
      }
    };

    switch (op.kind) {
      case OpK::kAdd:
        acc_scaled(op.a, 1.0);
        acc_scaled(op.b, 1.0);
        break;
      case OpK::kSub:
        acc_scaled(op.a, 1.0);
        acc_scaled(op.b, -1.0);
        break;
      case OpK::kMul: {
        acc_prod(op.a, vptr(op.b), wid(op.b) == 1 ? 0 : 1);
        acc_prod(op.b, vptr(op.a), wid(op.a) == 1 ? 0 : 1);
        break;
      }
      case OpK::kDiv: {
        const double* a = vptr(op.a);
        const double* b = vptr(op.b);
        int sa = wid(op.a) == 1 ? 0 : 1, sb = wid(op.b) == 1 ? 0 : 1;
        double* aa = aptr(op.a);
        double* ab = aptr(op.b);
        // generic per-lane accumulation (division is off the hot path)
        for (int l = 0; l < ow; ++l) {
          double av = a[l * sa], bv = b[l * sb];
          double gl = g[l];
          if (wid(op.a) == 1)
            aa[0] += gl / bv;
          else
            aa[l] += gl / bv;
          double dbl = -gl * av / (bv * bv);
          if (wid(op.b) == 1)
            ab[0] += dbl;
          else
            ab[l] += dbl;
        }
        break;
      }
      case OpK::kNeg:
        acc_scaled(op.a, -1.0);
        break;
      case OpK::kAbs: {
        const double* a = vptr(op.a);
        double* aa = aptr(op.a);
        for (int l = 0; l < ow; ++l)
          aa[l] += g[l] * (a[l] > 0.0 ? 1.0 : (a[l] < 0.0 ? -1.0 : 0.0));
        break;
      }
      case OpK::kScale:
        acc_scaled(op.a, op.c);
        break;
      case OpK::kAddConst:
        acc_scaled(op.a, 1.0);
        break;
      case OpK::kSoftplus: {
        const double* a = vptr(op.a);
        double* aa = aptr(op.a);
        for (int l = 0; l < ow; ++l) aa[l] += g[l] * sigmoid_val(a[l]);
        break;
      }
      case OpK::kSigmoid: {
        const double* s = values_.data() + slots_[op.out].ofs;
        double* aa = aptr(op.a);
        for (int l = 0; l < ow; ++l) aa[l] += g[l] * s[l] * (1.0 - s[l]);
        break;
      }
      case OpK::kDot: {
        if (op.b != kNoNode) {
          double* ba = aptr(op.b);
          if (ow == 1) {
            ba[0] += g[0];
          } else {
            double s = 0.0;
            for (int l = 0; l < L; ++l) s += g[l];
            ba[0] += s;
          }
        }
        if (ow == 1) {
          for (int i = 0; i < op.n_ext; i += 2) {
            NodeId wn = ext_ids_[op.ext + i];
            NodeId hn = ext_ids_[op.ext + i + 1];
            adjoint_[slots_[wn].ofs] += g[0] * values_[slots_[hn].ofs];
            adjoint_[slots_[hn].ofs] += g[0] * values_[slots_[wn].ofs];
          }
          break;
        }
        // wide output: one fused reduction + axpy pass per lane chunk
        double gsum = 0.0;
        bool need_gsum = false;
        int n_wide = 0;
        for (int i = 0; i < op.n_ext; i += 2) {
          NodeId wn = ext_ids_[op.ext + i];
          NodeId hn = ext_ids_[op.ext + i + 1];
          if (wid(hn) == 1) {
            need_gsum = true;
          } else {
            dot_w_[n_wide] = values_[slots_[wn].ofs];
            dot_h_[n_wide] = vptr(hn);
            dot_ha_[n_wide] = aptr(hn);
            dot_wbar_[n_wide++] = 0.0;
          }
        }
        if (need_gsum)
          for (int l = 0; l < L; ++l) gsum += g[l];
        constexpr int kChunk = 128;
        for (int c0 = 0; c0 < L; c0 += kChunk) {
          int n = std::min(kChunk, L - c0);
          const double* gc = g + c0;
          for (int i = 0; i < n_wide; ++i) {
            const double* hv = dot_h_[i] + c0;
            double* ha = dot_ha_[i] + c0;
            double w = dot_w_[i];
            for (int l = 0; l < n; ++l) ha[l] += w * gc[l];
            dot_wbar_[i] += dot4(gc, hv, n);
          }
        }
        int wi = 0;
        for (int i = 0; i < op.n_ext; i += 2) {
          NodeId wn = ext_ids_[op.ext + i];
          NodeId hn = ext_ids_[op.ext + i + 1];
          if (wid(hn) == 1) {
            adjoint_[slots_[wn].ofs] += gsum * values_[slots_[hn].ofs];
            adjoint_[slots_[hn].ofs] += gsum * values_[slots_[wn].ofs];
          } else {
            adjoint_[slots_[wn].ofs] += dot_wbar_[wi++];
          }
        }
        break;
      }
      case OpK::kSum: {
        for (int i = 0; i < op.n_ext; ++i) {
          NodeId h = ext_ids_[op.ext + i];
          double* ha = aptr(h);
          if (wid(h) == 1) {
            if (ow == 1) {
              ha[0] += g[0];
            } else {
              double s = 0.0;
              for (int l = 0; l < L; ++l) s += g[l];
              ha[0] += s;
            }
          } else {
            for (int l = 0; l < ow; ++l) ha[l] += g[l];
          }
        }
        break;
      }
      case OpK::kMeanLanes: {
        double* aa = aptr(op.a);
        if (wid(op.a) == 1) {
          aa[0] += g[0];
        } else {
          double s = g[0] / L;
          for (int l = 0; l < L; ++l) aa[l] += s;
        }
        break;
      }
      case OpK::kPinvSym:
        backward_pinv_sym(op);
        break;
      case OpK::kPinvGen:
        backward_pinv_gen(op);
        break;
      case OpK::kSoftplusJet: {
        const int m = op.dim;
        const int nc = 1 + m + m * (m + 1) / 2;
        const double* in[91];
        double* ina[91];
        const double* outa[91];
        for (int i = 0; i < nc; ++i) {
          NodeId id = ext_ids_[op.ext + i];
          in[i] = id == kNoNode ? nullptr : vptr(id);
          ina[i] = id == kNoNode ? nullptr : aptr(id);
          outa[i] = adjoint_.data() + slots_[op.out + i].ofs;
        }
        const double* sig = aux_.data() + op.aux;
        double gv[12], gbar[12];
        for (int l = 0; l < L; ++l) {
          double s = sig[l];
          double sp1 = s * (1.0 - s);
          double sp2 = sp1 * (1.0 - 2.0 * s);
          double vbar = outa[0][l] * s;
          for (int i = 0; i < m; ++i) {
            gv[i] = in[1 + i] ? in[1 + i][l] : 0.0;
            double og = outa[1 + i][l];
            gbar[i] = og * s;
            vbar += og * sp1 * gv[i];
          }
          int c = 1 + m;
          for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j, ++c) {
              double oh = outa[c][l];
              if (oh != 0.0) {
                double h = in[c] ? in[c][l] : 0.0;
                vbar += oh * (sp1 * h + sp2 * gv[i] * gv[j]);
                gbar[i] += oh * sp1 * gv[j];
                gbar[j] += oh * sp1 * gv[i];
                if (ina[c]) ina[c][l] += oh * s;
              }
            }
          if (ina[0]) ina[0][l] += vbar;
          for (int i = 0; i < m; ++i)
            if (ina[1 + i]) ina[1 + i][l] += gbar[i];
        }
        break;
      }
      case OpK::kPredictHead: {
        const int d = op.dim;
        const int terms = op.n_ext / d;
        const double l1bar = adjoint_[slots_[op.out + 2 * d].ofs] / L;
        for (int k = 0; k < d; ++k) {
          const double* pybar = adjoint_.data() + slots_[op.out + k].ofs;
          const double* pxbar = adjoint_.data() + slots_[op.out + d + k].ofs;
          for (int i = 0; i < terms; ++i) {
            NodeId tn = ext_ids_[op.ext + i * d + k];
            if (tn == kNoNode) continue;
            double wy = values_[slots_[op.a + i].ofs];
            double wx = values_[slots_[op.b + i].ofs];
            const Slot& ts = slots_[tn];
            auto sgn = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
            // sgn(w t) = sgn(w) sgn(t) and d|w t|/dw = sgn(w) |t|
            double sy0 = sgn(wy), sx0 = sgn(wx);
            double wybar = 0.0, wxbar = 0.0;
            if (ts.width == 1) {
              double tv = values_[ts.ofs];
              double gy = sum4(pybar, L), gx = sum4(pxbar, L);
              double st = sgn(tv);
              adjoint_[ts.ofs] +=
                  gy * wy + gx * wx + L * l1bar * st * (sy0 * wy + sx0 * wx);
              wybar = gy * tv + L * l1bar * sy0 * std::fabs(tv);
              wxbar = gx * tv + L * l1bar * sx0 * std::fabs(tv);
            } else {
              const double* tv = values_.data() + ts.ofs;
              double* tbar = adjoint_.data() + ts.ofs;
              double mix = l1bar * (sy0 * wy + sx0 * wx);
              for (int l = 0; l < L; ++l) {
                double st = (tv[l] > 0.0 ? 1.0 : (tv[l] < 0.0 ? -1.0 : 0.0));
                tbar[l] += pybar[l] * wy + pxbar[l] * wx + mix * st;
              }
              double sabs = l1bar == 0.0 ? 0.0 : sumabs4(tv, L);
              wybar = dot4(pybar, tv, L) + l1bar * sy0 * sabs;
              wxbar = dot4(pxbar, tv, L) + l1bar * sx0 * sabs;
            }
            adjoint_[slots_[op.a + i].ofs] += wybar;
            adjoint_[slots_[op.b + i].ofs] += wxbar;
          }
        }
        break;
      }
      case OpK::kDense: {
        const int n_out = op.dim, n_in = op.n_ext;
        const double* wrow = values_.data() + slots_[op.a].ofs;
        double* wbar = adjoint_.data() + slots_[op.a].ofs;
        if (ow == 1) {
          for (int u = 0; u < n_out; ++u) {
            double gu = adjoint_[slots_[op.out + u].ofs];
            if (op.b != kNoNode) adjoint_[slots_[op.b].ofs + u] += gu;
            for (int i = 0; i < n_in; ++i) {
              NodeId hn = ext_ids_[op.ext + i];
              if (hn == kNoNode) continue;
              wbar[u * n_in + i] += gu * values_[slots_[hn].ofs];
              adjoint_[slots_[hn].ofs] += gu * wrow[u * n_in + i];
            }
          }
          break;
        }
        if (dense_gsum_.size() < static_cast<size_t>(n_out)) dense_gsum_.resize(n_out);
        for (int u = 0; u < n_out; ++u) {
          double s = sum4(adjoint_.data() + slots_[op.out + u].ofs, L);
          dense_gsum_[u] = s;
          if (op.b != kNoNode) adjoint_[slots_[op.b].ofs + u] += s;
        }
        for (int i = 0; i < n_in; ++i) {
          NodeId hn = ext_ids_[op.ext + i];
          if (hn == kNoNode) continue;
          if (slots_[hn].width == 1) {
            double hv = values_[slots_[hn].ofs];
            double hbar = 0.0;
            for (int u = 0; u < n_out; ++u) {
              wbar[u * n_in + i] += dense_gsum_[u] * hv;
              hbar += dense_gsum_[u] * wrow[u * n_in + i];
            }
            adjoint_[slots_[hn].ofs] += hbar;
          }
        }
        // branchless inner loops over the precollected wide inputs
        int n_wide = 0;
        if (dense_ptr_.size() < static_cast<size_t>(n_in)) {
          dense_ptr_.resize(n_in);
          dense_aptr_.resize(n_in);
        }
        if (dense_widx_.size() < static_cast<size_t>(n_in)) dense_widx_.resize(n_in);
        for (int i = 0; i < n_in; ++i) {
          NodeId hn = ext_ids_[op.ext + i];
          if (hn == kNoNode || slots_[hn].width == 1) continue;
          dense_ptr_[n_wide] = values_.data() + slots_[hn].ofs;
          dense_aptr_[n_wide] = adjoint_.data() + slots_[hn].ofs;
          dense_widx_[n_wide++] = i;
        }
        if (dense_acc_.size() < static_cast<size_t>(n_wide) * kDenseChunk)
          dense_acc_.resize(static_cast<size_t>(n_wide) * kDenseChunk);
        for (int c0 = 0; c0 < L; c0 += kDenseChunk) {
          const int n = std::min(kDenseChunk, L - c0);
          std::fill_n(dense_acc_.begin(), static_cast<size_t>(n_wide) * kDenseChunk, 0.0);
          for (int u = 0; u < n_out; ++u) {
            const double* gu = adjoint_.data() + slots_[op.out + u].ofs + c0;
            const double* wr = wrow + static_cast<size_t>(u) * n_in;
            double* wbr = wbar + static_cast<size_t>(u) * n_in;
            for (int iw = 0; iw < n_wide; ++iw) {
              const int i = dense_widx_[iw];
              const double* hv = dense_ptr_[iw] + c0;
              double* hb = dense_acc_.data() + static_cast<size_t>(iw) * kDenseChunk;
              double w = wr[i];
              for (int l = 0; l < n; ++l) hb[l] += w * gu[l];
              wbr[i] += dot4(gu, hv, n);
            }
          }
          for (int iw = 0; iw < n_wide; ++iw) {
            double* ha = dense_aptr_[iw] + c0;
            const double* hb = dense_acc_.data() + static_cast<size_t>(iw) * kDenseChunk;
            for (int l = 0; l < n; ++l) ha[l] += hb[l];
          }
        }
        break;
      }
      case OpK::kLeaf:
        break;
    }
  }

  // ---- pinv kernels ------------------------------------------------------------
  //
  // Cutoff semantics follow pinv with rcond = 1e-10 relative to the largest
  // |eigenvalue| (or singular value); derivatives are exact away from the
  // cutoff, and the spectral-function adjoint below stays bounded at it.

  static constexpr double kPinvRcond = 1e-10;

  void forward_pinv_sym(const OpRec& op) {
    const int d = op.dim, t = d * (d + 1) / 2;
    const int w = slots_[op.out].width;
    double m[36], q[36], lam[6], p[36];
    for (int lane = 0; lane < w; ++lane) {
      int k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) {
          double v = value_at(ext_ids_[op.ext + k], lane);
          m[i * d + j] = v;
          m[j * d + i] = v;
        }
      jacobi_eigh(m, d, lam, q);
      double lmax = 0.0;
      for (int i = 0; i < d; ++i) lmax = std::max(lmax, std::fabs(lam[i]));
      double cut = kPinvRcond * lmax;
      for (int i = 0; i < d * d; ++i) p[i] = 0.0;
      for (int e = 0; e < d; ++e) {
        if (std::fabs(lam[e]) <= cut) continue;
        double ge = 1.0 / lam[e];
        for (int r = 0; r < d; ++r)
          for (int c = 0; c < d; ++c) p[r * d + c] += ge * q[r * d + e] * q[c * d + e];
      }
      k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) values_[slots_[op.out + k].ofs + lane] = p[i * d + j];
      double* aux = aux_.data() + op.aux + static_cast<int64_t>(lane) * (d * d + d);
      for (int i = 0; i < d * d; ++i) aux[i] = q[i];
      for (int i = 0; i < d; ++i) aux[d * d + i] = lam[i];
    }
    (void)t;
  }

  void backward_pinv_sym(const OpRec& op) {
    const int d = op.dim, t = d * (d + 1) / 2;
    const int w = slots_[op.out].width;
    double pbar[36], b[36], mbar[36], kmat[36], tmp[36];
    for (int lane = 0; lane < w; ++lane) {
      const double* aux = aux_.data() + op.aux + static_cast<int64_t>(lane) * (d * d + d);
      const double* q = aux;
      const double* lam = aux + d * d;
      double lmax = 0.0;
      for (int i = 0; i < d; ++i) lmax = std::max(lmax, std::fabs(lam[i]));
      double cut = kPinvRcond * lmax;
      auto gfun = [&](double l) { return std::fabs(l) > cut ? 1.0 / l : 0.0; };
      auto gder = [&](double l) { return std::fabs(l) > cut ? -1.0 / (l * l) : 0.0; };

      // tied packed storage: split the slot adjoint across the two mirrored entries
      int k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) {
          double a = adjoint_[slots_[op.out + k].ofs + lane];
          if (i == j) {
            pbar[i * d + i] = a;
          } else {
            pbar[i * d + j] = 0.5 * a;
            pbar[j * d + i] = 0.5 * a;
          }
        }
      // B = Q^T Pbar Q
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          double s = 0.0;
          for (int x = 0; x < d; ++x) s += q[x * d + r] * pbar[x * d + c];
          tmp[r * d + c] = s;
        }
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          double s = 0.0;
          for (int x = 0; x < d; ++x) s += tmp[r * d + x] * q[x * d + c];
          b[r * d + c] = s;
        }
      // K: divided differences of the spectral function
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          double lr = lam[r], lc = lam[c];
          kmat[r * d + c] = (std::fabs(lr - lc) > 1e-12 * std::max(1.0, lmax))
                                ? (gfun(lr) - gfun(lc)) / (lr - lc)
                                : gder(lr);
        }
      for (int i = 0; i < d * d; ++i) b[i] *= kmat[i];
      // Mbar = Q (K o B) Q^T
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          double s = 0.0;
          for (int x = 0; x < d; ++x) s += q[r * d + x] * b[x * d + c];
          tmp[r * d + c] = s;
        }
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          double s = 0.0;
          for (int x = 0; x < d; ++x) s += tmp[r * d + x] * q[c * d + x];
          mbar[r * d + c] = s;
        }
      k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) {
          NodeId in = ext_ids_[op.ext + k];
          double contrib = (i == j) ? mbar[i * d + i] : mbar[i * d + j] + mbar[j * d + i];
          const Slot& s = slots_[in];
          adjoint_[s.ofs + (s.width == 1 ? 0 : lane)] += contrib;
        }
    }
    (void)t;
  }

  void forward_pinv_gen(const OpRec& op) {
    const int d = op.dim;
    const int w = slots_[op.out].width;
    double m[36], y[36];
    for (int lane = 0; lane < w; ++lane) {
      for (int i = 0; i < d * d; ++i) m[i] = value_at(ext_ids_[op.ext + i], lane);
      ::mass::pinv_gen(m, d, y, kPinvRcond);
      for (int i = 0; i < d * d; ++i) values_[slots_[op.out + i].ofs + lane] = y[i];
    }
  }

  void backward_pinv_gen(const OpRec& op) {
    // Abar = -Y' Ybar Y' + (I - A Y) Ybar' Y Y' + Y' Y Ybar' (I - Y A),
    // the adjoint of the Moore-Penrose differential at locally constant rank.
    const int d = op.dim;
    const int w = slots_[op.out].width;
    double a[36], y[36], ybar[36], abar[36];
    double iay[36], iya[36], t1[36], t2[36], t3[36];
    auto matmul = [&](const double* x, const double* z, double* r, bool tx, bool tz) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          double s = 0.0;
          for (int k = 0; k < d; ++k)
            s += (tx ? x[k * d + i] : x[i * d + k]) * (tz ? z[j * d + k] : z[k * d + j]);
          r[i * d + j] = s;
        }
    };
    for (int lane = 0; lane < w; ++lane) {
      for (int i = 0; i < d * d; ++i) {
        a[i] = value_at(ext_ids_[op.ext + i], lane);
        y[i] = values_[slots_[op.out + i].ofs + lane];
        ybar[i] = adjoint_[slots_[op.out + i].ofs + lane];
      }
      matmul(a, y, iay, false, false);
      matmul(y, a, iya, false, false);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          iay[i * d + j] = (i == j ? 1.0 : 0.0) - iay[i * d + j];
          iya[i * d + j] = (i == j ? 1.0 : 0.0) - iya[i * d + j];
        }
      // term 1: -Y^T Ybar Y^T
      matmul(y, ybar, t1, true, false);
      matmul(t1, y, abar, false, true);
      for (int i = 0; i < d * d; ++i) abar[i] = -abar[i];
      // term 2: (I - A Y) Ybar^T Y Y^T
      matmul(iay, ybar, t1, false, true);
      matmul(y, y, t2, false, true);
      matmul(t1, t2, t3, false, false);
      for (int i = 0; i < d * d; ++i) abar[i] += t3[i];
      // term 3: Y^T Y Ybar^T (I - Y A)
      matmul(y, y, t1, true, false);
      matmul(t1, ybar, t2, false, true);
      matmul(t2, iya, t3, false, false);
      for (int i = 0; i < d * d; ++i) abar[i] += t3[i];
      for (int i = 0; i < d * d; ++i) {
        NodeId in = ext_ids_[op.ext + i];
        const Slot& s = slots_[in];
        adjoint_[s.ofs + (s.width == 1 ? 0 : lane)] += abar[i];
      }
    }
  }

  int lanes_;
  std::vector<Slot> slots_;
  std::vector<OpRec> ops_;
  std::vector<NodeId> ext_ids_;
  std::vector<double> aux_;
  std::vector<double> values_;
  std::vector<double> adjoint_;
  NodeId param_base_ = kNoNode;
  int param_count_ = 0;
  // scratch for the fused dot/dense kernels
  static constexpr int kDenseChunk = 64;
  std::vector<double> dot_w_, dot_wbar_;
  std::vector<const double*> dot_h_;
  std::vector<double*> dot_ha_;
  std::vector<const double*> dense_ptr_;
  std::vector<double*> dense_aptr_;
  std::vector<double> dense_acc_, dense_base_, dense_gsum_;
  std::vector<int> dense_widx_;
};

}  // namespace mass
