#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mass/jet.hpp"
#include "mass/model.hpp"
#include "mass/rng.hpp"

using namespace mass;
using mass::testing::rel_err;

namespace {

// evaluate the production net's Jet2 at a single point
Jet2 net_jet_at(const NetShape& shape, std::span<const double> theta, std::span<const double> x,
                std::span<const double> y) {
  Tape t(1);
  NodeId base = t.attach_params(theta);
  std::vector<NodeId> xids, yids;
  for (double v : x) xids.push_back(t.leaf(v));
  for (double v : y) yids.push_back(t.leaf(v));
  NodeId one = t.leaf(1.0);
  auto jets = augment_jets(t, xids, yids, one);
  JetNodes s = eval_net_jet(t, shape, base, jets);
  return read_jet2(t, s, 0);
}

}  // namespace

TEST_CASE("constant net has zero derivatives", "[jet]") {
  NetShape shape{1, 4, 20};
  std::vector<double> theta(shape.param_count(), 0.0);
  theta[shape.bias_ofs(shape.hidden)] = 3.25;  // output bias only
  Jet2 j = net_jet_at(shape, theta, std::vector<double>{0.7}, std::vector<double>{-0.4});
  REQUIRE(j.value == 3.25);
  for (double g : j.grad) REQUIRE(g == 0.0);
  for (double h : j.hess) REQUIRE(h == 0.0);
}

TEST_CASE("quadratic fixture S = x^2 + y^2 at (1,2)", "[jet]") {
  Tape t(1);
  NodeId x = t.leaf(1.0), y = t.leaf(2.0);
  double a[4] = {2, 0, 0, 2};
  double b[2] = {0, 0};
  JetNodes s = mass::testing::quadratic_scalar_jet(t, a, b, 0.0, std::vector<NodeId>{x},
                                                   std::vector<NodeId>{y});
  Jet2 j = read_jet2(t, s, 0);
  REQUIRE(j.value == 5.0);
  REQUIRE(j.grad[0] == 2.0);
  REQUIRE(j.grad[1] == 4.0);
  REQUIRE(j.hess[0] == 2.0);
  REQUIRE(j.hess[1] == 0.0);
  REQUIRE(j.hess[2] == 0.0);
  REQUIRE(j.hess[3] == 2.0);
}

TEST_CASE("random nets match central finite differences", "[jet]") {
  Rng rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    int d = 1 + trial % 2;
    NetShape shape{d, 2, 8};
    std::vector<double> theta(shape.param_count());
    Rng init(100 + trial);
    init_net_params(shape, theta, init);

    std::vector<double> pt(2 * d);
    for (double& v : pt) v = rng.uniform(-1, 1);
    auto value_at = [&](std::span<const double> p) {
      return net_value(shape, theta, p.subspan(0, d), p.subspan(d, d));
    };

    Jet2 j = net_jet_at(shape, theta, std::span(pt).subspan(0, d), std::span(pt).subspan(d, d));
    REQUIRE_THAT(j.value, Catch::Matchers::WithinAbs(value_at(pt), 1e-14));

    const double h = 1e-4;
    for (int i = 0; i < 2 * d; ++i) {
      double fd = mass::testing::central_diff(value_at, pt, i, h);
      REQUIRE(rel_err(j.grad[i], fd) < 1e-5);
    }
    for (int i = 0; i < 2 * d; ++i)
      for (int k = 0; k < 2 * d; ++k) {
        double fd;
        if (i == k) {
          std::vector<double> pp = pt, pm = pt;
          pp[i] += h;
          pm[i] -= h;
          fd = (value_at(pp) - 2 * value_at(pt) + value_at(pm)) / (h * h);
        } else {
          std::vector<double> a = pt, b = pt, c = pt, e = pt;
          a[i] += h, a[k] += h;
          b[i] += h, b[k] -= h;
          c[i] -= h, c[k] += h;
          e[i] -= h, e[k] -= h;
          fd = (value_at(a) - value_at(b) - value_at(c) + value_at(e)) / (4 * h * h);
        }
        REQUIRE(rel_err(j.hess[i * 2 * d + k], fd) < 1e-5);
      }
  }
}

TEST_CASE("hessian block symmetry is exact", "[jet]") {
  NetShape shape{2, 2, 6};
  std::vector<double> theta(shape.param_count());
  Rng init(9);
  init_net_params(shape, theta, init);
  Jet2 j = net_jet_at(shape, theta, std::vector<double>{0.3, -0.8}, std::vector<double>{0.5, 0.1});
  const int m = 4;
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < m; ++k) REQUIRE(j.hess[i * m + k] == j.hess[k * m + i]);
  // S_xy == transpose(S_yx) by the same token
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 2; ++k) REQUIRE(j.sxy(i, k) == j.hess[(2 + k) * m + i]);
}

TEST_CASE("fused softplus jet matches the elementary composition", "[jet]") {
  Rng rng(77);
  for (int m : {2, 4}) {
    Tape t(8);
    const int tri_n = m * (m + 1) / 2;
    // random dense jet built from batch leaves
    JetNodes z = JetNodes::zero(m);
    std::vector<double> col(8);
    auto fresh = [&] {
      for (double& v : col) v = rng.uniform(-2, 2);
      return t.leaf_batch(col);
    };
    z.val = fresh();
    for (int i = 0; i < m; ++i) z.g[i] = fresh();
    for (int i = 0; i < tri_n; ++i) z.h[i] = fresh();

    JetNodes composed = jet_softplus(t, z);
    std::vector<NodeId> packed(1 + m + tri_n);
    packed[0] = z.val;
    for (int i = 0; i < m; ++i) packed[1 + i] = z.g[i];
    for (int i = 0; i < tri_n; ++i) packed[1 + m + i] = z.h[i];
    NodeId first = t.softplus_jet(packed, m);

    for (int l = 0; l < 8; ++l) {
      REQUIRE_THAT(t.value_at(first, l),
                   Catch::Matchers::WithinRel(t.value_at(composed.val, l), 1e-14));
      for (int i = 0; i < m; ++i)
        REQUIRE_THAT(t.value_at(first + 1 + i, l),
                     Catch::Matchers::WithinRel(t.value_at(composed.g[i], l), 1e-14));
      for (int i = 0; i < tri_n; ++i)
        REQUIRE_THAT(t.value_at(first + 1 + m + i, l) - t.value_at(composed.h[i], l),
                     Catch::Matchers::WithinAbs(0.0, 1e-14));
    }

    // gradients through both routes agree
    std::vector<NodeId> parts;
    for (int i = 0; i < 1 + m + tri_n; ++i) parts.push_back(t.mul(first + i, first + i));
    NodeId loss_fused = t.mean_lanes(t.sum(parts));
    parts.clear();
    parts.push_back(t.mul(composed.val, composed.val));
    for (int i = 0; i < m; ++i) parts.push_back(t.mul(composed.g[i], composed.g[i]));
    for (int i = 0; i < tri_n; ++i) parts.push_back(t.mul(composed.h[i], composed.h[i]));
    NodeId loss_composed = t.mean_lanes(t.sum(parts));

    t.backward(loss_fused);
    std::vector<double> adj_fused, adj_composed;
    for (NodeId n : packed)
      for (int l = 0; l < 8; ++l) adj_fused.push_back(t.adjoint_at(n, l));
    t.backward(loss_composed);
    for (NodeId n : packed)
      for (int l = 0; l < 8; ++l) adj_composed.push_back(t.adjoint_at(n, l));
    REQUIRE(adj_fused.size() == adj_composed.size());
    for (size_t i = 0; i < adj_fused.size(); ++i)
      REQUIRE_THAT(adj_fused[i], Catch::Matchers::WithinAbs(adj_composed[i], 1e-12));
  }
}

TEST_CASE("parameter gradients flow through jet coefficients", "[jet]") {
  NetShape shape{1, 2, 6};
  std::vector<double> theta(shape.param_count());
  Rng init(17);
  init_net_params(shape, theta, init);
  const double px = 0.4, py = -0.6;

  // loss = S_xx(point)^2 + 0.5 * S_xy(point) + S(point) * S_y(point)
  auto loss_of = [&](std::span<const double> q) {
    Tape t(1);
    NodeId base = t.attach_params(q);
    std::vector<NodeId> xids = {t.leaf(px)}, yids = {t.leaf(py)};
    auto jets = augment_jets(t, xids, yids, t.leaf(1.0));
    JetNodes s = eval_net_jet(t, shape, base, jets);
    NodeId sxx = s.h[tri_index(2, 0, 0)];
    NodeId sxy = s.h[tri_index(2, 0, 1)];
    NodeId loss = t.add(t.mul(sxx, sxx), t.add(t.scale(sxy, 0.5), t.mul(s.val, s.g[1])));
    t.backward(loss);
    return std::make_pair(t.value1(loss),
                          std::vector<double>(t.param_adjoints().begin(), t.param_adjoints().end()));
  };

  auto [val, grad] = loss_of(theta);
  Rng pick(3);
  for (int rep = 0; rep < 25; ++rep) {
    int i = pick.index(static_cast<int>(theta.size()));
    double fd = mass::testing::central_diff(
        [&](std::span<const double> q) { return loss_of(q).first; }, theta, i, 1e-5);
    REQUIRE(rel_err(grad[i], fd) < 1e-5);
  }
}
