#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "helpers.hpp"
#include "mass/tape.hpp"

using namespace mass;
using mass::testing::rel_err;

TEST_CASE("scalar and batch arithmetic forward", "[tape]") {
  Tape t(4);
  std::vector<double> xs = {1, 2, 3, 4};
  NodeId x = t.leaf_batch(xs);
  NodeId c = t.leaf(10.0);
  NodeId s = t.add(x, c);
  NodeId m = t.mul(s, x);
  auto v = t.values(m);
  REQUIRE(v[0] == 11.0);
  REQUIRE(v[3] == 56.0);
  NodeId mean = t.mean_lanes(m);
  REQUIRE_THAT(t.value1(mean), Catch::Matchers::WithinAbs((11 + 24 + 39 + 56) / 4.0, 1e-15));
}

TEST_CASE("parameter gradient of sum of squares is 2 theta", "[tape]") {
  std::vector<double> theta = {0.5, -1.25, 2.0, 3.5};
  Tape t(1);
  NodeId base = t.attach_params(theta);
  std::vector<NodeId> sq;
  for (int i = 0; i < 4; ++i) sq.push_back(t.mul(base + i, base + i));
  NodeId loss = t.sum(sq);
  t.backward(loss);
  auto g = t.param_adjoints();
  for (int i = 0; i < 4; ++i)
    REQUIRE_THAT(g[i], Catch::Matchers::WithinAbs(2 * theta[i], 1e-15));
}

TEST_CASE("loss independent of parameters gives zero gradient", "[tape]") {
  std::vector<double> theta = {1.0, 2.0};
  Tape t(4);
  t.attach_params(theta);
  std::vector<double> xs = {1, 2, 3, 4};
  NodeId x = t.leaf_batch(xs);
  NodeId loss = t.mean_lanes(t.mul(x, x));
  t.backward(loss);
  for (double g : t.param_adjoints()) REQUIRE(g == 0.0);
}

TEST_CASE("gradients match finite differences across the op set", "[tape]") {
  // exercises add/sub/mul/div/neg/abs/scale/softplus/sigmoid/dot/sum/mean
  auto loss_fn = [](std::span<const double> p) {
    Tape t(3);
    NodeId base = t.attach_params(p);
    std::vector<double> xs = {0.3, -0.7, 1.1};
    NodeId x = t.leaf_batch(xs);
    NodeId a = t.mul(base + 0, x);
    NodeId b = t.add(a, base + 1);
    NodeId c = t.softplus(b);
    NodeId d = t.sigmoid(t.sub(c, t.scale(x, 0.25)));
    NodeId e = t.div(d, t.add_const(t.mul(base + 2, base + 2), 1.5));
    std::vector<NodeId> ws = {base + 0, base + 1};
    std::vector<NodeId> hs = {e, c};
    NodeId f = t.dot(ws, hs, base + 3);
    NodeId g = t.abs(t.neg(f));
    return t.value1(t.mean_lanes(t.mul(g, g)));
  };
  std::vector<double> p = {0.8, -0.4, 0.6, 0.2};

  Tape t(3);
  NodeId base = t.attach_params(p);
  std::vector<double> xs = {0.3, -0.7, 1.1};
  NodeId x = t.leaf_batch(xs);
  NodeId a = t.mul(base + 0, x);
  NodeId b = t.add(a, base + 1);
  NodeId c = t.softplus(b);
  NodeId d = t.sigmoid(t.sub(c, t.scale(x, 0.25)));
  NodeId e = t.div(d, t.add_const(t.mul(base + 2, base + 2), 1.5));
  std::vector<NodeId> ws = {base + 0, base + 1};
  std::vector<NodeId> hs = {e, c};
  NodeId f = t.dot(ws, hs, base + 3);
  NodeId g = t.abs(t.neg(f));
  NodeId loss = t.mean_lanes(t.mul(g, g));
  t.backward(loss);
  auto grad = t.param_adjoints();

  for (int i = 0; i < 4; ++i) {
    double fd = mass::testing::central_diff(
        [&](std::span<const double> q) { return loss_fn(q); }, p, i, 1e-6);
    REQUIRE(rel_err(grad[i], fd) < 1e-7);
  }
}

TEST_CASE("gradient linearity", "[tape]") {
  std::vector<double> theta = {0.7, -1.3, 0.4};
  auto grad_of = [&](double wa, double wb) {
    Tape t(1);
    NodeId base = t.attach_params(theta);
    NodeId l1 = t.mul(base + 0, base + 1);
    NodeId l2 = t.softplus(t.add(base + 1, base + 2));
    NodeId loss = t.add(t.scale(l1, wa), t.scale(l2, wb));
    t.backward(loss);
    return std::vector<double>(t.param_adjoints().begin(), t.param_adjoints().end());
  };
  auto g1 = grad_of(1, 0), g2 = grad_of(0, 1), gc = grad_of(2.5, -0.75);
  for (int i = 0; i < 3; ++i)
    REQUIRE_THAT(gc[i], Catch::Matchers::WithinAbs(2.5 * g1[i] - 0.75 * g2[i], 1e-12));
}

TEST_CASE("replay determinism is bitwise", "[tape]") {
  std::vector<double> theta = {0.2, 0.9};
  Tape t(8);
  NodeId base = t.attach_params(theta);
  std::vector<double> xs(8);
  for (int i = 0; i < 8; ++i) xs[i] = 0.1 * i - 0.3;
  NodeId x = t.leaf_batch(xs);
  NodeId z = t.softplus(t.add(t.mul(base + 0, x), base + 1));
  NodeId loss = t.mean_lanes(t.mul(z, z));

  t.backward(loss);
  std::vector<double> g1(t.param_adjoints().begin(), t.param_adjoints().end());
  double v1 = t.value1(loss);

  t.forward_all();
  t.backward(loss);
  std::vector<double> g2(t.param_adjoints().begin(), t.param_adjoints().end());

  REQUIRE(v1 == t.value1(loss));
  REQUIRE(std::memcmp(g1.data(), g2.data(), sizeof(double) * 2) == 0);
}

TEST_CASE("invalid loss node raises TapeMismatch", "[tape]") {
  Tape t(4);
  std::vector<double> xs = {1, 2, 3, 4};
  NodeId x = t.leaf_batch(xs);
  REQUIRE_THROWS_AS(t.backward(x + 57), TapeMismatch);
  REQUIRE_THROWS_AS(t.backward(x), TapeMismatch);  // batch node is not a scalar loss
}

TEST_CASE("pinv_sym forward matches hand values", "[tape]") {
  Tape t(1);
  NodeId m = t.leaf(2.0);
  auto p = t.pinv_sym(std::vector<NodeId>{m}, 1);
  REQUIRE_THAT(t.value1(p[0]), Catch::Matchers::WithinAbs(0.5, 1e-15));

  NodeId z = t.leaf(0.0);
  auto pz = t.pinv_sym(std::vector<NodeId>{z}, 1);
  REQUIRE(t.value1(pz[0]) == 0.0);

  // diag(5, 1) -> diag(0.2, 1.0)
  std::vector<NodeId> packed = {t.leaf(5.0), t.leaf(0.0), t.leaf(1.0)};
  auto p2 = t.pinv_sym(packed, 2);
  REQUIRE_THAT(t.value1(p2[0]), Catch::Matchers::WithinAbs(0.2, 1e-14));
  REQUIRE_THAT(t.value1(p2[1]), Catch::Matchers::WithinAbs(0.0, 1e-14));
  REQUIRE_THAT(t.value1(p2[2]), Catch::Matchers::WithinAbs(1.0, 1e-14));
}

TEST_CASE("pinv_sym parameter gradients match finite differences", "[tape]") {
  Rng rng(21);
  for (int d = 1; d <= 3; ++d) {
    int tn = d * (d + 1) / 2;
    std::vector<double> p(tn + 1);
    for (double& v : p) v = rng.uniform(-1.5, 1.5);
    p[tn] = 0.3;  // stabilizer-like shift on the diagonal

    auto loss_fn = [&](std::span<const double> q) {
      Tape t(1);
      NodeId base = t.attach_params(q);
      std::vector<NodeId> packed;
      int k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k)
          packed.push_back(i == j ? t.add(base + k, base + tn) : NodeId(base + k));
      auto pv = t.pinv_sym(packed, d);
      std::vector<NodeId> sq;
      for (NodeId n : pv) sq.push_back(t.mul(n, n));
      return t.value1(t.sum(sq));
    };

    Tape t(1);
    NodeId base = t.attach_params(p);
    std::vector<NodeId> packed;
    int k = 0;
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j, ++k)
        packed.push_back(i == j ? t.add(base + k, base + tn) : NodeId(base + k));
    auto pv = t.pinv_sym(packed, d);
    std::vector<NodeId> sq;
    for (NodeId n : pv) sq.push_back(t.mul(n, n));
    NodeId loss = t.sum(sq);
    t.backward(loss);
    auto grad = t.param_adjoints();

    for (int i = 0; i <= tn; ++i) {
      double fd = mass::testing::central_diff(loss_fn, p, i, 1e-6);
      REQUIRE(rel_err(grad[i], fd) < 1e-6);
    }
  }
}

TEST_CASE("pinv_gen parameter gradients match finite differences", "[tape]") {
  Rng rng(33);
  for (int d = 1; d <= 3; ++d) {
    std::vector<double> p(d * d);
    for (double& v : p) v = rng.uniform(-1.5, 1.5);

    auto loss_val = [&](std::span<const double> q) {
      Tape t(1);
      NodeId base = t.attach_params(q);
      std::vector<NodeId> entries;
      for (int i = 0; i < d * d; ++i) entries.push_back(base + i);
      auto pv = t.pinv_gen(entries, d);
      std::vector<NodeId> sq;
      for (size_t i = 0; i < pv.size(); ++i) sq.push_back(t.scale(t.mul(pv[i], pv[i]), 1.0 + 0.1 * i));
      return t.value1(t.sum(sq));
    };

    Tape t(1);
    NodeId base = t.attach_params(p);
    std::vector<NodeId> entries;
    for (int i = 0; i < d * d; ++i) entries.push_back(base + i);
    auto pv = t.pinv_gen(entries, d);
    std::vector<NodeId> sq;
    for (size_t i = 0; i < pv.size(); ++i) sq.push_back(t.scale(t.mul(pv[i], pv[i]), 1.0 + 0.1 * i));
    NodeId loss = t.sum(sq);
    t.backward(loss);
    auto grad = t.param_adjoints();

    for (int i = 0; i < d * d; ++i) {
      double fd = mass::testing::central_diff(loss_val, p, i, 1e-6);
      REQUIRE(rel_err(grad[i], fd) < 1e-6);
    }
  }
}

TEST_CASE("pinv cutoff keeps projector structure", "[tape][model]") {
  // M + bI engineered to be exactly singular: eigenvalues {3+b, -b+b=0... }
  // use M = Q diag(2, -0.4) Q^T with b = 0.4 so M + bI has eigenvalues {2.4, 0}
  double c = std::cos(0.7), s = std::sin(0.7);
  double q[4] = {c, -s, s, c};
  double lam[2] = {2.0, -0.4};
  double m[4];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      m[i * 2 + j] = q[i * 2 + 0] * lam[0] * q[j * 2 + 0] + q[i * 2 + 1] * lam[1] * q[j * 2 + 1];

  Tape t(1);
  std::vector<NodeId> packed = {t.add(t.leaf(m[0]), t.leaf(0.4)), t.leaf(m[1]),
                                t.add(t.leaf(m[3]), t.leaf(0.4))};
  auto pv = t.pinv_sym(packed, 2);
  double pm[4] = {t.value1(pv[0]), t.value1(pv[1]), t.value1(pv[1]), t.value1(pv[2])};
  double mb[4] = {m[0] + 0.4, m[1], m[2], m[3] + 0.4};
  // P = pinv(M+bI)(M+bI) should be the projector onto the retained eigenspace
  double proj[4] = {0, 0, 0, 0}, proj2[4] = {0, 0, 0, 0};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) proj[i * 2 + j] += pm[i * 2 + k] * mb[k * 2 + j];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) proj2[i * 2 + j] += proj[i * 2 + k] * proj[k * 2 + j];
  double diff = 0;
  for (int i = 0; i < 4; ++i) diff = std::max(diff, std::fabs(proj2[i] - proj[i]));
  REQUIRE(diff < 1e-8);
}
