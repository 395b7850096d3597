#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mdat/distloss.hpp"
#include "mdat/graph.hpp"
#include "mdat/rng.hpp"
#include "mdat/tensor.hpp"

using namespace mdat;

namespace {

Tensor rnd(Rng& rng, std::vector<int> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor identity(int d) {
  Tensor t({d, d});
  for (int i = 0; i < d; ++i) t.data[i * d + i] = 1.0;
  return t;
}

Tensor random_spd(int d, Rng& rng, double scale) {
  const Tensor m = rnd(rng, {d, d}, -1, 1);
  Tensor s({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += m.data[i * d + k] * m.data[j * d + k];
      s.data[i * d + j] = scale * (acc / d + (i == j ? 0.3 : 0.0));
    }
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += a.data[i * k + l] * b.data[l * m + j];
      out.data[i * m + j] = acc;
    }
  return out;
}

Tensor transpose(const Tensor& a) {
  const int n = a.shape[0], m = a.shape[1];
  Tensor out({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.data[j * n + i] = a.data[i * m + j];
  return out;
}

double frob_sq_diff(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace

TEST_CASE("descriptor statistics on hand-built matrices") {
  // four corners of a square: mean at the center, unit covariance
  const Tensor corners({4, 2}, {0, 0, 2, 0, 0, 2, 2, 2});
  Tensor mu, sigma;
  descriptor_stats(corners, mu, sigma);
  REQUIRE(mu.shape == std::vector<int>{2});
  REQUIRE(sigma.shape == std::vector<int>{2, 2});
  CHECK(mu.data[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(mu.data[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sigma.data[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sigma.data[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(sigma.data[2] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(sigma.data[3] == doctest::Approx(1.0).epsilon(1e-15));

  // identical rows have zero covariance
  const Tensor flat({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  descriptor_stats(flat, mu, sigma);
  for (double v : sigma.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(mu.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("covariance is translation invariant") {
  Rng rng(404);
  const Tensor desc = rnd(rng, {12, 5}, -1, 1);
  Tensor shifted = desc;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 5; ++c) shifted.data[r * 5 + c] += 3.7;
  Tensor mu_a, sg_a, mu_b, sg_b;
  descriptor_stats(desc, mu_a, sg_a);
  descriptor_stats(shifted, mu_b, sg_b);
  for (std::size_t i = 0; i < sg_a.numel(); ++i)
    CHECK(sg_a.data[i] == doctest::Approx(sg_b.data[i]).epsilon(1e-12));
  for (int c = 0; c < 5; ++c) CHECK(mu_b.data[c] == doctest::Approx(mu_a.data[c] + 3.7).epsilon(1e-12));
}

TEST_CASE("descriptor statistics need at least two rows") {
  Tensor mu, sigma;
  CHECK_THROWS_AS(descriptor_stats(Tensor({1, 4}, {1, 2, 3, 4}), mu, sigma), std::invalid_argument);
}

TEST_CASE("pooled covariance of isotropic noise is near-spherical") {
  Rng rng(1234);
  const int n = 10000, d = 3;
  const double sd = 0.5;
  Tensor rows({n, d});
  for (auto& v : rows.data) v = sd * rng.normal();
  Tensor sigma_s, sigma_s_inv;
  task_covariance({&rows}, 1e-4, sigma_s, sigma_s_inv);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const double v = sigma_s.data[i * d + j];
      if (i == j)
        CHECK(v == doctest::Approx(sd * sd).epsilon(0.05));
      else
        CHECK(std::abs(v) < 0.05 * sd * sd);
    }
}

TEST_CASE("pooling ignores how rows are grouped into tensors") {
  Rng rng(5);
  const Tensor a = rnd(rng, {6, 4}, -1, 1);
  const Tensor b = rnd(rng, {9, 4}, -1, 1);
  Tensor joint({15, 4});
  std::copy(a.data.begin(), a.data.end(), joint.data.begin());
  std::copy(b.data.begin(), b.data.end(), joint.data.begin() + a.numel());

  Tensor s1, i1, s2, i2;
  task_covariance({&a, &b}, 1e-3, s1, i1);
  task_covariance({&joint}, 1e-3, s2, i2);
  for (std::size_t i = 0; i < s1.numel(); ++i)
    CHECK(s1.data[i] == doctest::Approx(s2.data[i]).epsilon(1e-12));

  // duplicating a tensor duplicates its rows, which leaves the pooled
  // moments unchanged
  Tensor s3, i3;
  task_covariance({&a, &a}, 1e-3, s3, i3);
  Tensor s4, i4;
  task_covariance({&a}, 1e-3, s4, i4);
  for (std::size_t i = 0; i < s3.numel(); ++i)
    CHECK(s3.data[i] == doctest::Approx(s4.data[i]).epsilon(1e-12));
}

TEST_CASE("the ridge inverse actually inverts") {
  Rng rng(77);
  const Tensor rows = rnd(rng, {40, 6}, -1, 1);
  const double rho = 1e-3;
  Tensor sigma_s, sigma_s_inv;
  task_covariance({&rows}, rho, sigma_s, sigma_s_inv);

  Tensor ridged = sigma_s;
  for (int i = 0; i < 6; ++i) ridged.data[i * 6 + i] += rho;
  const Tensor prod = matmul(sigma_s_inv, ridged);
  CHECK(std::sqrt(frob_sq_diff(prod, identity(6))) < 1e-6);

  // a huge ridge swamps the data term
  Tensor s2, i2;
  task_covariance({&rows}, 1e6, s2, i2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(std::abs(i2.data[i * 6 + j] - (i == j ? 1e-6 : 0.0)) < 1e-11);
}

TEST_CASE("symmetric_inverse matches the closed 2x2 form and rejects non-PD input") {
  const Tensor m({2, 2}, {4, 1, 1, 3});
  const Tensor inv = symmetric_inverse(m, 0.0);
  const double det = 11.0;
  CHECK(inv.data[0] == doctest::Approx(3.0 / det).epsilon(1e-12));
  CHECK(inv.data[1] == doctest::Approx(-1.0 / det).epsilon(1e-12));
  CHECK(inv.data[2] == doctest::Approx(-1.0 / det).epsilon(1e-12));
  CHECK(inv.data[3] == doctest::Approx(4.0 / det).epsilon(1e-12));

  const Tensor indefinite({2, 2}, {1, 0, 0, -1});
  CHECK_THROWS_AS(symmetric_inverse(indefinite, 0.0), std::runtime_error);
}

TEST_CASE("the trace form against the whitened Frobenius oracle") {
  Rng rng(0x7e57);
  for (const int d : {2, 4, 8, 16}) {
    for (int t = 0; t < 10; ++t) {
      const Tensor s1 = random_spd(d, rng, 1.0);
      const Tensor s2 = random_spd(d, rng, 1.0);
      const Tensor sigma = random_spd(d, rng, 1.0);
      const double lhs = trace_form(s1, s2, symmetric_inverse(sigma, 0.0));
      const double rhs = trace_identity_oracle(s1, s2, sigma);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-8));
    }
  }
}

TEST_CASE("oracle special cases") {
  Rng rng(31);
  const Tensor s1 = random_spd(3, rng, 1.0);
  const Tensor s2 = random_spd(3, rng, 1.0);
  // whitening by the identity leaves the Frobenius distance alone
  CHECK(trace_identity_oracle(s1, s2, identity(3)) ==
        doctest::Approx(frob_sq_diff(s1, s2)).epsilon(1e-10));
  CHECK(trace_identity_oracle(s1, s1, random_spd(3, rng, 1.0)) ==
        doctest::Approx(0.0).epsilon(1e-12));
  const Tensor indefinite({2, 2}, {1, 0, 0, -1});
  CHECK_THROWS_AS(trace_identity_oracle(identity(2), identity(2), indefinite),
                  std::invalid_argument);
}

TEST_CASE("task-conditioned distance: zero at equality, assembled from its parts") {
  Rng rng(88);
  const int d = 8;
  TaskStats st;
  const Tensor desc = rnd(rng, {20, d}, -1, 1);
  const Tensor desc_adv = rnd(rng, {20, d}, -1, 1);
  descriptor_stats(desc, st.mu, st.sigma);
  descriptor_stats(desc_adv, st.mu_adv, st.sigma_adv);
  st.sigma_s = random_spd(d, rng, 1.0);
  st.sigma_s_inv = symmetric_inverse(st.sigma_s, 0.0);

  // identical clean and adversarial statistics
  TaskStats same = st;
  same.mu_adv = st.mu;
  same.sigma_adv = st.sigma;
  CHECK(tcd_distance(same) == doctest::Approx(0.0).epsilon(1e-12));

  // manual Mahalanobis term plus the trace form
  double maha = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      maha += (st.mu.data[i] - st.mu_adv.data[i]) * st.sigma_s_inv.data[i * d + j] *
              (st.mu.data[j] - st.mu_adv.data[j]);
  const double expected = maha + trace_form(st.sigma, st.sigma_adv, st.sigma_s_inv);
  CHECK(tcd_distance(st) == doctest::Approx(expected).epsilon(1e-12));

  // the covariance part agrees with the eigendecomposition oracle once the
  // ridge is folded into the whitening matrix
  const double rho = 1e-4;
  TaskStats ridged = st;
  ridged.sigma_s_inv = symmetric_inverse(st.sigma_s, rho);
  Tensor pre = st.sigma_s;
  for (int i = 0; i < d; ++i) pre.data[i * d + i] += rho;
  const double oracle = trace_identity_oracle(st.sigma, st.sigma_adv, pre);
  CHECK(trace_form(st.sigma, st.sigma_adv, ridged.sigma_s_inv) ==
        doctest::Approx(oracle).epsilon(1e-8));
}

TEST_CASE("the distance is symmetric and positive away from equality") {
  Rng rng(99);
  const int d = 5;
  TaskStats st;
  descriptor_stats(rnd(rng, {15, d}, -1, 1), st.mu, st.sigma);
  descriptor_stats(rnd(rng, {15, d}, -1, 1), st.mu_adv, st.sigma_adv);
  st.sigma_s = random_spd(d, rng, 1.0);
  st.sigma_s_inv = symmetric_inverse(st.sigma_s, 0.0);

  TaskStats swapped = st;
  std::swap(swapped.mu, swapped.mu_adv);
  std::swap(swapped.sigma, swapped.sigma_adv);
  CHECK(tcd_distance(st) == doctest::Approx(tcd_distance(swapped)).epsilon(1e-12));
  CHECK(tcd_distance(st) > 0.0);
  CHECK(tcd_distance(st) >= -1e-9);
}

TEST_CASE("the distance is invariant under a change of basis") {
  Rng rng(2025);
  const int d = 3;
  TaskStats st;
  descriptor_stats(rnd(rng, {25, d}, -1, 1), st.mu, st.sigma);
  descriptor_stats(rnd(rng, {25, d}, -1, 1), st.mu_adv, st.sigma_adv);
  st.sigma_s = random_spd(d, rng, 1.0);
  st.sigma_s_inv = symmetric_inverse(st.sigma_s, 0.0);
  const double base = tcd_distance(st);

  Tensor a = rnd(rng, {d, d}, -0.5, 0.5);
  for (int i = 0; i < d; ++i) a.data[i * d + i] += 1.5;  // safely invertible
  const Tensor at = transpose(a);

  const auto congruence = [&](const Tensor& s) { return matmul(a, matmul(s, at)); };
  TaskStats tr;
  tr.mu = Tensor({d});
  tr.mu_adv = Tensor({d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      tr.mu.data[i] += a.data[i * d + j] * st.mu.data[j];
      tr.mu_adv.data[i] += a.data[i * d + j] * st.mu_adv.data[j];
    }
  tr.sigma = congruence(st.sigma);
  tr.sigma_adv = congruence(st.sigma_adv);
  tr.sigma_s = congruence(st.sigma_s);
  tr.sigma_s_inv = symmetric_inverse(tr.sigma_s, 0.0);
  CHECK(tcd_distance(tr) == doctest::Approx(base).epsilon(1e-8));
}

TEST_CASE("whitening by the support covariance reduces the distance to moments") {
  Rng rng(606);
  const int d = 2;
  const double rho = 1e-6;
  TaskStats st;
  descriptor_stats(rnd(rng, {30, d}, -1, 1), st.mu, st.sigma);
  descriptor_stats(rnd(rng, {30, d}, -1, 1), st.mu_adv, st.sigma_adv);
  st.sigma_s = random_spd(d, rng, 1.0);
  st.sigma_s_inv = symmetric_inverse(st.sigma_s, rho);

  // closed-form symmetric square root of the ridged 2x2 support covariance,
  // then its inverse: the whitening transform
  Tensor m = st.sigma_s;
  m.data[0] += rho;
  m.data[3] += rho;
  const double s = std::sqrt(m.data[0] * m.data[3] - m.data[1] * m.data[2]);
  const double t = std::sqrt(m.data[0] + m.data[3] + 2.0 * s);
  const Tensor root({2, 2}, {(m.data[0] + s) / t, m.data[1] / t, m.data[2] / t, (m.data[3] + s) / t});
  const double det = root.data[0] * root.data[3] - root.data[1] * root.data[2];
  const Tensor w({2, 2},
                 {root.data[3] / det, -root.data[1] / det, -root.data[2] / det, root.data[0] / det});

  Tensor mu_w({d}), mu_adv_w({d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      mu_w.data[i] += w.data[i * d + j] * st.mu.data[j];
      mu_adv_w.data[i] += w.data[i * d + j] * st.mu_adv.data[j];
    }
  const Tensor sg_w = matmul(w, matmul(st.sigma, w));
  const Tensor sg_adv_w = matmul(w, matmul(st.sigma_adv, w));

  const double plain = wasserstein2_approx(mu_w, sg_w, mu_adv_w, sg_adv_w);
  CHECK(tcd_distance(st) == doctest::Approx(plain).epsilon(1e-6));
}

TEST_CASE("moment distance and class consistency closed forms") {
  const Tensor mu({2}, {0, 0});
  const Tensor mu_adv({2}, {1, 2});
  const Tensor sg = identity(2);
  CHECK(wasserstein2_approx(mu, sg, mu_adv, sg) == doctest::Approx(5.0).epsilon(1e-12));
  Tensor sg_adv = sg;
  sg_adv.data[0] = 3.0;
  CHECK(wasserstein2_approx(mu, sg, mu, sg_adv) == doctest::Approx(4.0).epsilon(1e-12));

  CHECK(class_consistency(Tensor({3}, {0.2, 0.5, 0.3}), Tensor({3}, {0.2, 0.5, 0.3})) == 0.0);
  CHECK(class_consistency(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})) == doctest::Approx(2.0));
  CHECK(class_consistency(Tensor({2}, {0.6, 0.4}), Tensor({2}, {0.7, 0.3})) ==
        doctest::Approx(0.02).epsilon(1e-12));
}

TEST_CASE("the regularizer is the sum of its two terms") {
  Rng rng(3);
  const int d = 4;
  TaskStats st;
  descriptor_stats(rnd(rng, {10, d}, -1, 1), st.mu, st.sigma);
  descriptor_stats(rnd(rng, {10, d}, -1, 1), st.mu_adv, st.sigma_adv);
  st.sigma_s = random_spd(d, rng, 1.0);
  st.sigma_s_inv = symmetric_inverse(st.sigma_s, 1e-6);
  const Tensor p({3}, {0.5, 0.25, 0.25});
  const Tensor p_adv({3}, {0.2, 0.45, 0.35});
  CHECK(reg_loss(st, p, p_adv) ==
        doctest::Approx(tcd_distance(st) + class_consistency(p, p_adv)).epsilon(1e-12));
}

TEST_CASE("graph builders agree with the value-level functions") {
  Rng rng(42);
  const int d = 4;
  const Tensor desc = rnd(rng, {12, d}, -1, 1);
  const Tensor desc_adv = rnd(rng, {12, d}, -1, 1);
  Tensor mu, sigma, mu_adv, sigma_adv;
  descriptor_stats(desc, mu, sigma);
  descriptor_stats(desc_adv, mu_adv, sigma_adv);
  const Tensor sigma_s = random_spd(d, rng, 1.0);
  const Tensor g_inv = symmetric_inverse(sigma_s, 1e-6);

  Graph g;
  const StatNodes clean = descriptor_stats_nodes(g, g.constant(desc));
  const StatNodes adv = descriptor_stats_nodes(g, g.constant(desc_adv));
  for (int i = 0; i < d; ++i)
    CHECK(g.value(clean.mu).data[i] == doctest::Approx(mu.data[i]).epsilon(1e-12));
  for (int i = 0; i < d * d; ++i)
    CHECK(g.value(clean.sigma).data[i] == doctest::Approx(sigma.data[i]).epsilon(1e-12));

  const int dist = tcd_distance_nodes(g, clean, adv, g.constant(g_inv));
  TaskStats st{mu, sigma, mu_adv, sigma_adv, sigma_s, g_inv};
  CHECK(g.value(dist).data[0] == doctest::Approx(tcd_distance(st)).epsilon(1e-10));

  const Tensor p({3}, {0.5, 0.3, 0.2});
  const Tensor p_adv({3}, {0.1, 0.6, 0.3});
  const int cc = class_consistency_nodes(g, g.constant(p), g.constant(p_adv));
  CHECK(g.value(cc).data[0] == doctest::Approx(class_consistency(p, p_adv)).epsilon(1e-12));
}

TEST_CASE("the distance builder passes finite differences in the descriptors") {
  Rng rng(1337);
  const int d = 3;
  const Tensor desc = rnd(rng, {8, d}, -1, 1);
  const Tensor desc_adv = rnd(rng, {8, d}, -1, 1);
  Tensor sigma_s, g_inv;
  task_covariance({&desc}, 1e-3, sigma_s, g_inv);

  const auto build = [desc_adv, g_inv](Graph& g, int x) {
    const StatNodes clean = descriptor_stats_nodes(g, x);
    const StatNodes adv = descriptor_stats_nodes(g, g.constant(desc_adv));
    return tcd_distance_nodes(g, clean, adv, g.constant(g_inv));
  };
  const Tensor analytic = input_gradient(build, desc);
  const auto f = [&](const Tensor& t) {
    Graph g;
    return g.value(build(g, g.input(t))).data[0];
  };
  CHECK(finite_difference_check(f, desc, analytic).max_rel_err < 1e-4);
}
