#include "mdat/distloss.hpp"

#include <Eigen/Dense>

#include <stdexcept>

namespace mdat {

namespace {

using EMat = Eigen::MatrixXd;

EMat to_eigen(const Tensor& t) {
  if (t.shape.size() != 2)
    throw std::invalid_argument("distloss: expected a matrix, got " + shape_str(t.shape));
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(t.ptr(), t.shape[0], t.shape[1]);
}

Tensor from_eigen(const EMat& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) t.at2(i, j) = m(i, j);
  return t;
}

void require_square(const Tensor& t, const char* what) {
  if (t.shape.size() != 2 || t.shape[0] != t.shape[1])
    throw std::invalid_argument(std::string("distloss: ") + what + " must be square, got " +
                                shape_str(t.shape));
}

}  // namespace

void descriptor_stats(const Tensor& desc, Tensor& mu, Tensor& sigma) {
  if (desc.shape.size() != 2 || desc.shape[0] < 2)
    throw std::invalid_argument("distloss: need at least 2 descriptors [m,d], got " +
                                shape_str(desc.shape));
  Graph g;
  const int d = g.constant(desc);
  const StatNodes s = descriptor_stats_nodes(g, d);
  mu = g.value(s.mu);
  sigma = g.value(s.sigma);
}

void task_covariance(const std::vector<const Tensor*>& support_descs, double rho, Tensor& sigma_s,
                     Tensor& sigma_s_inv) {
  if (rho <= 0.0) throw std::invalid_argument("distloss: ridge must be positive");
  int total = 0, d = -1;
  for (const Tensor* t : support_descs) {
    if (t->shape.size() != 2)
      throw std::invalid_argument("distloss: support descriptors must be [m,d]");
    if (d < 0) d = t->shape[1];
    if (t->shape[1] != d)
      throw std::invalid_argument("distloss: inconsistent descriptor dimension");
    total += t->shape[0];
  }
  if (total < 2) throw std::invalid_argument("distloss: need at least 2 pooled descriptors");
  Tensor pooled({total, d});
  int row = 0;
  for (const Tensor* t : support_descs) {
    std::copy(t->data.begin(), t->data.end(), pooled.data.begin() + static_cast<std::size_t>(row) * d);
    row += t->shape[0];
  }
  Graph g;
  sigma_s = g.value(g.rows_covariance(g.constant(std::move(pooled))));
  sigma_s_inv = symmetric_inverse(sigma_s, rho);
}

Tensor symmetric_inverse(const Tensor& mat, double ridge) {
  require_square(mat, "matrix");
  EMat m = to_eigen(mat);
  m.diagonal().array() += ridge;
  Eigen::LLT<EMat> llt(m);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("distloss: matrix not positive definite after ridge " +
                             std::to_string(ridge));
  EMat inv = llt.solve(EMat::Identity(m.rows(), m.cols()));
  inv = ((inv + inv.transpose()) * 0.5).eval();
  return from_eigen(inv);
}

double trace_form(const Tensor& sigma1, const Tensor& sigma2, const Tensor& sigma_inv) {
  require_square(sigma1, "sigma1");
  require_square(sigma2, "sigma2");
  require_square(sigma_inv, "sigma_inv");
  const EMat a = to_eigen(sigma1) * to_eigen(sigma_inv);
  const EMat b = to_eigen(sigma2) * to_eigen(sigma_inv);
  return (a * a).trace() - 2.0 * (a * b).trace() + (b * b).trace();
}

double tcd_distance(const TaskStats& stats) {
  if (stats.mu.shape != stats.mu_adv.shape)
    throw std::invalid_argument("distloss: mean shape mismatch");
  const int d = static_cast<int>(stats.mu.numel());
  Eigen::Map<const Eigen::VectorXd> mu(stats.mu.ptr(), d);
  Eigen::Map<const Eigen::VectorXd> mu_adv(stats.mu_adv.ptr(), d);
  const Eigen::VectorXd diff = mu - mu_adv;
  const EMat sinv = to_eigen(stats.sigma_s_inv);
  const double mahal = diff.dot(sinv * diff);
  return mahal + trace_form(stats.sigma, stats.sigma_adv, stats.sigma_s_inv);
}

double trace_identity_oracle(const Tensor& sigma1, const Tensor& sigma2, const Tensor& sigma) {
  require_square(sigma, "sigma");
  Eigen::SelfAdjointEigenSolver<EMat> es(to_eigen(sigma));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("distloss: eigendecomposition failed");
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::invalid_argument("distloss: oracle needs a positive definite sigma");
  const EMat root_inv = es.eigenvectors() *
                        es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                        es.eigenvectors().transpose();
  const EMat w1 = root_inv * to_eigen(sigma1) * root_inv;
  const EMat w2 = root_inv * to_eigen(sigma2) * root_inv;
  return (w1 - w2).squaredNorm();
}

double wasserstein2_approx(const Tensor& mu, const Tensor& sigma, const Tensor& mu_adv,
                           const Tensor& sigma_adv) {
  if (mu.shape != mu_adv.shape || sigma.shape != sigma_adv.shape)
    throw std::invalid_argument("distloss: shape mismatch");
  double out = 0.0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double d = mu.data[i] - mu_adv.data[i];
    out += d * d;
  }
  for (std::size_t i = 0; i < sigma.numel(); ++i) {
    const double d = sigma.data[i] - sigma_adv.data[i];
    out += d * d;
  }
  return out;
}

double class_consistency(const Tensor& p, const Tensor& p_adv) {
  if (p.shape != p_adv.shape)
    throw std::invalid_argument("distloss: prediction shape mismatch");
  double out = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double d = p.data[i] - p_adv.data[i];
    out += d * d;
  }
  return out;
}

double reg_loss(const TaskStats& stats, const Tensor& p, const Tensor& p_adv) {
  return tcd_distance(stats) + class_consistency(p, p_adv);
}

StatNodes descriptor_stats_nodes(Graph& g, int desc) {
  const Tensor& v = g.value(desc);
  if (v.shape.size() != 2 || v.shape[0] < 2)
    throw std::invalid_argument("distloss: need at least 2 descriptors [m,d], got " +
                                shape_str(v.shape));
  return StatNodes{g.rows_mean(desc), g.rows_covariance(desc)};
}

StatNodes pooled_stats_nodes(Graph& g, const std::vector<int>& descs) {
  if (descs.empty()) throw std::invalid_argument("distloss: pooled stats need descriptors");
  const std::vector<int>& first = g.value(descs[0]).shape;
  for (int id : descs)
    if (g.value(id).shape != first)
      throw std::invalid_argument("distloss: pooled stats need equally shaped maps, got " +
                                  shape_str(g.value(id).shape) + " vs " + shape_str(first));
  if (descs.size() == 1) return descriptor_stats_nodes(g, descs[0]);

  // With equal group sizes the pooled moments are plain averages:
  // mu = avg(mu_i), sigma = avg(sigma_i + mu_i mu_i^T) - mu mu^T.
  const int d = first[1];
  const double inv = 1.0 / static_cast<double>(descs.size());
  int mu_sum = -1, second_sum = -1;
  for (int id : descs) {
    const StatNodes s = descriptor_stats_nodes(g, id);
    const int outer = g.matmul(g.reshape(s.mu, {d, 1}), g.reshape(s.mu, {1, d}));
    mu_sum = mu_sum < 0 ? s.mu : g.add(mu_sum, s.mu);
    const int second = g.add(s.sigma, outer);
    second_sum = second_sum < 0 ? second : g.add(second_sum, second);
  }
  const int mu = g.scale(mu_sum, inv);
  const int sigma = g.sub(g.scale(second_sum, inv),
                          g.matmul(g.reshape(mu, {d, 1}), g.reshape(mu, {1, d})));
  return StatNodes{mu, sigma};
}

int tcd_distance_nodes(Graph& g, const StatNodes& clean, const StatNodes& adv,
                       int sigma_s_inv_const) {
  const int d = g.value(clean.mu).shape[0];
  const int diff = g.reshape(g.sub(clean.mu, adv.mu), {1, d});
  const int mahal = g.sum_all(g.mul(g.matmul(diff, sigma_s_inv_const), diff));
  const int a = g.matmul(clean.sigma, sigma_s_inv_const);
  const int b = g.matmul(adv.sigma, sigma_s_inv_const);
  const int t_aa = g.trace_prod(a, a);
  const int t_ab = g.trace_prod(a, b);
  const int t_bb = g.trace_prod(b, b);
  return g.add(mahal, g.add(t_aa, g.add(g.scale(t_ab, -2.0), t_bb)));
}

int class_consistency_nodes(Graph& g, int p, int p_adv) {
  const int diff = g.sub(p, p_adv);
  return g.sum_all(g.mul(diff, diff));
}

}  // namespace mdat
