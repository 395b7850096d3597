#pragma once

#include <vector>

#include "mdat/graph.hpp"
#include "mdat/tensor.hpp"

namespace mdat {

// Distribution machinery for the feature-level regularizer: per-image
// descriptor statistics, the pooled task covariance with its ridge inverse,
// the task-conditioned distance in its square-root-free trace form, the
// class-consistency term, and evaluation/test oracles.

struct TaskStats {
  Tensor mu, sigma;          // clean image: [d], [d,d]
  Tensor mu_adv, sigma_adv;  // adversarial counterpart
  Tensor sigma_s;            // pooled support covariance [d,d]
  Tensor sigma_s_inv;        // (sigma_s + rho*I)^-1, treated as constant
};

// mu = row mean, sigma = (1/m) * centered_rows^T centered_rows; m >= 2
void descriptor_stats(const Tensor& desc, Tensor& mu, Tensor& sigma);

// Pooled covariance of all support descriptor rows (all classes together)
// and its ridge inverse.
void task_covariance(const std::vector<const Tensor*>& support_descs, double rho, Tensor& sigma_s,
                     Tensor& sigma_s_inv);

// (mat + ridge*I)^-1 by Cholesky factorization; throws if not positive
// definite after the ridge.
Tensor symmetric_inverse(const Tensor& mat, double ridge);

// Tr[S1 G S1 G] - 2 Tr[S1 G S2 G] + Tr[S2 G S2 G] with G = sigma_inv
double trace_form(const Tensor& sigma1, const Tensor& sigma2, const Tensor& sigma_inv);

// (mu-mu_adv)^T sigma_s_inv (mu-mu_adv) + trace_form(sigma, sigma_adv, sigma_s_inv)
double tcd_distance(const TaskStats& stats);

// || G^{-1/2} S1 G^{-1/2} - G^{-1/2} S2 G^{-1/2} ||_F^2 with the square roots
// taken by explicit eigendecomposition of G = sigma (test oracle; sigma must
// be positive definite).
double trace_identity_oracle(const Tensor& sigma1, const Tensor& sigma2, const Tensor& sigma);

// ||mu - mu_adv||^2 + ||sigma - sigma_adv||_F^2
double wasserstein2_approx(const Tensor& mu, const Tensor& sigma, const Tensor& mu_adv,
                           const Tensor& sigma_adv);

// squared Euclidean distance between probability vectors
double class_consistency(const Tensor& p, const Tensor& p_adv);

double reg_loss(const TaskStats& stats, const Tensor& p, const Tensor& p_adv);

// ---- differentiable graph builders ----

struct StatNodes {
  int mu;
  int sigma;
};

StatNodes descriptor_stats_nodes(Graph& g, int desc);

// Statistics of the union of several descriptor maps. All maps must be [m,d]
// with the same m, so the result equals descriptor_stats on their row
// concatenation; differentiable through every map.
StatNodes pooled_stats_nodes(Graph& g, const std::vector<int>& descs);

// sigma_s_inv enters as a constant (stop-gradient), matching task_covariance.
int tcd_distance_nodes(Graph& g, const StatNodes& clean, const StatNodes& adv,
                       int sigma_s_inv_const);

int class_consistency_nodes(Graph& g, int p, int p_adv);

}  // namespace mdat
