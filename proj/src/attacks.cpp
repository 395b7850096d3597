#include "mdat/attacks.hpp"

#include <cmath>
#include <stdexcept>

namespace mdat {

namespace {

void check_input(const Tensor& x) {
  for (double v : x.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("attacks: input image has pixels outside [0,1]");
}

Tensor loss_input_gradient(const LossBuilder& build, const Tensor& x, int step) {
  try {
    return input_gradient([&](Graph& g, int xid) { return build(g, xid); }, x);
  } catch (const std::exception& e) {
    throw std::runtime_error("attacks: gradient failed at step " + std::to_string(step) + ": " +
                             e.what());
  }
}

double apply_sign(double v, const AttackHooks* hooks) {
  return hooks && hooks->sign_fn ? hooks->sign_fn(v) : sign0(v);
}

}  // namespace

Tensor fgsm(const LossBuilder& build, const Tensor& x, double eps, const AttackHooks* hooks) {
  if (eps < 0.0) throw std::invalid_argument("attacks: negative epsilon");
  check_input(x);
  const Tensor g = loss_input_gradient(build, x, 0);
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += eps * apply_sign(g.data[i], hooks);
  clip01_inplace(out);
  return out;
}

Tensor pgd_steps(const LossBuilder& build, const Tensor& x, double eps, double alpha, int k,
                 double noise_sigma, Rng& rng, const AttackHooks* hooks) {
  if (eps < 0.0) throw std::invalid_argument("attacks: negative epsilon");
  if (alpha <= 0.0) throw std::invalid_argument("attacks: pgd needs a positive step size");
  if (k < 1) throw std::invalid_argument("attacks: pgd needs at least one iteration");
  check_input(x);
  Tensor cur = x;
  if (noise_sigma != 0.0) {
    for (double& v : cur.data) v += noise_sigma * rng.normal();
    clip01_inplace(cur);
  }
  for (int step = 1; step <= k; ++step) {
    const Tensor g = loss_input_gradient(build, cur, step);
    for (std::size_t i = 0; i < cur.numel(); ++i) {
      double v = cur.data[i] + alpha * apply_sign(g.data[i], hooks);
      const double lo = x.data[i] - eps, hi = x.data[i] + eps;
      v = std::min(hi, std::max(lo, v));
      cur.data[i] = std::min(1.0, std::max(0.0, v));
    }
  }
  return cur;
}

Tensor pgd(const LossBuilder& build, const Tensor& x, double eps, double alpha,
           std::uint64_t seed, const AttackHooks* hooks) {
  Rng rng = derive_rng(seed, "pgd-start");
  return pgd_steps(build, x, eps, alpha, pgd_iterations(eps), 0.001, rng, hooks);
}

int pgd_iterations(double eps) {
  if (eps < 0.0) throw std::invalid_argument("attacks: negative epsilon");
  const double k = std::min(255.0 * eps + 4.0, 255.0 * eps * 1.25);
  return std::max(1, static_cast<int>(std::lround(k)));
}

double sample_epsilon(Rng& rng, double eps_max) {
  if (eps_max <= 0.0) throw std::invalid_argument("attacks: eps_max must be positive");
  const double sigma = eps_max / 2.0;
  for (;;) {
    const double eps = std::fabs(sigma * rng.normal());
    if (eps <= eps_max) return eps;
  }
}

Tensor run_attack(const AttackConfig& cfg, const LossBuilder& build, const Tensor& x,
                  const AttackHooks* hooks) {
  if (cfg.kind == "fgsm") return fgsm(build, x, cfg.eps, hooks);
  if (cfg.kind == "pgd") return pgd(build, x, cfg.eps, cfg.alpha, cfg.seed, hooks);
  throw std::invalid_argument("attacks: unknown attack kind '" + cfg.kind + "'");
}

}  // namespace mdat
