#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mdat/graph.hpp"
#include "mdat/rng.hpp"
#include "mdat/tensor.hpp"

namespace mdat {

// Builds the scalar loss to attack: receives a graph and the node id of the
// input image, returns the loss node id. The builder bakes everything else
// (parameters, support descriptors, the true label) in as constants, so the
// only gradient path is through the image.
using LossBuilder = std::function<int(Graph&, int x_node)>;

struct AttackConfig {
  std::string kind = "fgsm";  // fgsm | pgd
  double eps = 0.0;
  double alpha = 1.0 / 255.0;
  std::uint64_t seed = 0;
};

// Test seam: lets the self-check suite swap the sign convention and observe
// the fixed-point property break.
struct AttackHooks {
  double (*sign_fn)(double) = nullptr;
};

Tensor fgsm(const LossBuilder& build, const Tensor& x, double eps,
            const AttackHooks* hooks = nullptr);

// Core PGD loop with explicit step count and start-noise scale.
Tensor pgd_steps(const LossBuilder& build, const Tensor& x, double eps, double alpha, int k,
                 double noise_sigma, Rng& rng, const AttackHooks* hooks = nullptr);

// Default-configured PGD: iteration count from pgd_iterations(eps), Gaussian
// start of scale 0.001 drawn from the seed.
Tensor pgd(const LossBuilder& build, const Tensor& x, double eps, double alpha,
           std::uint64_t seed, const AttackHooks* hooks = nullptr);

int pgd_iterations(double eps);

// One adversarial budget draw per training episode: |Normal(0, eps_max/2)|,
// redrawn until it lands in [0, eps_max].
double sample_epsilon(Rng& rng, double eps_max);

Tensor run_attack(const AttackConfig& cfg, const LossBuilder& build, const Tensor& x,
                  const AttackHooks* hooks = nullptr);

}  // namespace mdat
