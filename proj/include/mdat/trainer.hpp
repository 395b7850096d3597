#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdat/attacks.hpp"
#include "mdat/embednet.hpp"
#include "mdat/episodes.hpp"

namespace mdat {

struct TrainConfig {
  int c_way = 5;
  int k_shot = 5;
  int q_per_class = 10;
  int epochs = 10;
  int episodes_per_epoch = 200;
  double base_lr = 0.005;
  int lr_halve_every = 10;
  double lambda = 0.5;
  std::string attack_kind = "fgsm";  // fgsm | pgd
  double eps_max = 0.01;             // 0 disables the adversarial term entirely
  std::string mode = "both";         // none | class | fea | both
  std::string fea_stats = "image";   // feature statistics scope: image | pooled
  int k_nn = 3;
  double tau = 1.0;
  double rho = 1e-3;
  std::uint64_t seed = 0;
  int val_episodes = 40;
  int workers = 1;
  EmbedConfig embed;
};

void validate(const TrainConfig& cfg);

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::int64_t step = 0;
};

struct Checkpoint {
  TrainConfig config;
  ParamSet params;
  AdamState opt;
  ParamSet stats;  // running batch-norm buffers, bn_mode "running" only
  int epoch = 0;                    // epochs completed
  std::uint64_t next_episode = 0;   // global episode counter, doubles as RNG cursor
  double best_val = -1.0;
  int best_epoch = -1;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Embeds the episode's support images and concatenates the per-class
// descriptor pools ([k_shot*m, d] each, shot-major row order).
std::vector<Tensor> support_pools(const EmbedConfig& cfg, const ParamSet& params,
                                  const Dataset& ds, const Episode& ep,
                                  const ParamSet* running = nullptr);

// Cross-entropy of one query against frozen pools and parameters, with the
// image as the only differentiable leaf. This is what the attacks maximize.
LossBuilder query_ce_builder(const EmbedConfig& cfg, const ParamSet& params,
                             const std::vector<Tensor>& pools, int y_true, int k_nn, double tau,
                             const ParamSet* running = nullptr);

// Class probabilities for one query image against the given pools.
Tensor predict_query(const EmbedConfig& cfg, const ParamSet& params,
                     const std::vector<Tensor>& pools, const Tensor& x, int k_nn, double tau,
                     const ParamSet* running = nullptr);

struct EpisodeResult {
  double loss = 0.0;
  ParamSet grads;
  double eps = 0.0;  // adversarial budget used for this episode
};

// The differentiable objective at fixed adversarial images and fixed task
// whitening: mean over queries of CE(clean) + CE(adv) + lambda * regularizer
// (terms gated by cfg.mode). `x_adv` is indexed [class][query]; pass empty to
// reuse the clean images (zero-budget attack). `sigma_s_inv` may be null when
// the mode needs no feature term. Gradients are accumulated into `grads`
// (same keys as params) when non-null.
double episode_objective(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                         const Episode& ep, const std::vector<std::vector<Tensor>>& x_adv,
                         const Tensor* sigma_s_inv, ParamSet* grads,
                         const ParamSet* running = nullptr);

// Full episode step: draws nothing itself — the adversarial budget comes in
// via `attack.eps` — generates adversarial queries against the current
// parameters, computes the task whitening, and differentiates the objective.
EpisodeResult episode_loss(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                           const Episode& ep, const AttackConfig& attack,
                           const ParamSet* running = nullptr);

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr);

double lr_schedule(int epoch, double base_lr, int halve_every);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double val_acc_clean = 0.0;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint final_ck;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Runs the episodic loop, writing metrics.csv, episodes.log, best.ckpt and
// last.ckpt into out_dir. If resume_from is non-empty, continues that
// checkpoint (appending to existing logs); the continued run is bit-identical
// to an uninterrupted one in single-worker mode.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                  const std::string& resume_from = "", const EpochCallback& on_epoch = {});

// Canonical key=value text for a config; parsing rejects unknown keys and
// reports line numbers. Round-trips exactly.
std::string config_to_text(const TrainConfig& cfg);
TrainConfig config_from_text(const std::string& text);

}  // namespace mdat
