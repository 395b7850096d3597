#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mdat/attacks.hpp"
#include "mdat/distloss.hpp"
#include "mdat/dn4head.hpp"
#include "mdat/episodes.hpp"
#include "mdat/rng.hpp"
#include "mdat/tensor.hpp"
#include "mdat/trainer.hpp"

using namespace mdat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mdat_tr_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.c_way = 2;
  cfg.k_shot = 1;
  cfg.q_per_class = 2;
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 3;
  cfg.base_lr = 0.01;
  cfg.lambda = 0.5;
  cfg.attack_kind = "fgsm";
  cfg.eps_max = 0.01;
  cfg.mode = "both";
  cfg.val_episodes = 4;
  cfg.seed = 1;
  cfg.embed.widths = {4, 4, 4, 4};
  return cfg;
}

Dataset tiny_dataset() { return generate_synthetic(10, 6, 8, 5); }

Episode fixed_episode(const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return sample_episode(ds, Split::train, cfg.c_way, cfg.k_shot, cfg.q_per_class, rng);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool all_params_nonzero(const ParamSet& grads) {
  for (const auto& [name, t] : grads) {
    double norm = 0.0;
    for (double v : t.data) norm += v * v;
    if (norm == 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(validate(TrainConfig{}));
  TrainConfig cfg;
  cfg.eps_max = 0.0;  // disabling the adversarial term is legal
  CHECK_NOTHROW(validate(cfg));

  cfg = TrainConfig{};
  cfg.eps_max = -0.01;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg.eps_max = 1.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

  cfg = TrainConfig{};
  cfg.mode = "girdle";
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.attack_kind = "deepfool";
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.c_way = 1;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.rho = 0.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.workers = 0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.lambda = -0.1;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}

TEST_CASE("learning rate halves on schedule") {
  CHECK(lr_schedule(0, 0.005, 10) == 0.005);
  CHECK(lr_schedule(9, 0.005, 10) == 0.005);
  CHECK(lr_schedule(10, 0.005, 10) == 0.0025);
  CHECK(lr_schedule(19, 0.005, 10) == 0.0025);
  CHECK(lr_schedule(30, 0.005, 10) == 0.000625);
  CHECK_THROWS_AS(lr_schedule(-1, 0.005, 10), std::invalid_argument);
  CHECK_THROWS_AS(lr_schedule(0, 0.005, 0), std::invalid_argument);
}

TEST_CASE("zero-budget episodes double the clean cross entropy") {
  TrainConfig cfg = tiny_config();
  cfg.eps_max = 0.0;
  cfg.mode = "none";
  const Dataset ds = tiny_dataset();
  const ParamSet params = init_params(cfg.embed, 3);
  const Episode ep = fixed_episode(ds, cfg, 7);

  AttackConfig atk;
  atk.kind = cfg.attack_kind;
  atk.eps = 0.0;
  const EpisodeResult res = episode_loss(cfg, params, ds, ep, atk);

  const std::vector<Tensor> pools = support_pools(cfg.embed, params, ds, ep);
  double ce_sum = 0.0;
  for (int c = 0; c < cfg.c_way; ++c)
    for (int q = 0; q < cfg.q_per_class; ++q) {
      const Tensor p =
          predict_query(cfg.embed, params, pools, query_image(ds, ep, c, q), cfg.k_nn, cfg.tau);
      ce_sum += cross_entropy(p, c);
    }
  const double expected = 2.0 * ce_sum / (cfg.c_way * cfg.q_per_class);
  CHECK(res.loss == doctest::Approx(expected).epsilon(1e-12));
  CHECK(res.eps == 0.0);
}

TEST_CASE("a zero regularizer weight reduces every mode to the plain objective") {
  TrainConfig both = tiny_config();
  both.lambda = 0.0;
  TrainConfig none = both;
  none.mode = "none";
  const Dataset ds = tiny_dataset();
  const ParamSet params = init_params(both.embed, 9);
  const Episode ep = fixed_episode(ds, both, 11);

  AttackConfig atk;
  atk.kind = "fgsm";
  atk.eps = 0.008;
  atk.seed = 77;
  const EpisodeResult a = episode_loss(both, params, ds, ep, atk);
  const EpisodeResult b = episode_loss(none, params, ds, ep, atk);
  CHECK(a.loss == b.loss);
  REQUIRE(a.grads.size() == b.grads.size());
  for (const auto& [name, t] : a.grads) CHECK(t.data == b.grads.at(name).data);
}

TEST_CASE("every mode produces a finite loss and a full gradient set") {
  const Dataset ds = tiny_dataset();
  for (const std::string mode : {"none", "class", "fea", "both"}) {
    TrainConfig cfg = tiny_config();
    cfg.mode = mode;
    const ParamSet params = init_params(cfg.embed, 4);
    const Episode ep = fixed_episode(ds, cfg, 13);
    AttackConfig atk;
    atk.kind = "fgsm";
    atk.eps = 0.005;
    atk.seed = 5;
    const EpisodeResult res = episode_loss(cfg, params, ds, ep, atk);
    INFO("mode ", mode);
    CHECK(std::isfinite(res.loss));
    CHECK(res.loss > 0.0);
    CHECK(res.grads.size() == params.size());
    CHECK(all_params_nonzero(res.grads));
  }
}

TEST_CASE("the attack budget must respect the configured ceiling") {
  TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  const ParamSet params = init_params(cfg.embed, 4);
  const Episode ep = fixed_episode(ds, cfg, 13);
  AttackConfig atk;
  atk.eps = 0.02;  // above eps_max = 0.01
  CHECK_THROWS_AS(episode_loss(cfg, params, ds, ep, atk), std::invalid_argument);
}

TEST_CASE("episode gradients pass finite differences at fixed attack and whitening") {
  TrainConfig cfg = tiny_config();
  cfg.mode = "both";
  cfg.lambda = 0.5;
  const Dataset ds = generate_synthetic(5, 4, 8, 99);
  const ParamSet params = init_params(cfg.embed, 6);
  const Episode ep = fixed_episode(ds, cfg, 17);

  Rng noise(23);
  std::vector<std::vector<Tensor>> x_adv(cfg.c_way);
  for (int c = 0; c < cfg.c_way; ++c)
    for (int q = 0; q < cfg.q_per_class; ++q) {
      Tensor x = query_image(ds, ep, c, q);
      for (double& v : x.data) v = std::min(1.0, std::max(0.0, v + 0.005 * noise.normal()));
      x_adv[c].push_back(std::move(x));
    }

  const std::vector<Tensor> pools = support_pools(cfg.embed, params, ds, ep);
  std::vector<const Tensor*> descs;
  for (const Tensor& p : pools) descs.push_back(&p);
  Tensor sigma_s, sigma_s_inv;
  task_covariance(descs, cfg.rho, sigma_s, sigma_s_inv);

  ParamSet grads;
  episode_objective(cfg, params, ds, ep, x_adv, &sigma_s_inv, &grads);

  const double h = 1e-5;
  double worst = 0.0;
  for (const auto& [name, t] : params) {
    const std::size_t last = t.numel() - 1;
    for (const std::size_t i : {std::size_t(0), t.numel() / 2, last}) {
      ParamSet probe = params;
      probe.at(name).data[i] = t.data[i] + h;
      const double up = episode_objective(cfg, probe, ds, ep, x_adv, &sigma_s_inv, nullptr);
      probe.at(name).data[i] = t.data[i] - h;
      const double dn = episode_objective(cfg, probe, ds, ep, x_adv, &sigma_s_inv, nullptr);
      const double fd = (up - dn) / (2.0 * h);
      const double an = grads.at(name).data[i];
      worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("adam closed forms and error handling") {
  {
    ParamSet params;
    params.emplace("w", Tensor({2}, {0.5, -0.25}));
    ParamSet grads;
    grads.emplace("w", Tensor({2}));
    AdamState st;
    adam_step(params, grads, st, 0.1);
    CHECK(st.step == 1);
    CHECK(params.at("w").data == std::vector<double>{0.5, -0.25});
  }
  {
    // with a fresh state the bias correction cancels: one step moves by
    // -lr * g / (|g| + eps)
    ParamSet params;
    params.emplace("w", Tensor({1}, {0.5}));
    ParamSet grads;
    grads.emplace("w", Tensor({1}, {2.0}));
    AdamState st;
    adam_step(params, grads, st, 0.01);
    CHECK(params.at("w").data[0] == doctest::Approx(0.5 - 0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  }
  {
    // three steps against an independent replica of the update rule
    ParamSet params;
    params.emplace("w", Tensor({1}, {1.0}));
    AdamState st;
    double w = 1.0, m = 0.0, v = 0.0;
    for (int step = 1; step <= 3; ++step) {
      const double g = 0.5 * step;
      ParamSet grads;
      grads.emplace("w", Tensor({1}, {g}));
      adam_step(params, grads, st, 0.05);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double bc1 = 1.0 - std::pow(0.9, step);
      const double bc2 = 1.0 - std::pow(0.999, step);
      w -= 0.05 * (m / bc1) / (std::sqrt(v / bc2) + 1e-8);
    }
    CHECK(params.at("w").data[0] == doctest::Approx(w).epsilon(1e-14));
    CHECK(st.step == 3);
  }
  {
    ParamSet params;
    params.emplace("w", Tensor({2}, {0.0, 0.0}));
    AdamState st;
    ParamSet missing;
    CHECK_THROWS_AS(adam_step(params, missing, st, 0.1), std::invalid_argument);
    ParamSet bad_shape;
    bad_shape.emplace("w", Tensor({3}));
    CHECK_THROWS_AS(adam_step(params, bad_shape, st, 0.1), std::invalid_argument);
  }
}

TEST_CASE("config text round-trips and reports bad lines") {
  TrainConfig cfg = tiny_config();
  cfg.attack_kind = "pgd";
  cfg.mode = "fea";
  cfg.lambda = 0.25;
  cfg.eps_max = 0.007;
  cfg.seed = 42;
  const std::string text = config_to_text(cfg);
  const TrainConfig back = config_from_text(text);
  CHECK(config_to_text(back) == text);

  CHECK_NOTHROW(config_from_text("# comment\n\nepochs=3\n"));

  try {
    config_from_text("epochs=3\nbogus_key=1\n");
    FAIL("expected an unknown-key error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("bogus_key") != std::string::npos);
  }
  try {
    config_from_text("epochs=abc\n");
    FAIL("expected an invalid-value error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 1") != std::string::npos);
    CHECK(msg.find("invalid value") != std::string::npos);
  }
  CHECK_THROWS_AS(config_from_text("no equals sign here\n"), std::invalid_argument);
}

TEST_CASE("training writes logs and checkpoints that agree with each other") {
  TempDir dir("smoke");
  const TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  int callbacks = 0;
  const TrainResult result =
      train(cfg, ds, dir.path.string(), "", [&](const EpochLog& log) {
        ++callbacks;
        CHECK(std::isfinite(log.mean_loss));
      });

  CHECK(callbacks == cfg.epochs);
  REQUIRE(static_cast<int>(result.log.size()) == cfg.epochs);
  CHECK(fs::exists(dir.path / "metrics.csv"));
  CHECK(fs::exists(dir.path / "episodes.log"));
  CHECK(fs::exists(dir.path / "best.ckpt"));
  CHECK(fs::exists(dir.path / "last.ckpt"));

  // metrics.csv: one epoch,lr,mean_loss,val_acc line per epoch
  std::ifstream metrics(dir.path / "metrics.csv");
  std::string line;
  int rows = 0;
  double best_val = -1.0;
  int best_epoch = -1;
  while (std::getline(metrics, line)) {
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() == 4);
    CHECK(std::stoi(fields[0]) == rows);
    CHECK(std::stod(fields[1]) == lr_schedule(rows, cfg.base_lr, cfg.lr_halve_every));
    const double val = std::stod(fields[3]);
    if (val > best_val) {
      best_val = val;
      best_epoch = rows;
    }
    ++rows;
  }
  CHECK(rows == cfg.epochs);

  std::ifstream eplog(dir.path / "episodes.log");
  int ep_rows = 0;
  while (std::getline(eplog, line)) ++ep_rows;
  CHECK(ep_rows == cfg.epochs * cfg.episodes_per_epoch);

  const Checkpoint best = load_checkpoint((dir.path / "best.ckpt").string());
  CHECK(best.best_val == doctest::Approx(best_val).epsilon(1e-12));
  CHECK(best.best_epoch == best_epoch);
  CHECK(result.final_ck.epoch == cfg.epochs);
  CHECK(result.final_ck.next_episode ==
        static_cast<std::uint64_t>(cfg.epochs) * cfg.episodes_per_epoch);
}

TEST_CASE("an interrupted run resumes bit-identically") {
  const TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();

  TempDir full("full");
  train(cfg, ds, full.path.string());

  // interrupt after the first epoch has been committed to disk
  TempDir broken("broken");
  struct Interrupt {};
  try {
    train(cfg, ds, broken.path.string(), "", [](const EpochLog& log) {
      if (log.epoch == 0) throw Interrupt{};
    });
    FAIL("expected the interruption to propagate");
  } catch (const Interrupt&) {
  }
  REQUIRE(fs::exists(broken.path / "last.ckpt"));

  train(cfg, ds, broken.path.string(), (broken.path / "last.ckpt").string());

  for (const char* f : {"metrics.csv", "episodes.log", "best.ckpt", "last.ckpt"}) {
    INFO("file ", f);
    CHECK(slurp(full.path / f) == slurp(broken.path / f));
  }
}

TEST_CASE("resume refuses a different configuration") {
  const TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  TempDir dir("cfgmismatch");
  train(cfg, ds, dir.path.string());
  TrainConfig other = cfg;
  other.base_lr = 0.123;
  CHECK_THROWS_AS(train(other, ds, dir.path.string(), (dir.path / "last.ckpt").string()),
                  std::invalid_argument);
}

TEST_CASE("checkpoints round-trip byte-exactly") {
  const TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  TempDir dir("ckpt");
  train(cfg, ds, dir.path.string());

  const Checkpoint ck = load_checkpoint((dir.path / "last.ckpt").string());
  save_checkpoint(ck, (dir.path / "copy.ckpt").string());
  CHECK(slurp(dir.path / "last.ckpt") == slurp(dir.path / "copy.ckpt"));

  const Checkpoint again = load_checkpoint((dir.path / "copy.ckpt").string());
  CHECK(config_to_text(again.config) == config_to_text(ck.config));
  CHECK(again.epoch == ck.epoch);
  CHECK(again.next_episode == ck.next_episode);
  CHECK(again.best_val == ck.best_val);
  CHECK(again.best_epoch == ck.best_epoch);
  for (const auto& [name, t] : ck.params) CHECK(again.params.at(name).data == t.data);
  for (const auto& [name, t] : ck.opt.m) CHECK(again.opt.m.at(name).data == t.data);
  CHECK(again.opt.step == ck.opt.step);
}

TEST_CASE("loading rejects a checkpoint whose tensors contradict its config") {
  TempDir dir("badck");
  Checkpoint ck;
  ck.config = tiny_config();  // widths 4,4,4,4
  EmbedConfig wide = ck.config.embed;
  wide.widths = {8, 8, 8, 8};
  ck.params = init_params(wide, 1);  // shapes for the wrong widths
  for (const auto& [name, t] : ck.params) {
    ck.opt.m.emplace(name, Tensor(t.shape));
    ck.opt.v.emplace(name, Tensor(t.shape));
  }
  const std::string path = (dir.path / "bad.ckpt").string();
  save_checkpoint(ck, path);
  try {
    load_checkpoint(path);
    FAIL("expected a shape mismatch error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("block1.") != std::string::npos);  // names the offending tensor
    CHECK(msg.find("shape") != std::string::npos);
  }
}
