// Command-line driver: synthetic dataset generation, episodic training,
// robustness evaluation, trade-off curves, and a self-verification suite.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mdat/attacks.hpp"
#include "mdat/distloss.hpp"
#include "mdat/embednet.hpp"
#include "mdat/episodes.hpp"
#include "mdat/evalkit.hpp"
#include "mdat/graph.hpp"
#include "mdat/rng.hpp"
#include "mdat/trainer.hpp"

namespace {

using namespace mdat;

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto a = tok.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const auto b = tok.find_last_not_of(" \t");
    tok = tok.substr(a, b - a + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size())
      throw std::runtime_error(std::string("cli: invalid ") + what + " entry '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  for (double v : parse_double_list(s, what)) {
    if (v != std::floor(v))
      throw std::runtime_error(std::string("cli: ") + what + " entries must be integers");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cli: cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cli: cannot write '" + path + "'");
  out << text;
}

// "report.csv" -> "report", otherwise the path unchanged
std::string strip_csv(const std::string& path) {
  if (path.size() > 4 && path.compare(path.size() - 4, 4, ".csv") == 0)
    return path.substr(0, path.size() - 4);
  return path;
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  int classes = 20;
  int per_class = 60;
  int res = 32;
  std::uint64_t seed = 7;
  int way = 5;
  std::string out = "data";
};

int cmd_gen(const GenArgs& a) {
  const int n_train = a.classes * 3 / 5;
  const int n_val = a.classes / 5;
  const int n_test = a.classes - n_train - n_val;
  if (n_train < a.way) {
    std::cerr << "gen: refusing " << a.classes << " classes: the train/val/test split is "
              << n_train << "/" << n_val << "/" << n_test << ", and " << a.way
              << "-way episodes need at least " << a.way
              << " train classes. Use more --classes or a smaller --way.\n";
    return 1;
  }
  if (n_test < 2) {
    std::cerr << "gen: refusing " << a.classes << " classes: the test split would hold "
              << n_test << " class(es), and evaluation needs at least 2.\n";
    return 1;
  }

  std::string echo;
  echo += "classes=" + std::to_string(a.classes) + "\n";
  echo += "per_class=" + std::to_string(a.per_class) + "\n";
  echo += "res=" + std::to_string(a.res) + "\n";
  echo += "seed=" + std::to_string(a.seed) + "\n";
  echo += "way=" + std::to_string(a.way) + "\n";
  echo += "out=" + a.out + "\n";
  std::cout << "-- gen configuration --\n" << echo;

  const Dataset ds = generate_synthetic(a.classes, a.per_class, a.res, a.seed);
  const std::string manifest = save_dataset(ds, a.out);
  write_text_file((std::filesystem::path(a.out) / "gen-config.txt").string(), echo);

  std::cout << "wrote " << manifest << " (" << a.classes << " classes, " << a.per_class
            << " images each, split " << n_train << "/" << n_val << "/" << n_test << ")\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data = "data/manifest.txt";
  std::string out = "runs/train";
  std::string config;
  std::string resume;
  std::string widths;  // comma list override
};

int cmd_train(const CLI::App& sub, const TrainArgs& a, TrainConfig flags) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = config_from_text(read_text_file(a.config));

  // explicit flags win over the config file, which wins over defaults
  const auto hit = [&sub](const std::string& name) { return sub.count(name) > 0; };
  if (hit("--way")) cfg.c_way = flags.c_way;
  if (hit("--shot")) cfg.k_shot = flags.k_shot;
  if (hit("--queries")) cfg.q_per_class = flags.q_per_class;
  if (hit("--epochs")) cfg.epochs = flags.epochs;
  if (hit("--episodes")) cfg.episodes_per_epoch = flags.episodes_per_epoch;
  if (hit("--lr")) cfg.base_lr = flags.base_lr;
  if (hit("--halve-every")) cfg.lr_halve_every = flags.lr_halve_every;
  if (hit("--lambda")) cfg.lambda = flags.lambda;
  if (hit("--attack")) cfg.attack_kind = flags.attack_kind;
  if (hit("--eps-max")) cfg.eps_max = flags.eps_max;
  if (hit("--mode")) cfg.mode = flags.mode;
  if (hit("--knn")) cfg.k_nn = flags.k_nn;
  if (hit("--tau")) cfg.tau = flags.tau;
  if (hit("--rho")) cfg.rho = flags.rho;
  if (hit("--seed")) cfg.seed = flags.seed;
  if (hit("--val-episodes")) cfg.val_episodes = flags.val_episodes;
  if (hit("--workers")) cfg.workers = flags.workers;
  if (hit("--in-channels")) cfg.embed.in_channels = flags.embed.in_channels;
  if (hit("--widths")) cfg.embed.widths = parse_int_list(a.widths, "--widths");
  if (hit("--leaky-slope")) cfg.embed.leaky_slope = flags.embed.leaky_slope;
  if (hit("--bn-eps")) cfg.embed.bn_eps = flags.embed.bn_eps;
  if (hit("--bn-mode")) cfg.embed.bn_mode = flags.embed.bn_mode;

  validate(cfg);
  const std::string canonical = config_to_text(cfg);
  std::cout << "-- effective configuration --\n" << canonical;
  std::cout << "data=" << a.data << "\nout=" << a.out << "\n";
  if (!a.resume.empty()) std::cout << "resume=" << a.resume << "\n";
  write_text_file((std::filesystem::path(a.out) / "config.txt").string(), canonical);

  const Dataset ds = load_dataset(a.data);
  const auto on_epoch = [](const EpochLog& el) {
    std::printf("epoch %3d  lr %-10.6g loss %-10.5g val_acc %.4f\n", el.epoch, el.lr,
                el.mean_loss, el.val_acc_clean);
    std::fflush(stdout);
  };
  const TrainResult res = train(cfg, ds, a.out, a.resume, on_epoch);

  std::cout << "best epoch " << res.best.best_epoch << " (val_acc " << fmt_g(res.best.best_val)
            << "); checkpoints in " << a.out << "/{best,last}.ckpt\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint = "runs/train/best.ckpt";
  std::string data = "data/manifest.txt";
  std::string eps = "0.003,0.007,0.01";
  std::string beta = "0.5";
  std::string attack;  // empty follows the checkpoint's training attack
  int episodes = 100;
  std::uint64_t seed = 0;
  std::string out = "report.csv";
  std::string method;  // overrides the method column
  bool curve = false;
};

int cmd_eval(const EvalArgs& a) {
  std::string echo;
  echo += "checkpoint=" + a.checkpoint + "\n";
  echo += "data=" + a.data + "\n";
  echo += "eps=" + a.eps + "\n";
  echo += "beta=" + a.beta + "\n";
  echo += "attack=" + a.attack + "\n";
  echo += "episodes=" + std::to_string(a.episodes) + "\n";
  echo += "seed=" + std::to_string(a.seed) + "\n";
  echo += "out=" + a.out + "\n";
  echo += "method=" + a.method + "\n";
  echo += std::string("curve=") + (a.curve ? "1" : "0") + "\n";
  std::cout << "-- eval configuration --\n" << echo;

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  EvalReport report = evaluate(ck, ds, parse_double_list(a.eps, "--eps"), a.attack, a.episodes,
                               parse_double_list(a.beta, "--beta"), a.seed);
  if (!a.method.empty()) report.method = a.method;

  write_report(report, a.out);
  write_text_file(strip_csv(a.out) + "-config.txt", echo);

  std::printf("method %s  episodes %d  acc_clean %.4f\n", report.method.c_str(),
              report.n_episodes, report.acc_clean);
  for (std::size_t i = 0; i < report.eps_list.size(); ++i) {
    std::printf("  eps %-8s acc_adv %.4f", fmt_g(report.eps_list[i]).c_str(),
                report.acc_adv[i]);
    for (double b : report.beta_list)
      std::printf("  f_%s %.4f", fmt_g(b).c_str(),
                  f_beta(report.acc_clean, report.acc_adv[i], b));
    std::printf("\n");
  }

  if (a.curve) {
    for (std::size_t i = 0; i < report.eps_list.size(); ++i) {
      const auto pts = f_beta_curve(report.acc_clean, report.acc_adv[i], 0.0, 2.0, 0.05);
      const std::string path =
          strip_csv(a.out) + "-curve-eps" + fmt_g(report.eps_list[i]) + ".csv";
      write_curve(pts, path);
      std::cout << "wrote " << path << "\n";
    }
  }
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- curve

struct CurveArgs {
  double clean = 1.0;
  double adv = 1.0;
  double beta_min = 0.0;
  double beta_max = 2.0;
  double step = 0.05;
  std::string out = "curve.csv";
};

int cmd_curve(const CurveArgs& a) {
  std::string echo;
  echo += "clean=" + fmt_g(a.clean) + "\n";
  echo += "adv=" + fmt_g(a.adv) + "\n";
  echo += "beta_min=" + fmt_g(a.beta_min) + "\n";
  echo += "beta_max=" + fmt_g(a.beta_max) + "\n";
  echo += "step=" + fmt_g(a.step) + "\n";
  echo += "out=" + a.out + "\n";
  std::cout << "-- curve configuration --\n" << echo;

  write_curve(f_beta_curve(a.clean, a.adv, a.beta_min, a.beta_max, a.step), a.out);
  write_text_file(strip_csv(a.out) + "-config.txt", echo);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- selfcheck

struct Checker {
  int passed = 0;
  int failed = 0;
  void report(bool ok, const std::string& name, const std::string& detail = "") {
    std::printf("[%s] %s%s\n", ok ? "PASS" : "FAIL", name.c_str(),
                detail.empty() ? "" : ("  (" + detail + ")").c_str());
    std::fflush(stdout);
    (ok ? passed : failed)++;
  }
};

Tensor random_spd(int d, Rng& rng, double scale) {
  Tensor m({d, d});
  for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
  Tensor s({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += m.data[i * d + k] * m.data[j * d + k];
      s.data[i * d + j] = scale * (acc / d + (i == j ? 0.3 : 0.0));
    }
  return s;
}

Tensor identity_matrix(int d) {
  Tensor s({d, d});
  for (int i = 0; i < d; ++i) s.data[i * d + i] = 1.0;
  return s;
}

double eval_scalar(const std::function<int(Graph&, int)>& build, const Tensor& t) {
  Graph g;
  return g.value(build(g, g.input(t))).data[0];
}

void check_trace_identity(Checker& ck) {
  Rng rng(0x51d3c4a1);
  const int dims[3] = {2, 4, 8};
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int d = dims[t % 3];
    const Tensor s1 = random_spd(d, rng, 1.0);
    const Tensor s2 = random_spd(d, rng, 1.4);
    const Tensor ss = random_spd(d, rng, 0.8);
    const Tensor g = symmetric_inverse(ss, 0.0);
    const double tf = trace_form(s1, s2, g);
    const double oracle = trace_identity_oracle(s1, s2, ss);
    const double rel = std::abs(tf - oracle) / std::max(std::abs(oracle), 1e-12);
    worst = std::max(worst, rel);
  }
  ck.report(worst <= 1e-8, "whitened trace form matches eigendecomposition oracle",
            "20 triples, d in {2,4,8}, worst rel err " + fmt_g(worst));
}

void check_identity_reduction(Checker& ck) {
  Rng rng(0xa12bf07);
  const int d = 4;
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    TaskStats st;
    st.mu = Tensor({d});
    st.mu_adv = Tensor({d});
    for (auto& v : st.mu.data) v = rng.uniform(-0.03, 0.03);
    for (auto& v : st.mu_adv.data) v = rng.uniform(-0.03, 0.03);
    st.sigma = random_spd(d, rng, 0.02);
    st.sigma_adv = random_spd(d, rng, 0.02);
    st.sigma_s = identity_matrix(d);
    st.sigma_s_inv = symmetric_inverse(st.sigma_s, 1e-9);
    const double a = tcd_distance(st);
    const double b = wasserstein2_approx(st.mu, st.sigma, st.mu_adv, st.sigma_adv);
    worst = std::max(worst, std::abs(a - b));
  }
  ck.report(worst <= 1e-10, "identity whitening reduces to the moment distance",
            "10 instances, worst abs err " + fmt_g(worst));
}

void check_f_beta(Checker& ck) {
  const double cases[3][4] = {{67.30, 55.23, 0.5, 64.48},
                              {70.84, 17.25, 0.5, 43.69},
                              {67.27, 56.97, 0.5, 64.92}};
  bool ok = true;
  std::string detail;
  for (const auto& c : cases) {
    const double got = f_beta(c[0], c[1], c[2]);
    if (std::abs(got - c[3]) > 0.01) {
      ok = false;
      detail = "f(" + fmt_g(c[0]) + "," + fmt_g(c[1]) + ") = " + fmt_g(got) + ", want " +
               fmt_g(c[3]);
    }
  }
  ck.report(ok, "trade-off score reproduces the reference triples", detail);

  const double h = f_beta(60.0, 30.0, 1.0);
  const bool hm = std::abs(h - 2.0 * 60.0 * 30.0 / 90.0) <= 1e-12;
  const bool z = f_beta(0.0, 0.0, 0.5) == 0.0;
  ck.report(hm && z, "trade-off score edge cases (harmonic mean at beta 1, zero denominator)");
}

struct FdCase {
  std::string name;
  Tensor x;
  std::function<int(Graph&, int)> build;
};

void check_primitive_gradients(Checker& ck) {
  Rng rng(0xfd5eed);
  const auto rand_tensor = [&rng](std::vector<int> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
  };

  std::vector<FdCase> cases;
  {
    Tensor c = rand_tensor({3, 4}, 0.5, 1.5);
    cases.push_back({"elementwise chain", rand_tensor({3, 4}, -1.0, 1.0),
                     [c](Graph& g, int x) {
                       return g.sum_all(g.mul(g.leaky_relu(g.scale(x, 1.3), 0.2),
                                              g.add(x, g.constant(c))));
                     }});
  }
  cases.push_back({"log of clamp", rand_tensor({8}, 0.6, 2.0), [](Graph& g, int x) {
                     return g.sum_all(g.log_e(g.clamp_min(x, 0.8)));
                   }});
  {
    Tensor b = rand_tensor({3, 4}, -1.0, 1.0);
    cases.push_back({"matmul transpose trace", rand_tensor({3, 4}, -1.0, 1.0),
                     [b](Graph& g, int x) {
                       return g.trace(g.matmul(g.transpose(x), g.constant(b)));
                     }});
  }
  {
    Tensor b = rand_tensor({5, 4}, -1.0, 1.0);
    cases.push_back({"trace product", rand_tensor({4, 5}, -1.0, 1.0), [b](Graph& g, int x) {
                       return g.trace_prod(x, g.constant(b));
                     }});
  }
  {
    Tensor w = rand_tensor({3, 2, 3, 3}, -0.5, 0.5);
    cases.push_back({"conv input", rand_tensor({2, 5, 5}, 0.0, 1.0), [w](Graph& g, int x) {
                       return g.mean_all(g.conv2d_3x3(x, g.constant(w)));
                     }});
    Tensor img = rand_tensor({2, 5, 5}, 0.0, 1.0);
    cases.push_back({"conv weights", w, [img](Graph& g, int w_in) {
                       return g.mean_all(g.conv2d_3x3(g.constant(img), w_in));
                     }});
  }
  {
    Tensor gamma = rand_tensor({2}, 0.5, 1.5);
    Tensor beta = rand_tensor({2}, -0.3, 0.3);
    Tensor c = rand_tensor({2, 6, 6}, -1.0, 1.0);
    cases.push_back({"per-image batchnorm", rand_tensor({2, 6, 6}, -1.0, 1.0),
                     [gamma, beta, c](Graph& g, int x) {
                       return g.sum_all(g.mul(
                           g.batchnorm(x, g.constant(gamma), g.constant(beta), 1e-5),
                           g.constant(c)));
                     }});
  }
  {
    Tensor c = rand_tensor({2, 2, 2}, 0.5, 1.5);
    cases.push_back({"maxpool", rand_tensor({2, 4, 4}, -1.0, 1.0), [c](Graph& g, int x) {
                       return g.sum_all(g.mul(g.maxpool2x2(x), g.constant(c)));
                     }});
  }
  cases.push_back({"softmax gather log", rand_tensor({5}, -2.0, 2.0), [](Graph& g, int x) {
                     return g.log_e(
                         g.clamp_min(g.gather_scalar(g.softmax(g.scale(x, 1.0 / 0.7)), 2),
                                     1e-12));
                   }});
  {
    Tensor c = rand_tensor({3, 3}, -1.0, 1.0);
    Tensor c2 = rand_tensor({3}, -1.0, 1.0);
    cases.push_back({"row statistics", rand_tensor({6, 3}, -1.0, 1.0),
                     [c, c2](Graph& g, int x) {
                       const int cov = g.trace_prod(g.rows_covariance(x), g.constant(c));
                       const int mean = g.sum_all(g.mul(g.rows_mean(x), g.constant(c2)));
                       return g.add(cov, mean);
                     }});
  }
  {
    Tensor pool = rand_tensor({7, 3}, -1.0, 1.0);
    cases.push_back({"cosine top-k", rand_tensor({4, 3}, -1.0, 1.0), [pool](Graph& g, int x) {
                       return g.sum_all(
                           g.topk_rows_sum(g.cosine_matrix(x, g.constant(pool)), 3));
                     }});
  }
  {
    Tensor c = rand_tensor({3, 3}, -1.0, 1.0);
    cases.push_back({"stacked scalars softmax", rand_tensor({3, 3}, -1.0, 1.0),
                     [c](Graph& g, int x) {
                       const std::vector<int> xs = {g.sum_all(x), g.trace_prod(x, g.constant(c)),
                                                    g.mean_all(x)};
                       return g.gather_scalar(g.softmax(g.stack_scalars(xs)), 0);
                     }});
  }

  bool ok = true;
  std::string detail;
  double worst = 0.0;
  for (const auto& c : cases) {
    const Tensor analytic = input_gradient(c.build, c.x);
    const FdReport r = finite_difference_check(
        [&](const Tensor& t) { return eval_scalar(c.build, t); }, c.x, analytic);
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      detail = "worst '" + c.name + "' rel err " + fmt_g(r.max_rel_err);
    }
    if (r.max_rel_err > 1e-4) ok = false;
  }
  ck.report(ok, "finite differences confirm every primitive gradient", detail);
}

void check_episode_gradient(Checker& ck) {
  TrainConfig tc;
  tc.c_way = 2;
  tc.k_shot = 1;
  tc.q_per_class = 1;
  tc.mode = "both";
  tc.lambda = 0.5;
  tc.k_nn = 2;
  tc.eps_max = 0.01;
  tc.embed.widths = {4, 4, 4, 4};

  const Dataset ds = generate_synthetic(5, 4, 8, 99);
  Rng erng = derive_rng(1, "episode", 0);
  const Episode ep = sample_episode(ds, Split::train, tc.c_way, tc.k_shot, tc.q_per_class, erng);
  ParamSet params = init_params(tc.embed, 3);

  Rng nrng = derive_rng(1, "attack", 0);
  std::vector<std::vector<Tensor>> x_adv(tc.c_way);
  for (int c = 0; c < tc.c_way; ++c) {
    Tensor t = query_image(ds, ep, c, 0);
    for (auto& v : t.data) v += 0.005 * nrng.normal();
    clip01_inplace(t);
    x_adv[c].push_back(std::move(t));
  }

  const auto pools = support_pools(tc.embed, params, ds, ep);
  std::vector<const Tensor*> descs;
  for (const auto& p : pools) descs.push_back(&p);
  Tensor sigma_s, sigma_s_inv;
  task_covariance(descs, tc.rho, sigma_s, sigma_s_inv);

  ParamSet grads;
  episode_objective(tc, params, ds, ep, x_adv, &sigma_s_inv, &grads);

  Rng pick(0x10ca1);
  double worst = 0.0;
  std::string worst_name;
  for (auto& [name, g0] : grads) {
    Tensor& p = params[name];
    const int n = static_cast<int>(p.data.size());
    for (int r = 0; r < 3; ++r) {
      const auto idx = static_cast<std::size_t>(pick.uniform_int(n));
      const double h = 1e-5;
      const double keep = p.data[idx];
      p.data[idx] = keep + h;
      const double fp = episode_objective(tc, params, ds, ep, x_adv, &sigma_s_inv, nullptr);
      p.data[idx] = keep - h;
      const double fm = episode_objective(tc, params, ds, ep, x_adv, &sigma_s_inv, nullptr);
      p.data[idx] = keep;
      const double central = (fp - fm) / (2.0 * h);
      const double rel = std::abs(central - g0.data[idx]) /
                         (std::abs(central) + std::abs(g0.data[idx]) + 1e-12);
      if (rel > worst) {
        worst = rel;
        worst_name = name;
      }
    }
  }
  ck.report(worst <= 1e-4, "finite differences confirm the full episode objective gradient",
            "worst rel err " + fmt_g(worst) + " at " + worst_name);
}

void check_attack_bounds(Checker& ck) {
  EmbedConfig ec;
  ec.widths = {4, 4, 4, 4};
  const ParamSet params = init_params(ec, 11);
  const Dataset ds = generate_synthetic(5, 4, 8, 99);
  Rng erng = derive_rng(2, "episode", 0);
  const Episode ep = sample_episode(ds, Split::train, 2, 2, 1, erng);
  const auto pools = support_pools(ec, params, ds, ep);

  Rng arng = derive_rng(2, "attack", 0);
  bool ok = true;
  std::string detail;
  for (int i = 0; i < 100 && ok; ++i) {
    const int y = i % 2;
    const Tensor& x = query_image(ds, ep, y, 0);
    AttackConfig ac;
    ac.kind = (i % 2 == 0) ? "fgsm" : "pgd";
    ac.eps = arng.uniform(0.0, 0.02);
    ac.seed = 1000 + static_cast<std::uint64_t>(i);
    const LossBuilder lb = query_ce_builder(ec, params, pools, y, 2, 1.0);
    const Tensor xa = run_attack(ac, lb, x);
    if (linf_distance(xa, x) > ac.eps + 1e-12) {
      ok = false;
      detail = ac.kind + " exceeded the budget at invocation " + std::to_string(i);
    }
    for (double v : xa.data)
      if (v < 0.0 || v > 1.0) {
        ok = false;
        detail = ac.kind + " left [0,1] at invocation " + std::to_string(i);
      }
  }
  ck.report(ok, "100 randomized attacks respect the budget and stay in [0,1]", detail);

  const bool iters = pgd_iterations(0.003) == 1 && pgd_iterations(0.007) == 2 &&
                     pgd_iterations(0.01) == 3;
  ck.report(iters, "iterated attack step counts for the three budgets are 1, 2, 3");
}

void check_fgsm_fixed_point(Checker& ck, bool mutate_sign) {
  Rng rng(0xf17ed);
  Tensor x({3, 8, 8});
  for (auto& v : x.data) v = rng.uniform(0.05, 0.95);
  Tensor zeros(x.shape);
  const LossBuilder zero_loss = [&zeros](Graph& g, int xid) {
    return g.sum_all(g.mul(xid, g.constant(zeros)));
  };
  AttackHooks hooks;
  if (mutate_sign) hooks.sign_fn = +[](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 1.0); };
  const Tensor xa = fgsm(zero_loss, x, 0.01, mutate_sign ? &hooks : nullptr);
  ck.report(xa.data == x.data, "zero gradient leaves the one-step attack at a fixed point",
            mutate_sign ? "sign(0) mutated to 1" : "");
}

void check_sample_epsilon(Checker& ck) {
  Rng rng = derive_rng(3, "eps", 0);
  const double eps_max = 0.01;
  const int n = 100000;
  double sum = 0.0;
  bool bounds = true;
  for (int i = 0; i < n; ++i) {
    const double e = sample_epsilon(rng, eps_max);
    bounds = bounds && e >= 0.0 && e <= eps_max;
    sum += e;
  }
  const double mean = sum / n;
  const bool mean_ok = std::abs(mean - 0.00376) <= 0.05 * 0.00376;
  bool rejects_zero = false;
  try {
    sample_epsilon(rng, 0.0);
  } catch (const std::exception&) {
    rejects_zero = true;
  }
  ck.report(bounds && mean_ok && rejects_zero,
            "episode budgets stay in range with the expected mean",
            "mean " + fmt_g(mean) + " over 1e5 draws");
}

int cmd_selfcheck(bool mutate_sign) {
  std::cout << "-- selfcheck configuration --\nmutate_sign=" << (mutate_sign ? 1 : 0) << "\n\n";
  const auto t0 = std::chrono::steady_clock::now();
  Checker ck;
  check_trace_identity(ck);
  check_identity_reduction(ck);
  check_f_beta(ck);
  check_primitive_gradients(ck);
  check_episode_gradient(ck);
  check_attack_bounds(ck);
  check_fgsm_fixed_point(ck, mutate_sign);
  check_sample_epsilon(ck);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("\nselfcheck: %d passed, %d failed (%.1f s)\n", ck.passed, ck.failed, secs);
  return ck.failed > 0 ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic adversarial training toolkit"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a synthetic few-shot dataset");
  gen->add_option("--classes", ga.classes, "number of classes")->capture_default_str();
  gen->add_option("--per-class", ga.per_class, "images per class")->capture_default_str();
  gen->add_option("--res", ga.res, "image resolution (square)")->capture_default_str();
  gen->add_option("--seed", ga.seed, "generator seed")->capture_default_str();
  gen->add_option("--way", ga.way, "episode way the dataset must support")->capture_default_str();
  gen->add_option("--out", ga.out, "output directory")->capture_default_str();

  TrainArgs ta;
  TrainConfig tdef;
  auto* tr = app.add_subcommand("train", "train an episodic model");
  tr->add_option("--data", ta.data, "dataset manifest")->capture_default_str();
  tr->add_option("--out", ta.out, "output directory")->capture_default_str();
  tr->add_option("--config", ta.config, "key=value config file")->capture_default_str();
  tr->add_option("--resume", ta.resume, "checkpoint to continue from")->capture_default_str();
  tr->add_option("--way", tdef.c_way, "classes per episode")->capture_default_str();
  tr->add_option("--shot", tdef.k_shot, "support images per class")->capture_default_str();
  tr->add_option("--queries", tdef.q_per_class, "query images per class")->capture_default_str();
  tr->add_option("--epochs", tdef.epochs, "training epochs")->capture_default_str();
  tr->add_option("--episodes", tdef.episodes_per_epoch, "episodes per epoch")
      ->capture_default_str();
  tr->add_option("--lr", tdef.base_lr, "base learning rate")->capture_default_str();
  tr->add_option("--halve-every", tdef.lr_halve_every, "epochs between learning rate halvings")
      ->capture_default_str();
  tr->add_option("--lambda", tdef.lambda, "regularizer weight")->capture_default_str();
  tr->add_option("--attack", tdef.attack_kind, "training attack: fgsm or pgd")
      ->capture_default_str();
  tr->add_option("--eps-max", tdef.eps_max, "adversarial budget ceiling, 0 disables")
      ->capture_default_str();
  tr->add_option("--mode", tdef.mode, "regularizer mode: none, class, fea, or both")
      ->capture_default_str();
  tr->add_option("--knn", tdef.k_nn, "neighbors per descriptor")->capture_default_str();
  tr->add_option("--tau", tdef.tau, "softmax temperature")->capture_default_str();
  tr->add_option("--rho", tdef.rho, "covariance ridge")->capture_default_str();
  tr->add_option("--seed", tdef.seed, "training seed")->capture_default_str();
  tr->add_option("--val-episodes", tdef.val_episodes, "validation episodes per epoch")
      ->capture_default_str();
  tr->add_option("--workers", tdef.workers, "worker threads")->capture_default_str();
  tr->add_option("--in-channels", tdef.embed.in_channels, "input channels")
      ->capture_default_str();
  ta.widths = join_ints(tdef.embed.widths);
  tr->add_option("--widths", ta.widths, "embedding channel widths, comma separated")
      ->capture_default_str();
  tr->add_option("--leaky-slope", tdef.embed.leaky_slope, "activation negative slope")
      ->capture_default_str();
  tr->add_option("--bn-eps", tdef.embed.bn_eps, "normalization epsilon")->capture_default_str();
  tr->add_option("--bn-mode", tdef.embed.bn_mode, "normalization statistics: batch or running")
      ->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint under attack");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint to evaluate")->capture_default_str();
  ev->add_option("--data", ea.data, "dataset manifest")->capture_default_str();
  ev->add_option("--eps", ea.eps, "attack budgets, comma separated")->capture_default_str();
  ev->add_option("--beta", ea.beta, "trade-off weights, comma separated")->capture_default_str();
  ev->add_option("--attack", ea.attack, "attack kind; empty follows the checkpoint")
      ->capture_default_str();
  ev->add_option("--episodes", ea.episodes, "test episodes")->capture_default_str();
  ev->add_option("--seed", ea.seed, "evaluation seed")->capture_default_str();
  ev->add_option("--out", ea.out, "report path")->capture_default_str();
  ev->add_option("--method", ea.method, "method label override")->capture_default_str();
  ev->add_flag("--curve", ea.curve, "also write a beta sweep per budget");

  CurveArgs ca;
  auto* cu = app.add_subcommand("curve", "write a trade-off curve for fixed accuracies");
  cu->add_option("--clean", ca.clean, "clean accuracy")->capture_default_str();
  cu->add_option("--adv", ca.adv, "adversarial accuracy")->capture_default_str();
  cu->add_option("--beta-min", ca.beta_min, "sweep start")->capture_default_str();
  cu->add_option("--beta-max", ca.beta_max, "sweep end")->capture_default_str();
  cu->add_option("--step", ca.step, "sweep step")->capture_default_str();
  cu->add_option("--out", ca.out, "curve path")->capture_default_str();

  bool mutate_sign = false;
  auto* sc = app.add_subcommand("selfcheck", "run the built-in verification suite");
  sc->add_flag("--mutate-sign", mutate_sign, "flip sign(0) to 1 to prove the suite bites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(ga);
    if (*tr) return cmd_train(*tr, ta, tdef);
    if (*ev) return cmd_eval(ea);
    if (*cu) return cmd_curve(ca);
    if (*sc) return cmd_selfcheck(mutate_sign);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
