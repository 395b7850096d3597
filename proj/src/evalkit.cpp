#include "mdat/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mdat/dn4head.hpp"
#include "mdat/parallel.hpp"

namespace mdat {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

double f_beta(double acc_clean, double acc_adv, double beta) {
  if (acc_clean < 0.0 || acc_adv < 0.0)
    throw std::invalid_argument("evalkit: accuracies must be non-negative");
  if (beta < 0.0) throw std::invalid_argument("evalkit: beta must be non-negative");
  const double b2 = beta * beta;
  const double denom = b2 * acc_clean + acc_adv;
  if (denom == 0.0) return 0.0;
  return (1.0 + b2) * acc_clean * acc_adv / denom;
}

std::vector<std::pair<double, double>> f_beta_curve(double acc_clean, double acc_adv,
                                                    double beta_min, double beta_max,
                                                    double step) {
  if (!(beta_min >= 0.0 && beta_min < beta_max))
    throw std::invalid_argument("evalkit: need 0 <= beta_min < beta_max");
  if (!(step > 0.0)) throw std::invalid_argument("evalkit: step must be positive");
  std::vector<std::pair<double, double>> out;
  for (int i = 0;; ++i) {
    const double beta = beta_min + i * step;
    if (beta > beta_max + 1e-9) break;
    out.emplace_back(beta, f_beta(acc_clean, acc_adv, beta));
  }
  return out;
}

EvalReport evaluate(const Checkpoint& ck, const Dataset& ds, std::vector<double> eps_list,
                    const std::string& attack_kind, int n_episodes,
                    std::vector<double> beta_list, std::uint64_t seed) {
  if (eps_list.empty()) throw std::invalid_argument("evalkit: eps_list must be non-empty");
  if (n_episodes < 1) throw std::invalid_argument("evalkit: need at least one episode");
  for (double e : eps_list)
    if (e < 0.0) throw std::invalid_argument("evalkit: negative epsilon");
  std::sort(eps_list.begin(), eps_list.end());
  eps_list.erase(std::unique(eps_list.begin(), eps_list.end()), eps_list.end());

  const TrainConfig& cfg = ck.config;
  const std::string kind = attack_kind.empty() ? cfg.attack_kind : attack_kind;
  if (kind != "fgsm" && kind != "pgd")
    throw std::invalid_argument("evalkit: unknown attack kind '" + kind + "'");

  const std::vector<int> test_ids = ds.class_ids(Split::test);
  const int c_way = std::min(cfg.c_way, static_cast<int>(test_ids.size()));
  if (c_way < 2)
    throw std::runtime_error("evalkit: test split has " + std::to_string(test_ids.size()) +
                             " classes, need at least 2");
  const ParamSet* running = cfg.embed.bn_mode == "running" ? &ck.stats : nullptr;

  const int ne = static_cast<int>(eps_list.size());
  const int n_q = c_way * cfg.q_per_class;
  struct Slot {
    int clean = 0;
    std::vector<int> adv;
  };
  std::vector<Slot> slots(n_episodes);

  parallel_for(n_episodes, cfg.workers, [&](int e) {
    try {
      Rng rng = derive_rng(seed, "eval-episode", static_cast<std::uint64_t>(e));
      Episode ep = sample_episode(ds, Split::test, c_way, cfg.k_shot, cfg.q_per_class, rng);
      ep.seed = static_cast<std::uint64_t>(e);
      const std::vector<Tensor> pools = support_pools(cfg.embed, ck.params, ds, ep, running);

      Slot& slot = slots[e];
      slot.adv.assign(ne, 0);
      for (int c = 0; c < c_way; ++c)
        for (int q = 0; q < cfg.q_per_class; ++q) {
          const Tensor& x = query_image(ds, ep, c, q);
          const Tensor p = predict_query(cfg.embed, ck.params, pools, x, cfg.k_nn, cfg.tau,
                                         running);
          const bool clean_ok = argmax_class(p) == c;
          if (clean_ok) ++slot.clean;
          for (int ei = 0; ei < ne; ++ei) {
            if (eps_list[ei] == 0.0) {
              if (clean_ok) ++slot.adv[ei];
              continue;
            }
            AttackConfig atk;
            atk.kind = kind;
            atk.eps = eps_list[ei];
            atk.seed = derive_rng(seed, "eval-attack", static_cast<std::uint64_t>(e),
                                  static_cast<std::uint64_t>(ei),
                                  static_cast<std::uint64_t>(c * cfg.q_per_class + q))
                           .next_u64();
            const LossBuilder build =
                query_ce_builder(cfg.embed, ck.params, pools, c, cfg.k_nn, cfg.tau, running);
            const Tensor x_adv = run_attack(atk, build, x);
            const Tensor pa = predict_query(cfg.embed, ck.params, pools, x_adv, cfg.k_nn,
                                            cfg.tau, running);
            if (argmax_class(pa) == c) ++slot.adv[ei];
          }
        }
    } catch (const std::exception& ex) {
      throw std::runtime_error("evalkit: episode " + std::to_string(e) + " failed: " +
                               ex.what());
    }
  });

  EvalReport r;
  r.method = cfg.mode;
  r.n_episodes = n_episodes;
  r.eps_list = eps_list;
  r.beta_list = std::move(beta_list);
  long clean_total = 0;
  std::vector<long> adv_total(ne, 0);
  for (const Slot& s : slots) {
    clean_total += s.clean;
    for (int ei = 0; ei < ne; ++ei) adv_total[ei] += s.adv[ei];
  }
  const double denom = static_cast<double>(n_episodes) * n_q;
  r.acc_clean = clean_total / denom;
  for (int ei = 0; ei < ne; ++ei) r.acc_adv.push_back(adv_total[ei] / denom);
  return r;
}

void write_report(const EvalReport& report, const std::string& path) {
  if (report.eps_list.size() != report.acc_adv.size())
    throw std::invalid_argument("evalkit: eps/accuracy lists out of step");
  std::vector<std::size_t> order(report.eps_list.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.eps_list[a] < report.eps_list[b];
  });

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("evalkit: cannot write " + path);
  out << "method,epsilon,acc_clean,acc_adv,f_beta,beta\n";
  out << report.method << ",0," << fmt_double(report.acc_clean) << ","
      << fmt_double(report.acc_clean) << "," << fmt_double(report.acc_clean) << ",0\n";
  for (std::size_t i : order) {
    const double eps = report.eps_list[i];
    const double adv = report.acc_adv[i];
    if (report.beta_list.empty()) {
      out << report.method << "," << fmt_double(eps) << "," << fmt_double(report.acc_clean)
          << "," << fmt_double(adv) << ",,\n";
    } else {
      for (double beta : report.beta_list)
        out << report.method << "," << fmt_double(eps) << "," << fmt_double(report.acc_clean)
            << "," << fmt_double(adv) << "," << fmt_double(f_beta(report.acc_clean, adv, beta))
            << "," << fmt_double(beta) << "\n";
    }
  }
  if (!out) throw std::runtime_error("evalkit: write failed for " + path);
}

EvalReport parse_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("evalkit: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "method,epsilon,acc_clean,acc_adv,f_beta,beta")
    throw std::runtime_error("evalkit: " + path + ": bad report header");
  EvalReport r;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != 6)
      throw std::runtime_error("evalkit: " + path + ": malformed row '" + line + "'");
    if (first) {
      r.method = f[0];
      r.acc_clean = std::stod(f[2]);
      first = false;
      continue;
    }
    const double eps = std::stod(f[1]);
    const double adv = std::stod(f[3]);
    if (r.eps_list.empty() || r.eps_list.back() != eps) {
      r.eps_list.push_back(eps);
      r.acc_adv.push_back(adv);
      if (!f[5].empty() && r.eps_list.size() == 1) r.beta_list.push_back(std::stod(f[5]));
    } else if (!f[5].empty() && r.eps_list.size() == 1) {
      r.beta_list.push_back(std::stod(f[5]));
    }
  }
  if (first) throw std::runtime_error("evalkit: " + path + ": report has no rows");
  return r;
}

void write_curve(const std::vector<std::pair<double, double>>& curve, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("evalkit: cannot write " + path);
  out << "beta,f_beta\n";
  for (const auto& [beta, f] : curve)
    out << fmt_double(beta) << "," << fmt_double(f) << "\n";
  if (!out) throw std::runtime_error("evalkit: write failed for " + path);
}

}  // namespace mdat
