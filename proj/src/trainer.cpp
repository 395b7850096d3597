#include "mdat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "mdat/dn4head.hpp"
#include "mdat/distloss.hpp"
#include "mdat/parallel.hpp"

namespace mdat {

namespace fs = std::filesystem;

namespace {

constexpr char kCkptMagic[4] = {'M', 'D', 'C', 'K'};
constexpr std::uint16_t kCkptVersion = 1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---- config text block -----------------------------------------------------

std::string config_fields_text(const TrainConfig& c) {
  std::ostringstream out;
  out << "c_way=" << c.c_way << "\n";
  out << "k_shot=" << c.k_shot << "\n";
  out << "q_per_class=" << c.q_per_class << "\n";
  out << "epochs=" << c.epochs << "\n";
  out << "episodes_per_epoch=" << c.episodes_per_epoch << "\n";
  out << "base_lr=" << fmt_double(c.base_lr) << "\n";
  out << "lr_halve_every=" << c.lr_halve_every << "\n";
  out << "lambda=" << fmt_double(c.lambda) << "\n";
  out << "attack_kind=" << c.attack_kind << "\n";
  out << "eps_max=" << fmt_double(c.eps_max) << "\n";
  out << "mode=" << c.mode << "\n";
  out << "fea_stats=" << c.fea_stats << "\n";
  out << "k_nn=" << c.k_nn << "\n";
  out << "tau=" << fmt_double(c.tau) << "\n";
  out << "rho=" << fmt_double(c.rho) << "\n";
  out << "seed=" << c.seed << "\n";
  out << "val_episodes=" << c.val_episodes << "\n";
  out << "workers=" << c.workers << "\n";
  out << "embed_in_channels=" << c.embed.in_channels << "\n";
  out << "embed_widths=";
  for (std::size_t i = 0; i < c.embed.widths.size(); ++i)
    out << (i ? "," : "") << c.embed.widths[i];
  out << "\n";
  out << "embed_leaky_slope=" << fmt_double(c.embed.leaky_slope) << "\n";
  out << "embed_bn_eps=" << fmt_double(c.embed.bn_eps) << "\n";
  out << "embed_bn_mode=" << c.embed.bn_mode << "\n";
  return out.str();
}

std::string config_text(const Checkpoint& ck) {
  std::ostringstream out;
  out << config_fields_text(ck.config);
  out << "epoch=" << ck.epoch << "\n";
  out << "next_episode=" << ck.next_episode << "\n";
  out << "adam_step=" << ck.opt.step << "\n";
  out << "best_val=" << fmt_double(ck.best_val) << "\n";
  out << "best_epoch=" << ck.best_epoch << "\n";
  return out.str();
}

bool apply_config_kv(TrainConfig& c, const std::string& key, const std::string& val) {
  if (key == "c_way") c.c_way = std::stoi(val);
  else if (key == "k_shot") c.k_shot = std::stoi(val);
  else if (key == "q_per_class") c.q_per_class = std::stoi(val);
  else if (key == "epochs") c.epochs = std::stoi(val);
  else if (key == "episodes_per_epoch") c.episodes_per_epoch = std::stoi(val);
  else if (key == "base_lr") c.base_lr = std::stod(val);
  else if (key == "lr_halve_every") c.lr_halve_every = std::stoi(val);
  else if (key == "lambda") c.lambda = std::stod(val);
  else if (key == "attack_kind") c.attack_kind = val;
  else if (key == "eps_max") c.eps_max = std::stod(val);
  else if (key == "mode") c.mode = val;
  else if (key == "fea_stats") c.fea_stats = val;
  else if (key == "k_nn") c.k_nn = std::stoi(val);
  else if (key == "tau") c.tau = std::stod(val);
  else if (key == "rho") c.rho = std::stod(val);
  else if (key == "seed") c.seed = std::stoull(val);
  else if (key == "val_episodes") c.val_episodes = std::stoi(val);
  else if (key == "workers") c.workers = std::stoi(val);
  else if (key == "embed_in_channels") c.embed.in_channels = std::stoi(val);
  else if (key == "embed_widths") {
    c.embed.widths.clear();
    std::istringstream ws(val);
    std::string tok;
    while (std::getline(ws, tok, ',')) c.embed.widths.push_back(std::stoi(tok));
  } else if (key == "embed_leaky_slope") c.embed.leaky_slope = std::stod(val);
  else if (key == "embed_bn_eps") c.embed.bn_eps = std::stod(val);
  else if (key == "embed_bn_mode") c.embed.bn_mode = val;
  else return false;
  return true;
}

void parse_config_text(const std::string& text, Checkpoint& ck) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("checkpoint: malformed config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (apply_config_kv(ck.config, key, val)) continue;
    if (key == "epoch") ck.epoch = std::stoi(val);
    else if (key == "next_episode") ck.next_episode = std::stoull(val);
    else if (key == "adam_step") ck.opt.step = std::stoll(val);
    else if (key == "best_val") ck.best_val = std::stod(val);
    else if (key == "best_epoch") ck.best_epoch = std::stoi(val);
    else throw std::runtime_error("checkpoint: unknown config key '" + key + "'");
  }
}

// ---- binary plumbing -------------------------------------------------------

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class CkptReader {
 public:
  CkptReader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(
        static_cast<std::uint8_t>(b_[pos_]) |
        (static_cast<std::uint16_t>(static_cast<std::uint8_t>(b_[pos_ + 1])) << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(b_.data() + pos_, kCkptMagic, 4) != 0)
      throw std::runtime_error("checkpoint: " + path_ + ": bad magic");
    pos_ += 4;
  }
  void expect_end() const {
    if (pos_ != b_.size())
      throw std::runtime_error("checkpoint: " + path_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size())
      throw std::runtime_error("checkpoint: " + path_ + ": truncated file");
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_table(std::string& out, const ParamSet& table) {
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_f64(out, v);
  }
}

ParamSet read_table(CkptReader& r) {
  ParamSet table;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint16_t nlen = r.u16();
    const std::string name = r.bytes(nlen);
    const auto ndim = static_cast<std::uint8_t>(r.bytes(1)[0]);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (double& v : t.data) v = r.f64();
    table.emplace(name, std::move(t));
  }
  return table;
}

void check_param_set(const ParamSet& got, const ParamSet& expect, const std::string& path,
                     const std::string& what) {
  for (const auto& [name, t] : expect) {
    const auto it = got.find(name);
    if (it == got.end())
      throw std::runtime_error("checkpoint: " + path + ": missing " + what + " tensor '" + name +
                               "'");
    if (it->second.shape != t.shape)
      throw std::runtime_error("checkpoint: " + path + ": tensor '" + name + "' has shape " +
                               shape_str(it->second.shape) + ", expected " + shape_str(t.shape));
  }
  for (const auto& [name, t] : got)
    if (!expect.count(name))
      throw std::runtime_error("checkpoint: " + path + ": unexpected " + what + " tensor '" +
                               name + "'");
}

// ---- episode computation ---------------------------------------------------

// Support images embedded once per episode; the graph is kept so the
// gradient contribution flowing through the descriptor pools can be pushed
// back into the parameters with a single extra backward pass.
struct SupportCtx {
  Graph g;
  std::map<std::string, int> param_ids;
  std::vector<std::vector<int>> desc;  // [c_way][k_shot] node ids
  std::vector<Tensor> pools;           // [c_way] of [k_shot*m, d]
};

std::unique_ptr<SupportCtx> build_support(const EmbedConfig& embed, const ParamSet& params,
                                          const Dataset& ds, const Episode& ep, bool trainable,
                                          const ParamSet* running) {
  auto ctx = std::make_unique<SupportCtx>();
  ctx->param_ids = place_params(ctx->g, params, trainable);
  ctx->desc.resize(ep.c_way);
  ctx->pools.reserve(ep.c_way);
  for (int c = 0; c < ep.c_way; ++c) {
    for (int k = 0; k < ep.k_shot; ++k) {
      const int img = ctx->g.constant(support_image(ds, ep, c, k));
      ctx->desc[c].push_back(embed_nodes(ctx->g, embed, ctx->param_ids, img, running));
    }
    const Tensor& first = ctx->g.value(ctx->desc[c][0]);
    const int m = first.shape[0], d = first.shape[1];
    Tensor pool({ep.k_shot * m, d});
    for (int k = 0; k < ep.k_shot; ++k) {
      const Tensor& dk = ctx->g.value(ctx->desc[c][k]);
      std::copy(dk.data.begin(), dk.data.end(),
                pool.data.begin() + static_cast<std::size_t>(k) * m * d);
    }
    ctx->pools.push_back(std::move(pool));
  }
  return ctx;
}

struct QuerySlot {
  double loss = 0.0;
  ParamSet grads;
  std::vector<Tensor> pool_grads;
};

double objective_impl(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                      const Episode& ep, const std::vector<std::vector<Tensor>>& x_adv,
                      const Tensor* sigma_s_inv, ParamSet* grads, const ParamSet* running,
                      SupportCtx& sup) {
  const bool adv_active = !x_adv.empty();
  const bool want_fea =
      adv_active && cfg.lambda != 0.0 && (cfg.mode == "fea" || cfg.mode == "both");
  const bool want_class =
      adv_active && cfg.lambda != 0.0 && (cfg.mode == "class" || cfg.mode == "both");
  if (want_fea && sigma_s_inv == nullptr)
    throw std::invalid_argument("trainer: feature regularizer needs the task whitening matrix");
  if (adv_active &&
      (static_cast<int>(x_adv.size()) != ep.c_way ||
       static_cast<int>(x_adv[0].size()) != ep.q_per_class))
    throw std::invalid_argument("trainer: adversarial image grid does not match the episode");

  const int n_q = ep.c_way * ep.q_per_class;
  std::vector<QuerySlot> slots(n_q);

  parallel_for(n_q, cfg.workers, [&](int qi) {
    const int c = qi / ep.q_per_class;
    const int q = qi % ep.q_per_class;
    Graph g;
    const auto pids = place_params(g, params, grads != nullptr);
    std::vector<int> pool_ids(ep.c_way);
    for (int cc = 0; cc < ep.c_way; ++cc)
      pool_ids[cc] = grads ? g.input(sup.pools[cc]) : g.constant(sup.pools[cc]);

    const int xd =
        embed_nodes(g, cfg.embed, pids, g.constant(query_image(ds, ep, c, q)), running);
    const int p = predict_nodes(g, class_scores_nodes(g, xd, pool_ids, cfg.k_nn), cfg.tau);
    const int ce = cross_entropy_nodes(g, p, c);

    int root;
    if (!adv_active) {
      // Zero-budget attack: the adversarial image equals the clean one, so
      // the adversarial term duplicates the clean term and the regularizer
      // vanishes identically.
      root = g.scale(ce, 2.0);
    } else {
      const int xad = embed_nodes(g, cfg.embed, pids, g.constant(x_adv[c][q]), running);
      const int pa = predict_nodes(g, class_scores_nodes(g, xad, pool_ids, cfg.k_nn), cfg.tau);
      const int cea = cross_entropy_nodes(g, pa, c);
      root = g.add(ce, cea);
      int reg = -1;
      if (want_fea) {
        const StatNodes sc = descriptor_stats_nodes(g, xd);
        const StatNodes sa = descriptor_stats_nodes(g, xad);
        reg = tcd_distance_nodes(g, sc, sa, g.constant(*sigma_s_inv));
      }
      if (want_class) {
        const int lc = class_consistency_nodes(g, p, pa);
        reg = reg < 0 ? lc : g.add(reg, lc);
      }
      if (reg >= 0) root = g.add(root, g.scale(reg, cfg.lambda));
    }

    QuerySlot& slot = slots[qi];
    slot.loss = g.value(root).data[0];
    if (grads) {
      g.backward(root, GradTargets{true, true});
      for (const auto& [name, id] : pids) slot.grads.emplace(name, g.gradient(id));
      for (int cc = 0; cc < ep.c_way; ++cc) slot.pool_grads.push_back(g.gradient(pool_ids[cc]));
    }
  });

  double loss_sum = 0.0;
  for (const QuerySlot& s : slots) loss_sum += s.loss;
  const double inv_n = 1.0 / n_q;

  if (grads) {
    ParamSet acc;
    for (const auto& [name, t] : params) acc.emplace(name, Tensor(t.shape));
    std::vector<Tensor> pool_acc;
    for (int cc = 0; cc < ep.c_way; ++cc) pool_acc.emplace_back(sup.pools[cc].shape);
    for (const QuerySlot& s : slots) {
      for (auto& [name, t] : acc) {
        const Tensor& g = s.grads.at(name);
        for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += g.data[i];
      }
      for (int cc = 0; cc < ep.c_way; ++cc) {
        Tensor& t = pool_acc[cc];
        const Tensor& g = s.pool_grads[cc];
        for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += g.data[i];
      }
    }

    // Push the pooled-descriptor gradients through the support embeddings.
    const int m = sup.g.value(sup.desc[0][0]).shape[0];
    const int d = sup.g.value(sup.desc[0][0]).shape[1];
    int root = -1;
    for (int c = 0; c < ep.c_way; ++c)
      for (int k = 0; k < ep.k_shot; ++k) {
        Tensor chunk({m, d});
        std::copy(pool_acc[c].data.begin() + static_cast<std::size_t>(k) * m * d,
                  pool_acc[c].data.begin() + static_cast<std::size_t>(k + 1) * m * d,
                  chunk.data.begin());
        const int term =
            sup.g.sum_all(sup.g.mul(sup.desc[c][k], sup.g.constant(std::move(chunk))));
        root = root < 0 ? term : sup.g.add(root, term);
      }
    sup.g.backward(root, GradTargets{false, true});
    for (const auto& [name, id] : sup.param_ids) {
      const Tensor sg = sup.g.gradient(id);
      Tensor& t = acc[name];
      for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += sg.data[i];
    }

    for (auto& [name, t] : acc) {
      for (double& v : t.data) v *= inv_n;
      auto it = grads->find(name);
      if (it == grads->end()) grads->emplace(name, std::move(t));
      else {
        if (it->second.shape != t.shape)
          throw std::invalid_argument("trainer: gradient shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < t.numel(); ++i) it->second.data[i] += t.data[i];
      }
    }
  }
  return loss_sum * inv_n;
}

double clean_accuracy(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                      Split split, int n_episodes, std::uint64_t salt, const ParamSet* running) {
  const std::vector<int> ids = ds.class_ids(split);
  const int c_way = std::min(cfg.c_way, static_cast<int>(ids.size()));
  if (c_way < 2 || n_episodes < 1) return 0.0;
  for (int id : ids)
    if (static_cast<int>(ds.classes[id].images.size()) < cfg.k_shot + cfg.q_per_class) return 0.0;
  std::vector<int> correct(n_episodes, 0);
  for (int e = 0; e < n_episodes; ++e) {
    Rng rng = derive_rng(cfg.seed, "val", salt, static_cast<std::uint64_t>(e));
    Episode ep = sample_episode(ds, split, c_way, cfg.k_shot, cfg.q_per_class, rng);
    const std::vector<Tensor> pools = support_pools(cfg.embed, params, ds, ep, running);
    int ok = 0;
    for (int c = 0; c < c_way; ++c)
      for (int q = 0; q < ep.q_per_class; ++q) {
        const Tensor p = predict_query(cfg.embed, params, pools, query_image(ds, ep, c, q),
                                       cfg.k_nn, cfg.tau, running);
        if (argmax_class(p) == c) ++ok;
      }
    correct[e] = ok;
  }
  long total_ok = 0;
  for (int v : correct) total_ok += v;
  return static_cast<double>(total_ok) /
         (static_cast<double>(n_episodes) * c_way * cfg.q_per_class);
}

std::string episode_log_line(int epoch, std::uint64_t global, double eps, const Episode& ep) {
  std::ostringstream out;
  out << epoch << "," << global << "," << fmt_double(eps) << ",";
  for (std::size_t c = 0; c < ep.class_ids.size(); ++c)
    out << (c ? ";" : "") << ep.class_ids[c];
  out << ",";
  for (std::size_t c = 0; c < ep.support_indices.size(); ++c) {
    if (c) out << "|";
    for (std::size_t k = 0; k < ep.support_indices[c].size(); ++k)
      out << (k ? ":" : "") << ep.support_indices[c][k];
  }
  out << ",";
  for (std::size_t c = 0; c < ep.query_indices.size(); ++c) {
    if (c) out << "|";
    for (std::size_t k = 0; k < ep.query_indices[c].size(); ++k)
      out << (k ? ":" : "") << ep.query_indices[c][k];
  }
  return out.str();
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.c_way < 2) throw std::invalid_argument("trainer: c_way must be at least 2");
  if (cfg.k_shot < 1 || cfg.q_per_class < 1)
    throw std::invalid_argument("trainer: k_shot and q_per_class must be positive");
  if (cfg.epochs < 1 || cfg.episodes_per_epoch < 1)
    throw std::invalid_argument("trainer: epochs and episodes_per_epoch must be positive");
  if (cfg.lr_halve_every < 1)
    throw std::invalid_argument("trainer: lr_halve_every must be positive");
  if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("trainer: base_lr must be positive");
  if (cfg.lambda < 0.0) throw std::invalid_argument("trainer: lambda must be non-negative");
  if (cfg.attack_kind != "fgsm" && cfg.attack_kind != "pgd")
    throw std::invalid_argument("trainer: attack kind must be fgsm or pgd");
  if (!(cfg.eps_max >= 0.0 && cfg.eps_max < 1.0))
    throw std::invalid_argument("trainer: eps_max must lie in [0,1)");
  if (cfg.mode != "none" && cfg.mode != "class" && cfg.mode != "fea" && cfg.mode != "both")
    throw std::invalid_argument("trainer: mode must be one of none/class/fea/both");
  if (cfg.k_nn < 1) throw std::invalid_argument("trainer: k_nn must be positive");
  if (!(cfg.tau > 0.0)) throw std::invalid_argument("trainer: tau must be positive");
  if (!(cfg.rho > 0.0)) throw std::invalid_argument("trainer: rho must be positive");
  if (cfg.val_episodes < 0)
    throw std::invalid_argument("trainer: val_episodes must be non-negative");
  if (cfg.workers < 1) throw std::invalid_argument("trainer: workers must be positive");
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string out;
  out.append(kCkptMagic, 4);
  put_u16(out, kCkptVersion);
  const std::string cfg = config_text(ck);
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_table(out, ck.params);
  ParamSet opt;
  for (const auto& [name, t] : ck.opt.m) opt.emplace("m." + name, t);
  for (const auto& [name, t] : ck.opt.v) opt.emplace("v." + name, t);
  for (const auto& [name, t] : ck.stats) opt.emplace("stat." + name, t);
  put_table(out, opt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();

  CkptReader r(bytes, path);
  r.expect_magic();
  const std::uint16_t ver = r.u16();
  if (ver != kCkptVersion)
    throw std::runtime_error("checkpoint: " + path + ": unsupported version " +
                             std::to_string(ver));
  Checkpoint ck;
  parse_config_text(r.bytes(r.u32()), ck);
  validate(ck.config);
  ck.params = read_table(r);
  const ParamSet opt = read_table(r);
  r.expect_end();

  // Parameter names must line up exactly with what the architecture defines.
  const ParamSet expect = init_params(ck.config.embed, 0);
  check_param_set(ck.params, expect, path, "parameter");
  ParamSet expect_opt;
  for (const auto& [name, t] : expect) {
    expect_opt.emplace("m." + name, Tensor(t.shape));
    expect_opt.emplace("v." + name, Tensor(t.shape));
  }
  if (ck.config.embed.bn_mode == "running")
    for (const auto& [name, t] : init_running_stats(ck.config.embed))
      expect_opt.emplace("stat." + name, Tensor(t.shape));
  check_param_set(opt, expect_opt, path, "state");
  for (const auto& [name, t] : opt) {
    if (name.rfind("m.", 0) == 0) ck.opt.m.emplace(name.substr(2), t);
    else if (name.rfind("v.", 0) == 0) ck.opt.v.emplace(name.substr(2), t);
    else ck.stats.emplace(name.substr(5), t);
  }
  return ck;
}

std::vector<Tensor> support_pools(const EmbedConfig& cfg, const ParamSet& params,
                                  const Dataset& ds, const Episode& ep,
                                  const ParamSet* running) {
  std::vector<Tensor> pools;
  pools.reserve(ep.c_way);
  for (int c = 0; c < ep.c_way; ++c) {
    std::vector<Tensor> descs;
    for (int k = 0; k < ep.k_shot; ++k)
      descs.push_back(embed(cfg, params, support_image(ds, ep, c, k), running));
    const int m = descs[0].shape[0], d = descs[0].shape[1];
    Tensor pool({ep.k_shot * m, d});
    for (int k = 0; k < ep.k_shot; ++k)
      std::copy(descs[k].data.begin(), descs[k].data.end(),
                pool.data.begin() + static_cast<std::size_t>(k) * m * d);
    pools.push_back(std::move(pool));
  }
  return pools;
}

LossBuilder query_ce_builder(const EmbedConfig& cfg, const ParamSet& params,
                             const std::vector<Tensor>& pools, int y_true, int k_nn, double tau,
                             const ParamSet* running) {
  return [&cfg, &params, &pools, y_true, k_nn, tau, running](Graph& g, int x) {
    const auto pids = place_params(g, params, false);
    std::vector<int> pool_ids;
    pool_ids.reserve(pools.size());
    for (const Tensor& p : pools) pool_ids.push_back(g.constant(p));
    const int desc = embed_nodes(g, cfg, pids, x, running);
    const int p = predict_nodes(g, class_scores_nodes(g, desc, pool_ids, k_nn), tau);
    return cross_entropy_nodes(g, p, y_true);
  };
}

Tensor predict_query(const EmbedConfig& cfg, const ParamSet& params,
                     const std::vector<Tensor>& pools, const Tensor& x, int k_nn, double tau,
                     const ParamSet* running) {
  Graph g;
  const auto pids = place_params(g, params, false);
  std::vector<int> pool_ids;
  pool_ids.reserve(pools.size());
  for (const Tensor& p : pools) pool_ids.push_back(g.constant(p));
  const int desc = embed_nodes(g, cfg, pids, g.constant(x), running);
  return g.value(predict_nodes(g, class_scores_nodes(g, desc, pool_ids, k_nn), tau));
}

double episode_objective(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                         const Episode& ep, const std::vector<std::vector<Tensor>>& x_adv,
                         const Tensor* sigma_s_inv, ParamSet* grads, const ParamSet* running) {
  auto sup = build_support(cfg.embed, params, ds, ep, grads != nullptr, running);
  return objective_impl(cfg, params, ds, ep, x_adv, sigma_s_inv, grads, running, *sup);
}

EpisodeResult episode_loss(const TrainConfig& cfg, const ParamSet& params, const Dataset& ds,
                           const Episode& ep, const AttackConfig& attack,
                           const ParamSet* running) {
  if (attack.eps < 0.0 || attack.eps > cfg.eps_max + 1e-12)
    throw std::invalid_argument("trainer: attack budget outside [0, eps_max]");
  EpisodeResult res;
  res.eps = attack.eps;
  try {
    auto sup = build_support(cfg.embed, params, ds, ep, true, running);

    std::vector<std::vector<Tensor>> x_adv;
    if (attack.eps > 0.0) {
      x_adv.resize(ep.c_way);
      const int n_q = ep.c_way * ep.q_per_class;
      for (int c = 0; c < ep.c_way; ++c) x_adv[c].resize(ep.q_per_class);
      parallel_for(n_q, cfg.workers, [&](int qi) {
        const int c = qi / ep.q_per_class;
        const int q = qi % ep.q_per_class;
        AttackConfig per = attack;
        per.seed = derive_rng(attack.seed, "query", static_cast<std::uint64_t>(qi)).next_u64();
        const LossBuilder build =
            query_ce_builder(cfg.embed, params, sup->pools, c, cfg.k_nn, cfg.tau, running);
        x_adv[c][q] = run_attack(per, build, query_image(ds, ep, c, q));
      });
    }

    Tensor sigma_s, sigma_s_inv;
    const Tensor* sinv = nullptr;
    if (!x_adv.empty() && cfg.lambda != 0.0 && (cfg.mode == "fea" || cfg.mode == "both")) {
      std::vector<const Tensor*> descs;
      for (int c = 0; c < ep.c_way; ++c)
        for (int k = 0; k < ep.k_shot; ++k) descs.push_back(&sup->g.value(sup->desc[c][k]));
      task_covariance(descs, cfg.rho, sigma_s, sigma_s_inv);
      sinv = &sigma_s_inv;
    }

    res.loss = objective_impl(cfg, params, ds, ep, x_adv, sinv, &res.grads, running, *sup);
    if (!std::isfinite(res.loss))
      throw std::runtime_error("trainer: non-finite episode loss");
  } catch (const std::exception& e) {
    throw std::runtime_error("trainer: episode failed (seed " + std::to_string(ep.seed) +
                             "): " + e.what());
  }
  return res;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (state.m.empty())
    for (const auto& [name, t] : params) {
      state.m.emplace(name, Tensor(t.shape));
      state.v.emplace(name, Tensor(t.shape));
    }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    if (git == grads.end())
      throw std::invalid_argument("trainer: missing gradient for '" + name + "'");
    const Tensor& g = git->second;
    if (g.shape != p.shape)
      throw std::invalid_argument("trainer: gradient shape mismatch for '" + name + "'");
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m.data[i] = b1 * m.data[i] + (1.0 - b1) * g.data[i];
      v.data[i] = b2 * v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
      p.data[i] -= lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + eps);
    }
  }
}

double lr_schedule(int epoch, double base_lr, int halve_every) {
  if (epoch < 0) throw std::invalid_argument("trainer: epoch must be non-negative");
  if (halve_every < 1) throw std::invalid_argument("trainer: halve_every must be positive");
  return base_lr * std::pow(0.5, static_cast<double>(epoch / halve_every));
}

std::string config_to_text(const TrainConfig& cfg) { return config_fields_text(cfg); }

TrainConfig config_from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    if (line[start] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  ": expected key=value, got '" + line + "'");
    const std::string key = line.substr(start, eq - start);
    const std::string val = line.substr(eq + 1);
    bool known = false;
    try {
      known = apply_config_kv(cfg, key, val);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  ": invalid value '" + val + "' for key '" + key + "'");
    }
    if (!known)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
  }
  return cfg;
}

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const std::string& out_dir,
                  const std::string& resume_from, const EpochCallback& on_epoch) {
  validate(cfg);
  fs::create_directories(out_dir);

  Checkpoint ck;
  bool resumed = !resume_from.empty();
  if (resumed) {
    ck = load_checkpoint(resume_from);
    if (config_fields_text(cfg) != config_fields_text(ck.config))
      throw std::invalid_argument("trainer: resume config differs from the checkpoint's");
  } else {
    ck.config = cfg;
    ck.params = init_params(cfg.embed, cfg.seed);
    if (cfg.embed.bn_mode == "running") ck.stats = init_running_stats(cfg.embed);
    for (const auto& [name, t] : ck.params) {
      ck.opt.m.emplace(name, Tensor(t.shape));
      ck.opt.v.emplace(name, Tensor(t.shape));
    }
  }

  const auto log_mode = resumed ? std::ios::app : std::ios::trunc;
  std::ofstream metrics(fs::path(out_dir) / "metrics.csv", log_mode);
  std::ofstream eplog(fs::path(out_dir) / "episodes.log", log_mode);
  if (!metrics || !eplog)
    throw std::runtime_error("trainer: cannot write logs in " + out_dir);

  TrainResult result;
  const ParamSet* running = cfg.embed.bn_mode == "running" ? &ck.stats : nullptr;

  for (int epoch = ck.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_halve_every);
    double loss_sum = 0.0;
    for (int i = 0; i < cfg.episodes_per_epoch; ++i) {
      const std::uint64_t g =
          static_cast<std::uint64_t>(epoch) * cfg.episodes_per_epoch + i;
      Rng ep_rng = derive_rng(cfg.seed, "episode", g);
      Episode ep = sample_episode(ds, Split::train, cfg.c_way, cfg.k_shot, cfg.q_per_class,
                                  ep_rng);
      ep.seed = g;
      double eps = 0.0;
      if (cfg.eps_max > 0.0) {
        Rng eps_rng = derive_rng(cfg.seed, "eps", g);
        eps = sample_epsilon(eps_rng, cfg.eps_max);
      }
      AttackConfig atk;
      atk.kind = cfg.attack_kind;
      atk.eps = eps;
      atk.seed = derive_rng(cfg.seed, "attack", g).next_u64();
      const EpisodeResult res = episode_loss(cfg, ck.params, ds, ep, atk, running);
      adam_step(ck.params, res.grads, ck.opt, lr);
      if (running) {
        std::vector<const Tensor*> imgs;
        for (int c = 0; c < ep.c_way; ++c)
          for (int k = 0; k < ep.k_shot; ++k) imgs.push_back(&support_image(ds, ep, c, k));
        update_running_stats(cfg.embed, ck.params, ck.stats, imgs, 0.05);
      }
      loss_sum += res.loss;
      eplog << episode_log_line(epoch, g, eps, ep) << "\n";
    }

    const double val_acc = clean_accuracy(cfg, ck.params, ds, Split::val, cfg.val_episodes,
                                          static_cast<std::uint64_t>(epoch), running);
    const double mean_loss = loss_sum / cfg.episodes_per_epoch;
    metrics << epoch << "," << fmt_double(lr) << "," << fmt_double(mean_loss) << ","
            << fmt_double(val_acc) << "\n";
    metrics.flush();
    eplog.flush();

    ck.epoch = epoch + 1;
    ck.next_episode = static_cast<std::uint64_t>(epoch + 1) * cfg.episodes_per_epoch;
    result.log.push_back({epoch, lr, mean_loss, val_acc});
    if (val_acc > ck.best_val) {
      ck.best_val = val_acc;
      ck.best_epoch = epoch;
      save_checkpoint(ck, (fs::path(out_dir) / "best.ckpt").string());
    }
    save_checkpoint(ck, (fs::path(out_dir) / "last.ckpt").string());
    // The callback fires only once the epoch is durably on disk, so an
    // interruption here resumes cleanly from last.ckpt.
    if (on_epoch) on_epoch(result.log.back());
  }

  result.final_ck = ck;
  const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  if (fs::exists(best_path)) result.best = load_checkpoint(best_path);
  else {
    // Resumed into a fresh directory without any validation improvement.
    result.best = ck;
    save_checkpoint(ck, best_path);
  }
  return result;
}

}  // namespace mdat
