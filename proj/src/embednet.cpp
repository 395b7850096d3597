#include "mdat/embednet.hpp"

#include <cmath>
#include <stdexcept>

#include "mdat/rng.hpp"

namespace mdat {

namespace {

std::string block_key(int i, const char* what) {
  return "block" + std::to_string(i + 1) + "." + what;
}

void check_config(const EmbedConfig& cfg) {
  if (cfg.widths.size() != 4) throw std::invalid_argument("embednet: exactly four blocks required");
  for (int w : cfg.widths)
    if (w <= 0) throw std::invalid_argument("embednet: channel widths must be positive");
  if (cfg.in_channels <= 0) throw std::invalid_argument("embednet: in_channels must be positive");
  if (cfg.bn_mode != "batch" && cfg.bn_mode != "running")
    throw std::invalid_argument("embednet: bn_mode must be 'batch' or 'running'");
}

}  // namespace

ParamSet init_params(const EmbedConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  ParamSet params;
  int ci = cfg.in_channels;
  for (int b = 0; b < 4; ++b) {
    const int co = cfg.widths[b];
    Tensor kernel({co, ci, 3, 3});
    const double bound = std::sqrt(3.0 / (ci * 9));
    Rng rng = derive_rng(seed, "embed-init", b);
    for (double& v : kernel.data) v = rng.uniform(-bound, bound);
    params.emplace(block_key(b, "conv"), std::move(kernel));
    Tensor scale({co});
    scale.fill(1.0);
    params.emplace(block_key(b, "bn_scale"), std::move(scale));
    params.emplace(block_key(b, "bn_shift"), Tensor({co}));
    ci = co;
  }
  return params;
}

ParamSet init_running_stats(const EmbedConfig& cfg) {
  check_config(cfg);
  ParamSet stats;
  for (int b = 0; b < 4; ++b) {
    stats.emplace(block_key(b, "bn_mean"), Tensor({cfg.widths[b]}));
    Tensor var({cfg.widths[b]});
    var.fill(1.0);
    stats.emplace(block_key(b, "bn_var"), std::move(var));
  }
  return stats;
}

std::map<std::string, int> place_params(Graph& g, const ParamSet& params, bool trainable) {
  std::map<std::string, int> ids;
  for (const auto& [name, tensor] : params)
    ids.emplace(name, trainable ? g.param(tensor) : g.constant(tensor));
  return ids;
}

int embed_nodes(Graph& g, const EmbedConfig& cfg, const std::map<std::string, int>& param_ids,
                int image, const ParamSet* running) {
  check_config(cfg);
  const Tensor& img = g.value(image);
  if (img.shape.size() != 3 || img.shape[0] != cfg.in_channels)
    throw std::invalid_argument("embednet: image must be [" + std::to_string(cfg.in_channels) +
                                ",h,w], got " + shape_str(img.shape));
  if (img.shape[1] % 4 != 0 || img.shape[2] % 4 != 0)
    throw std::invalid_argument("embednet: resolution " + shape_str(img.shape) +
                                " not divisible by the pooling plan (factor 4)");
  auto pid = [&](const std::string& key) {
    auto it = param_ids.find(key);
    if (it == param_ids.end()) throw std::invalid_argument("embednet: missing parameter " + key);
    return it->second;
  };
  int h = image;
  for (int b = 0; b < 4; ++b) {
    h = g.conv2d_3x3(h, pid(block_key(b, "conv")));
    if (running != nullptr) {
      const auto mean_it = running->find(block_key(b, "bn_mean"));
      const auto var_it = running->find(block_key(b, "bn_var"));
      if (mean_it == running->end() || var_it == running->end())
        throw std::invalid_argument("embednet: missing running statistics for block " +
                                    std::to_string(b + 1));
      const int mean_id = g.constant(mean_it->second);
      const int var_id = g.constant(var_it->second);
      h = g.batchnorm_fixed(h, pid(block_key(b, "bn_scale")), pid(block_key(b, "bn_shift")),
                            mean_id, var_id, cfg.bn_eps);
    } else {
      h = g.batchnorm(h, pid(block_key(b, "bn_scale")), pid(block_key(b, "bn_shift")), cfg.bn_eps);
    }
    h = g.leaky_relu(h, cfg.leaky_slope);
    if (b < 2) h = g.maxpool2x2(h);
  }
  const Tensor& fm = g.value(h);
  const int d = fm.shape[0];
  const int m = fm.shape[1] * fm.shape[2];
  return g.transpose(g.reshape(h, {d, m}));
}

Tensor embed(const EmbedConfig& cfg, const ParamSet& params, const Tensor& image,
             const ParamSet* running) {
  if (cfg.bn_mode == "running" && running == nullptr)
    throw std::invalid_argument("embednet: bn_mode 'running' needs running statistics");
  Graph g;
  const int img = g.constant(image);
  const auto ids = place_params(g, params, false);
  const int out = embed_nodes(g, cfg, ids, img, cfg.bn_mode == "running" ? running : nullptr);
  return g.value(out);
}

void update_running_stats(const EmbedConfig& cfg, const ParamSet& params, ParamSet& running,
                          const std::vector<const Tensor*>& images, double momentum) {
  check_config(cfg);
  if (images.empty()) return;
  // accumulate channel sums of each block's conv output over all images,
  // using the same batch-normalized forward the training graphs use
  std::vector<std::vector<double>> sum(4), sumsq(4);
  std::vector<long long> count(4, 0);
  for (int b = 0; b < 4; ++b) {
    sum[b].assign(cfg.widths[b], 0.0);
    sumsq[b].assign(cfg.widths[b], 0.0);
  }
  for (const Tensor* image : images) {
    Graph g;
    const int img = g.constant(*image);
    const auto ids = place_params(g, params, false);
    int h = img;
    for (int b = 0; b < 4; ++b) {
      h = g.conv2d_3x3(h, ids.at(block_key(b, "conv")));
      const Tensor& conv = g.value(h);
      const int c = conv.shape[0];
      const int hw = conv.shape[1] * conv.shape[2];
      for (int ch = 0; ch < c; ++ch) {
        const double* p = conv.ptr() + static_cast<std::size_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) {
          sum[b][ch] += p[i];
          sumsq[b][ch] += p[i] * p[i];
        }
      }
      count[b] += hw;
      h = g.batchnorm(h, ids.at(block_key(b, "bn_scale")), ids.at(block_key(b, "bn_shift")),
                      cfg.bn_eps);
      h = g.leaky_relu(h, cfg.leaky_slope);
      if (b < 2) h = g.maxpool2x2(h);
    }
  }
  for (int b = 0; b < 4; ++b) {
    Tensor& mean = running.at(block_key(b, "bn_mean"));
    Tensor& var = running.at(block_key(b, "bn_var"));
    for (int ch = 0; ch < cfg.widths[b]; ++ch) {
      const double m = sum[b][ch] / count[b];
      const double v = std::max(sumsq[b][ch] / count[b] - m * m, 0.0);
      mean.data[ch] = (1.0 - momentum) * mean.data[ch] + momentum * m;
      var.data[ch] = (1.0 - momentum) * var.data[ch] + momentum * v;
    }
  }
}

void descriptor_dims(const EmbedConfig& cfg, int h, int w, int& m, int& d) {
  check_config(cfg);
  if (h % 4 != 0 || w % 4 != 0)
    throw std::invalid_argument("embednet: resolution not divisible by the pooling plan");
  m = (h / 4) * (w / 4);
  d = cfg.widths[3];
}

}  // namespace mdat
