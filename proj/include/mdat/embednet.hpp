#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdat/graph.hpp"
#include "mdat/tensor.hpp"

namespace mdat {

// Four conv blocks (3x3, stride 1, pad 1, no bias), each followed by batch
// normalization and LeakyReLU; 2x2 max-pool after blocks 1 and 2. The final
// feature map [d, h', w'] is returned as an m x d descriptor matrix with
// m = h'*w' spatial positions.
struct EmbedConfig {
  int in_channels = 3;
  std::vector<int> widths{64, 64, 64, 64};
  double leaky_slope = 0.2;
  double bn_eps = 1e-5;
  // "batch": normalization statistics come from the image at hand (default).
  // "running": stored statistics are used instead; they must be maintained
  // via update_running_stats and are kept outside the trainable set.
  std::string bn_mode = "batch";
};

// Named tensors, ordered so iteration (serialization, gradient reduction)
// is deterministic.
using ParamSet = std::map<std::string, Tensor>;

// conv kernels fan-in uniform (+-sqrt(3/fan_in)), batch-norm scale 1, shift 0
ParamSet init_params(const EmbedConfig& cfg, std::uint64_t seed);

// Running-statistics buffers (mean 0, var 1 per channel), for bn_mode
// "running" only.
ParamSet init_running_stats(const EmbedConfig& cfg);

// Places every parameter as a leaf on `g` (param leaves when trainable,
// constants otherwise); returns name -> node id.
std::map<std::string, int> place_params(Graph& g, const ParamSet& params, bool trainable);

// Builds the embedding of `image` ([c,h,w], spatial dims divisible by 4) on
// `g` against previously placed parameter nodes. Normalizes with per-image
// batch statistics unless `running` is non-null, in which case the stored
// statistics are used as constants. Returns the descriptor matrix node [m,d].
int embed_nodes(Graph& g, const EmbedConfig& cfg, const std::map<std::string, int>& param_ids,
                int image, const ParamSet* running = nullptr);

// Convenience forward pass returning descriptor values; obeys cfg.bn_mode
// ("running" requires `running`).
Tensor embed(const EmbedConfig& cfg, const ParamSet& params, const Tensor& image,
             const ParamSet* running = nullptr);

// Folds the batch statistics observed on `images` into the running buffers
// with the given momentum (buffer = (1-momentum)*buffer + momentum*observed).
void update_running_stats(const EmbedConfig& cfg, const ParamSet& params, ParamSet& running,
                          const std::vector<const Tensor*>& images, double momentum);

// Descriptor matrix extents for a given input resolution.
void descriptor_dims(const EmbedConfig& cfg, int h, int w, int& m, int& d);

}  // namespace mdat
