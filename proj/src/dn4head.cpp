#include "mdat/dn4head.hpp"

#include <stdexcept>
#include <string>

namespace mdat {

int class_scores_nodes(Graph& g, int desc, const std::vector<int>& pools, int k_nn) {
  if (pools.empty()) throw std::invalid_argument("dn4: no class pools");
  const Tensor& dv = g.value(desc);
  if (dv.shape.size() != 2)
    throw std::invalid_argument("dn4: descriptors must be [m,d], got " + shape_str(dv.shape));
  std::vector<int> per_class;
  per_class.reserve(pools.size());
  for (std::size_t c = 0; c < pools.size(); ++c) {
    const Tensor& pv = g.value(pools[c]);
    if (pv.shape.size() != 2 || pv.shape[1] != dv.shape[1])
      throw std::invalid_argument("dn4: pool " + std::to_string(c) + " has shape " +
                                  shape_str(pv.shape) + ", expected [*," +
                                  std::to_string(dv.shape[1]) + "]");
    if (pv.shape[0] < k_nn)
      throw std::invalid_argument("dn4: pool " + std::to_string(c) + " smaller than k_nn=" +
                                  std::to_string(k_nn));
    const int cos = g.cosine_matrix(desc, pools[c]);
    per_class.push_back(g.topk_rows_sum(cos, k_nn));
  }
  return g.stack_scalars(per_class);
}

int predict_nodes(Graph& g, int scores, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("dn4: temperature must be positive");
  return g.softmax(g.scale(scores, 1.0 / tau));
}

int cross_entropy_nodes(Graph& g, int probabilities, int y_true) {
  const Tensor& p = g.value(probabilities);
  if (p.shape.size() != 1 || y_true < 0 || y_true >= p.shape[0])
    throw std::invalid_argument("dn4: label " + std::to_string(y_true) +
                                " out of range for " + shape_str(p.shape));
  const int picked = g.gather_scalar(probabilities, y_true);
  return g.scale(g.log_e(g.clamp_min(picked, 1e-12)), -1.0);
}

Tensor class_scores(const Tensor& desc, const std::vector<Tensor>& pools, int k_nn) {
  Graph g;
  const int d = g.constant(desc);
  std::vector<int> pool_ids;
  pool_ids.reserve(pools.size());
  for (const Tensor& p : pools) pool_ids.push_back(g.constant(p));
  return g.value(class_scores_nodes(g, d, pool_ids, k_nn));
}

Tensor predict(const Tensor& scores, double tau) {
  Graph g;
  return g.value(predict_nodes(g, g.constant(scores), tau));
}

double cross_entropy(const Tensor& probabilities, int y_true) {
  Graph g;
  return g.value(cross_entropy_nodes(g, g.constant(probabilities), y_true)).data[0];
}

int argmax_class(const Tensor& probabilities) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(probabilities.numel()); ++i)
    if (probabilities.data[i] > probabilities.data[best]) best = i;
  return best;
}

}  // namespace mdat
