#pragma once

#include <vector>

#include "mdat/graph.hpp"
#include "mdat/tensor.hpp"

namespace mdat {

// Non-parametric classifier over local descriptors: a query image's score
// for class c is the sum over its m descriptors of the k_nn largest cosine
// similarities against class c's pooled support descriptors. Probabilities
// are a softmax over scores/tau; labels are 0-based class indices.

// pools[c] is a node holding class c's [pool_size, d] descriptor matrix.
int class_scores_nodes(Graph& g, int desc, const std::vector<int>& pools, int k_nn);

// probabilities = softmax(scores / tau)
int predict_nodes(Graph& g, int scores, double tau);

// -log(p_y) with the probability floored at 1e-12
int cross_entropy_nodes(Graph& g, int probabilities, int y_true);

// value-level counterparts
Tensor class_scores(const Tensor& desc, const std::vector<Tensor>& pools, int k_nn);
Tensor predict(const Tensor& scores, double tau);
double cross_entropy(const Tensor& probabilities, int y_true);

// index of the largest probability, ties to the lowest index
int argmax_class(const Tensor& probabilities);

}  // namespace mdat
