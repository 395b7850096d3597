#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mdat/tensor.hpp"

namespace mdat {

// Which leaf kinds receive gradients during backward. Attack passes want
// image gradients with parameters frozen; training wants the opposite half
// plus both on shared subgraphs.
struct GradTargets {
  bool inputs = true;
  bool params = true;
};

// Reverse-mode graph over Tensor values. Nodes are appended eagerly (forward
// values computed at construction, so creation order is a topological order)
// and addressed by integer id. A node's gradient buffer is allocated lazily
// during backward; leaves off the active path keep a zero gradient.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // leaves
  int constant(Tensor v);
  int input(Tensor v);
  int param(Tensor v);

  // elementwise (same shape unless noted)
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int scale(int a, double s);
  int leaky_relu(int x, double negative_slope);
  int log_e(int x);
  int clamp_min(int x, double lo);

  // linear algebra
  int matmul(int a, int b);       // [m,k] x [k,n] -> [m,n]
  int transpose(int a);           // [m,n] -> [n,m]
  int trace(int a);               // [n,n] -> scalar
  int trace_prod(int a, int b);   // tr(A B): [m,n],[n,m] -> scalar

  // image stack; images are [c,h,w]
  int conv2d_3x3(int x, int w);   // weights [co,ci,3,3], stride 1, pad 1
  int batchnorm(int x, int gamma, int beta, double eps);  // per-channel stats over h,w
  int batchnorm_fixed(int x, int gamma, int beta, int mean, int var, double eps);
  int maxpool2x2(int x);          // h,w must be even

  // shape and reductions
  int reshape(int x, std::vector<int> shape);
  int sum_all(int x);             // -> scalar
  int mean_all(int x);            // -> scalar
  int rows_mean(int x);           // [m,d] -> [d]
  int rows_covariance(int x);     // [m,d] -> [d,d], 1/m normalization

  // classifier pieces
  int softmax(int x);             // [n] -> [n], max-shifted
  int gather_scalar(int x, int index);
  int cosine_matrix(int a, int b);      // [ma,d],[mb,d] -> [ma,mb] of cosines
  int topk_rows_sum(int x, int k);      // sum of k largest per row; ties to lowest column
  int stack_scalars(const std::vector<int>& xs);  // n scalars -> [n]

  const Tensor& value(int id) const;
  const Tensor& evaluate(int id) const { return value(id); }

  // Gradient of node `root` (must be scalar) w.r.t. the selected leaf kinds.
  // Clears all previously computed gradients first.
  void backward(int root, GradTargets targets = {});

  // Gradient accumulated at `id` by the last backward; zeros if off-path.
  Tensor gradient(int id) const;

  std::size_t size() const;

  struct Impl;  // defined in graph.cpp

 private:
  std::unique_ptr<Impl> impl_;
};

// Convenience: builds f over a single input leaf via `build`, which receives
// the graph and the input id and returns the root id, then returns dRoot/dx.
Tensor input_gradient(const std::function<int(Graph&, int)>& build, const Tensor& x);

struct FdReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

// Central-difference check of `analytic_grad` against the black-box scalar
// function f near x. Checks every coordinate unless 0 < max_coords < numel,
// in which case a seeded random subset of that size is used.
FdReport finite_difference_check(const std::function<double(const Tensor&)>& f,
                                 const Tensor& x, const Tensor& analytic_grad,
                                 double fd_eps = 1e-5, int max_coords = -1,
                                 std::uint64_t seed = 7);

}  // namespace mdat
