#include "mdat/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "mdat/rng.hpp"

namespace mdat {

namespace {

// ---- kernels ----------------------------------------------------------

// dot product with four independent accumulators; fixed summation order
double dot4(const double* __restrict a, const double* __restrict b, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double sum4(const double* __restrict a, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    s1 += a[i + 1];
    s2 += a[i + 2];
    s3 += a[i + 3];
  }
  for (; i < n; ++i) s0 += a[i];
  return (s0 + s1) + (s2 + s3);
}

// C[m,n] += A[m,k] * B[k,n]; four C rows per pass so each B row is reused
void gemm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C, int m,
             int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = C + static_cast<std::size_t>(i) * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = A + static_cast<std::size_t>(i) * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    for (int p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const double* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        c0[j] += v0 * b[j];
        c1[j] += v1 * b[j];
        c2[j] += v2 * b[j];
        c3[j] += v3 * b[j];
      }
    }
  }
  for (; i < m; ++i) {
    double* c = C + static_cast<std::size_t>(i) * n;
    const double* a = A + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T; four dots share each B row pass
void gemm_nt(const double* __restrict A, const double* __restrict B, double* __restrict C, int m,
             int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = A + static_cast<std::size_t>(i) * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * k;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (int p = 0; p < k; ++p) {
        const double bv = b[p];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] += s0;
      c0[n + j] += s1;
      c0[2 * n + j] += s2;
      c0[3 * n + j] += s3;
    }
  }
  for (; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * k;
    double* c = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) c[j] += dot4(a, B + static_cast<std::size_t>(j) * k, k);
  }
}

// C[k,n] += A[m,k]^T * B[m,n]; C row stays hot while four B rows stream
void gemm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C, int m,
             int k, int n) {
  for (int p = 0; p < k; ++p) {
    double* c = C + static_cast<std::size_t>(p) * n;
    int i = 0;
    for (; i + 4 <= m; i += 4) {
      const double v0 = A[static_cast<std::size_t>(i) * k + p];
      const double v1 = A[static_cast<std::size_t>(i + 1) * k + p];
      const double v2 = A[static_cast<std::size_t>(i + 2) * k + p];
      const double v3 = A[static_cast<std::size_t>(i + 3) * k + p];
      const double* b0 = B + static_cast<std::size_t>(i) * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (int j = 0; j < n; ++j) c[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
    for (; i < m; ++i) {
      const double av = A[static_cast<std::size_t>(i) * k + p];
      const double* b = B + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// The 3x3 convolutions run as GEMMs over an im2col buffer: column matrix
// row (ci*9 + (dy+1)*3 + (dx+1)) holds the input plane ci shifted by
// (dy,dx) with zero padding, flattened over y,x. The weight tensor
// [co,ci,3,3] is already the matching [co, ci*9] matrix.

thread_local std::vector<double> tl_cols;
thread_local std::vector<double> tl_gcols;

void im2col3(const double* __restrict in, int ci_n, int h, int wd, double* __restrict cols) {
  const std::size_t hw = static_cast<std::size_t>(h) * wd;
  double* dst = cols;
  for (int ci = 0; ci < ci_n; ++ci) {
    const double* ip = in + ci * hw;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        for (int y = 0; y < h; ++y, dst += wd) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) {
            for (int x = 0; x < wd; ++x) dst[x] = 0.0;
            continue;
          }
          const double* irow = ip + static_cast<std::size_t>(yy) * wd;
          if (dx == 0) {
            std::memcpy(dst, irow, sizeof(double) * wd);
          } else if (dx == 1) {
            std::memcpy(dst, irow + 1, sizeof(double) * (wd - 1));
            dst[wd - 1] = 0.0;
          } else {
            dst[0] = 0.0;
            std::memcpy(dst + 1, irow, sizeof(double) * (wd - 1));
          }
        }
      }
    }
  }
}

// scatter-add of the column gradient back onto the input gradient
void col2im3(const double* __restrict gcols, int ci_n, int h, int wd, double* __restrict gin) {
  const std::size_t hw = static_cast<std::size_t>(h) * wd;
  const double* src = gcols;
  for (int ci = 0; ci < ci_n; ++ci) {
    double* gp = gin + ci * hw;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        for (int y = 0; y < h; ++y, src += wd) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          double* grow = gp + static_cast<std::size_t>(yy) * wd;
          if (dx == 0) {
            for (int x = 0; x < wd; ++x) grow[x] += src[x];
          } else if (dx == 1) {
            for (int x = 0; x < wd - 1; ++x) grow[x + 1] += src[x];
          } else {
            for (int x = 1; x < wd; ++x) grow[x - 1] += src[x];
          }
        }
      }
    }
  }
}

void conv3_forward(const double* in, const double* w, double* out, int ci_n, int co_n, int h,
                   int wd) {
  const int hw = h * wd;
  const std::size_t cn = static_cast<std::size_t>(ci_n) * 9 * hw;
  if (tl_cols.size() < cn) tl_cols.resize(cn);
  im2col3(in, ci_n, h, wd, tl_cols.data());
  gemm_nn(w, tl_cols.data(), out, co_n, ci_n * 9, hw);
}

void conv3_backward_data(const double* gout, const double* w, double* gin, int ci_n, int co_n,
                         int h, int wd) {
  const int hw = h * wd;
  const std::size_t cn = static_cast<std::size_t>(ci_n) * 9 * hw;
  if (tl_gcols.size() < cn) tl_gcols.resize(cn);
  std::fill(tl_gcols.begin(), tl_gcols.begin() + cn, 0.0);
  gemm_tn(w, gout, tl_gcols.data(), co_n, ci_n * 9, hw);
  col2im3(tl_gcols.data(), ci_n, h, wd, gin);
}

void conv3_backward_weights(const double* gout, const double* in, double* gw, int ci_n, int co_n,
                            int h, int wd) {
  const int hw = h * wd;
  const std::size_t cn = static_cast<std::size_t>(ci_n) * 9 * hw;
  if (tl_cols.size() < cn) tl_cols.resize(cn);
  im2col3(in, ci_n, h, wd, tl_cols.data());
  gemm_nt(gout, tl_cols.data(), gw, co_n, hw, ci_n * 9);
}

}  // namespace

// ---- node machinery ----------------------------------------------------

struct GraphNode;

struct Graph::Impl {
  std::vector<std::unique_ptr<GraphNode>> nodes;
  GradTargets mode;

  GraphNode& at(int id) const;
  bool wants(int id) const;
  Tensor& grad_buf(int id);
  void add_grad(int id, const Tensor& g);
};

struct GraphNode {
  Tensor val;
  Tensor grad;
  bool grad_live = false;
  bool needs_i = false;
  bool needs_p = false;
  int id = -1;
  const char* name = "";

  virtual void backprop(Graph::Impl&) {}
  virtual ~GraphNode() = default;
};

GraphNode& Graph::Impl::at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes.size())
    throw std::out_of_range("graph: bad node id " + std::to_string(id));
  return *nodes[id];
}

bool Graph::Impl::wants(int id) const {
  const GraphNode& n = at(id);
  return (n.needs_i && mode.inputs) || (n.needs_p && mode.params);
}

Tensor& Graph::Impl::grad_buf(int id) {
  GraphNode& n = at(id);
  if (!n.grad_live) {
    n.grad.shape = n.val.shape;
    n.grad.data.assign(n.val.numel(), 0.0);
    n.grad_live = true;
  }
  return n.grad;
}

void Graph::Impl::add_grad(int id, const Tensor& g) {
  Tensor& buf = grad_buf(id);
  for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
}

// ---- helper used by op builders ----------------------------------------

struct GraphOps {
  Graph::Impl& g;

  GraphNode& node(int id) const { return g.at(id); }
  const Tensor& val(int id) const { return g.at(id).val; }

  int attach(std::unique_ptr<GraphNode> n, const std::vector<int>& children) {
    for (int c : children) {
      const GraphNode& ch = g.at(c);
      n->needs_i = n->needs_i || ch.needs_i;
      n->needs_p = n->needs_p || ch.needs_p;
    }
    n->id = static_cast<int>(g.nodes.size());
    if (!all_finite(n->val))
      throw std::runtime_error(std::string("graph: non-finite value produced by node #") +
                               std::to_string(n->id) + " (" + n->name + ")");
    g.nodes.push_back(std::move(n));
    return static_cast<int>(g.nodes.size()) - 1;
  }

  [[noreturn]] void shape_error(const char* op, const std::string& detail) const {
    throw std::invalid_argument(std::string("graph: ") + op + ": " + detail);
  }

  void require(bool ok, const char* op, const std::string& detail) const {
    if (!ok) shape_error(op, detail);
  }
};

namespace {

// ---- concrete nodes -----------------------------------------------------

struct LeafNode : GraphNode {};

struct AddNode : GraphNode {
  int a, b;
  void backprop(Graph::Impl& g) override {
    if (g.wants(a)) g.add_grad(a, grad);
    if (g.wants(b)) g.add_grad(b, grad);
  }
};

struct SubNode : GraphNode {
  int a, b;
  void backprop(Graph::Impl& g) override {
    if (g.wants(a)) g.add_grad(a, grad);
    if (g.wants(b)) {
      Tensor& buf = g.grad_buf(b);
      for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] -= grad.data[i];
    }
  }
};

struct MulNode : GraphNode {
  int a, b;
  void backprop(Graph::Impl& g) override {
    const Tensor& va = g.at(a).val;
    const Tensor& vb = g.at(b).val;
    if (g.wants(a)) {
      Tensor& buf = g.grad_buf(a);
      for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += grad.data[i] * vb.data[i];
    }
    if (g.wants(b)) {
      Tensor& buf = g.grad_buf(b);
      for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += grad.data[i] * va.data[i];
    }
  }
};

struct ScaleNode : GraphNode {
  int a;
  double s;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(a)) return;
    Tensor& buf = g.grad_buf(a);
    for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += s * grad.data[i];
  }
};

struct LeakyReluNode : GraphNode {
  int x;
  double slope;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    const Tensor& vx = g.at(x).val;
    Tensor& buf = g.grad_buf(x);
    for (std::size_t i = 0; i < buf.data.size(); ++i)
      buf.data[i] += grad.data[i] * (vx.data[i] > 0.0 ? 1.0 : slope);
  }
};

struct LogNode : GraphNode {
  int x;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    const Tensor& vx = g.at(x).val;
    Tensor& buf = g.grad_buf(x);
    for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += grad.data[i] / vx.data[i];
  }
};

struct ClampMinNode : GraphNode {
  int x;
  double lo;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    const Tensor& vx = g.at(x).val;
    Tensor& buf = g.grad_buf(x);
    for (std::size_t i = 0; i < buf.data.size(); ++i)
      if (vx.data[i] >= lo) buf.data[i] += grad.data[i];
  }
};

struct MatmulNode : GraphNode {
  int a, b;
  int m, k, n;
  void backprop(Graph::Impl& g) override {
    const Tensor& va = g.at(a).val;
    const Tensor& vb = g.at(b).val;
    if (g.wants(a)) gemm_nt(grad.ptr(), vb.ptr(), g.grad_buf(a).ptr(), m, n, k);
    if (g.wants(b)) gemm_tn(va.ptr(), grad.ptr(), g.grad_buf(b).ptr(), m, k, n);
  }
};

struct TransposeNode : GraphNode {
  int a;
  int m, n;  // input is [m,n]
  void backprop(Graph::Impl& g) override {
    if (!g.wants(a)) return;
    Tensor& buf = g.grad_buf(a);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        buf.data[static_cast<std::size_t>(i) * n + j] +=
            grad.data[static_cast<std::size_t>(j) * m + i];
  }
};

struct TraceNode : GraphNode {
  int a;
  int n;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(a)) return;
    Tensor& buf = g.grad_buf(a);
    const double gv = grad.data[0];
    for (int i = 0; i < n; ++i) buf.data[static_cast<std::size_t>(i) * n + i] += gv;
  }
};

struct TraceProdNode : GraphNode {
  int a, b;
  int m, n;  // A is [m,n], B is [n,m]
  void backprop(Graph::Impl& g) override {
    const double gv = grad.data[0];
    const Tensor& va = g.at(a).val;
    const Tensor& vb = g.at(b).val;
    if (g.wants(a)) {
      Tensor& buf = g.grad_buf(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          buf.data[static_cast<std::size_t>(i) * n + j] +=
              gv * vb.data[static_cast<std::size_t>(j) * m + i];
    }
    if (g.wants(b)) {
      Tensor& buf = g.grad_buf(b);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          buf.data[static_cast<std::size_t>(j) * m + i] +=
              gv * va.data[static_cast<std::size_t>(i) * n + j];
    }
  }
};

struct Conv3x3Node : GraphNode {
  int x, w;
  int ci, co, h, wd;
  void backprop(Graph::Impl& g) override {
    const Tensor& vx = g.at(x).val;
    const Tensor& vw = g.at(w).val;
    if (g.wants(x)) conv3_backward_data(grad.ptr(), vw.ptr(), g.grad_buf(x).ptr(), ci, co, h, wd);
    if (g.wants(w))
      conv3_backward_weights(grad.ptr(), vx.ptr(), g.grad_buf(w).ptr(), ci, co, h, wd);
  }
};

struct BatchNormNode : GraphNode {
  int x, gamma, beta;
  int c, h, wd;
  std::vector<double> mu, istd;
  void backprop(Graph::Impl& g) override {
    const Tensor& vx = g.at(x).val;
    const Tensor& vg = g.at(gamma).val;
    const int n = h * wd;
    const double invn = 1.0 / n;
    const bool wx = g.wants(x), wg = g.wants(gamma), wb = g.wants(beta);
    for (int ch = 0; ch < c; ++ch) {
      const double* xp = vx.ptr() + static_cast<std::size_t>(ch) * n;
      const double* gp = grad.ptr() + static_cast<std::size_t>(ch) * n;
      const double m = mu[ch], is = istd[ch];
      // sums of g and g*xhat over the channel
      double sg = 0.0, sgx = 0.0;
      for (int i = 0; i < n; ++i) {
        const double xh = (xp[i] - m) * is;
        sg += gp[i];
        sgx += gp[i] * xh;
      }
      if (wb) g.grad_buf(beta).data[ch] += sg;
      if (wg) g.grad_buf(gamma).data[ch] += sgx;
      if (wx) {
        double* bx = g.grad_buf(x).ptr() + static_cast<std::size_t>(ch) * n;
        const double gs = vg.data[ch] * is;
        const double mg = sg * invn, mgx = sgx * invn;
        for (int i = 0; i < n; ++i) {
          const double xh = (xp[i] - m) * is;
          bx[i] += gs * (gp[i] - mg - xh * mgx);
        }
      }
    }
  }
};

struct BatchNormFixedNode : GraphNode {
  int x, gamma, beta;
  int c, h, wd;
  std::vector<double> mu, istd;
  void backprop(Graph::Impl& g) override {
    const Tensor& vx = g.at(x).val;
    const Tensor& vg = g.at(gamma).val;
    const int n = h * wd;
    const bool wx = g.wants(x), wg = g.wants(gamma), wb = g.wants(beta);
    for (int ch = 0; ch < c; ++ch) {
      const double* xp = vx.ptr() + static_cast<std::size_t>(ch) * n;
      const double* gp = grad.ptr() + static_cast<std::size_t>(ch) * n;
      const double m = mu[ch], is = istd[ch];
      if (wb) g.grad_buf(beta).data[ch] += sum4(gp, n);
      if (wg) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += gp[i] * (xp[i] - m) * is;
        g.grad_buf(gamma).data[ch] += s;
      }
      if (wx) {
        double* bx = g.grad_buf(x).ptr() + static_cast<std::size_t>(ch) * n;
        const double gs = vg.data[ch] * is;
        for (int i = 0; i < n; ++i) bx[i] += gs * gp[i];
      }
    }
  }
};

struct MaxPoolNode : GraphNode {
  int x;
  int c, oh, ow;  // output spatial dims; input is [c, 2*oh, 2*ow]
  std::vector<std::uint8_t> sel;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    const int ih = 2 * oh, iw = 2 * ow;
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch) {
      double* bp = buf.ptr() + static_cast<std::size_t>(ch) * ih * iw;
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo, ++o) {
          const int s = sel[o];
          const int iy = 2 * y + (s >> 1), ix = 2 * xo + (s & 1);
          bp[static_cast<std::size_t>(iy) * iw + ix] += grad.data[o];
        }
    }
  }
};

struct ReshapeNode : GraphNode {
  int x;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += grad.data[i];
  }
};

struct SumAllNode : GraphNode {
  int x;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    const double gv = grad.data[0];
    for (double& v : buf.data) v += gv;
  }
};

struct MeanAllNode : GraphNode {
  int x;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    const double gv = grad.data[0] / static_cast<double>(buf.data.size());
    for (double& v : buf.data) v += gv;
  }
};

struct RowsMeanNode : GraphNode {
  int x;
  int m, d;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    const double invm = 1.0 / m;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j)
        buf.data[static_cast<std::size_t>(i) * d + j] += grad.data[j] * invm;
  }
};

struct RowsCovNode : GraphNode {
  int x;
  int m, d;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    const Tensor& vx = g.at(x).val;
    // center x, then dX = (1/m) * Xc * (G + G^T)
    std::vector<double> mu(d, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) mu[j] += vx.data[static_cast<std::size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) mu[j] /= m;
    std::vector<double> xc(static_cast<std::size_t>(m) * d);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j)
        xc[static_cast<std::size_t>(i) * d + j] =
            vx.data[static_cast<std::size_t>(i) * d + j] - mu[j];
    std::vector<double> gs(static_cast<std::size_t>(d) * d);
    const double invm = 1.0 / m;
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        gs[static_cast<std::size_t>(a) * d + b] =
            invm * (grad.data[static_cast<std::size_t>(a) * d + b] +
                    grad.data[static_cast<std::size_t>(b) * d + a]);
    gemm_nn(xc.data(), gs.data(), g.grad_buf(x).ptr(), m, d, d);
  }
};

struct SoftmaxNode : GraphNode {
  int x;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    const std::size_t n = val.numel();
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += grad.data[i] * val.data[i];
    Tensor& buf = g.grad_buf(x);
    for (std::size_t i = 0; i < n; ++i) buf.data[i] += val.data[i] * (grad.data[i] - dot);
  }
};

struct GatherScalarNode : GraphNode {
  int x;
  int index;
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    g.grad_buf(x).data[index] += grad.data[0];
  }
};

struct CosineMatrixNode : GraphNode {
  int a, b;
  int ma, mb, d;
  std::vector<double> ah, bh;  // row-normalized copies
  std::vector<double> na, nb;  // floored row norms
  void backprop(Graph::Impl& g) override {
    if (g.wants(a)) {
      std::vector<double> dah(static_cast<std::size_t>(ma) * d, 0.0);
      gemm_nn(grad.ptr(), bh.data(), dah.data(), ma, mb, d);
      Tensor& buf = g.grad_buf(a);
      for (int i = 0; i < ma; ++i) {
        const double* dr = dah.data() + static_cast<std::size_t>(i) * d;
        const double* hr = ah.data() + static_cast<std::size_t>(i) * d;
        double* br = buf.ptr() + static_cast<std::size_t>(i) * d;
        const double proj = dot4(dr, hr, d);
        const double inv = 1.0 / na[i];
        for (int j = 0; j < d; ++j) br[j] += (dr[j] - proj * hr[j]) * inv;
      }
    }
    if (g.wants(b)) {
      std::vector<double> dbh(static_cast<std::size_t>(mb) * d, 0.0);
      gemm_tn(grad.ptr(), ah.data(), dbh.data(), ma, mb, d);
      Tensor& buf = g.grad_buf(b);
      for (int i = 0; i < mb; ++i) {
        const double* dr = dbh.data() + static_cast<std::size_t>(i) * d;
        const double* hr = bh.data() + static_cast<std::size_t>(i) * d;
        double* br = buf.ptr() + static_cast<std::size_t>(i) * d;
        const double proj = dot4(dr, hr, d);
        const double inv = 1.0 / nb[i];
        for (int j = 0; j < d; ++j) br[j] += (dr[j] - proj * hr[j]) * inv;
      }
    }
  }
};

struct TopkRowsSumNode : GraphNode {
  int x;
  int m, p, k;
  std::vector<int> picked;  // m*k column indices
  void backprop(Graph::Impl& g) override {
    if (!g.wants(x)) return;
    Tensor& buf = g.grad_buf(x);
    const double gv = grad.data[0];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j)
        buf.data[static_cast<std::size_t>(i) * p + picked[static_cast<std::size_t>(i) * k + j]] +=
            gv;
  }
};

struct StackScalarsNode : GraphNode {
  std::vector<int> xs;
  void backprop(Graph::Impl& g) override {
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (g.wants(xs[i])) g.grad_buf(xs[i]).data[0] += grad.data[i];
  }
};

}  // namespace

// ---- graph API -----------------------------------------------------------

Graph::Graph() : impl_(new Impl) {}
Graph::~Graph() = default;

std::size_t Graph::size() const { return impl_->nodes.size(); }

const Tensor& Graph::value(int id) const { return impl_->at(id).val; }

Tensor Graph::gradient(int id) const {
  const GraphNode& n = impl_->at(id);
  if (n.grad_live) return n.grad;
  return Tensor(n.val.shape);
}

int Graph::constant(Tensor v) {
  auto n = std::make_unique<LeafNode>();
  n->val = std::move(v);
  n->name = "constant";
  return GraphOps{*impl_}.attach(std::move(n), {});
}

int Graph::input(Tensor v) {
  auto n = std::make_unique<LeafNode>();
  n->val = std::move(v);
  n->name = "input";
  n->needs_i = true;
  return GraphOps{*impl_}.attach(std::move(n), {});
}

int Graph::param(Tensor v) {
  auto n = std::make_unique<LeafNode>();
  n->val = std::move(v);
  n->name = "param";
  n->needs_p = true;
  return GraphOps{*impl_}.attach(std::move(n), {});
}

int Graph::add(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.same_shape(vb), "add",
              "shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  auto n = std::make_unique<AddNode>();
  n->a = a;
  n->b = b;
  n->name = "add";
  n->val = va;
  for (std::size_t i = 0; i < n->val.data.size(); ++i) n->val.data[i] += vb.data[i];
  return ops.attach(std::move(n), {a, b});
}

int Graph::sub(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.same_shape(vb), "sub",
              "shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  auto n = std::make_unique<SubNode>();
  n->a = a;
  n->b = b;
  n->name = "sub";
  n->val = va;
  for (std::size_t i = 0; i < n->val.data.size(); ++i) n->val.data[i] -= vb.data[i];
  return ops.attach(std::move(n), {a, b});
}

int Graph::mul(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.same_shape(vb), "mul",
              "shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  auto n = std::make_unique<MulNode>();
  n->a = a;
  n->b = b;
  n->name = "mul";
  n->val = va;
  for (std::size_t i = 0; i < n->val.data.size(); ++i) n->val.data[i] *= vb.data[i];
  return ops.attach(std::move(n), {a, b});
}

int Graph::scale(int a, double s) {
  GraphOps ops{*impl_};
  auto n = std::make_unique<ScaleNode>();
  n->a = a;
  n->s = s;
  n->name = "scale";
  n->val = ops.val(a);
  for (double& v : n->val.data) v *= s;
  return ops.attach(std::move(n), {a});
}

int Graph::leaky_relu(int x, double negative_slope) {
  GraphOps ops{*impl_};
  auto n = std::make_unique<LeakyReluNode>();
  n->x = x;
  n->slope = negative_slope;
  n->name = "leaky_relu";
  n->val = ops.val(x);
  for (double& v : n->val.data)
    if (v <= 0.0) v *= negative_slope;
  return ops.attach(std::move(n), {x});
}

int Graph::log_e(int x) {
  GraphOps ops{*impl_};
  auto n = std::make_unique<LogNode>();
  n->x = x;
  n->name = "log";
  n->val = ops.val(x);
  for (double& v : n->val.data) v = std::log(v);
  return ops.attach(std::move(n), {x});
}

int Graph::clamp_min(int x, double lo) {
  GraphOps ops{*impl_};
  auto n = std::make_unique<ClampMinNode>();
  n->x = x;
  n->lo = lo;
  n->name = "clamp_min";
  n->val = ops.val(x);
  for (double& v : n->val.data) v = std::max(v, lo);
  return ops.attach(std::move(n), {x});
}

int Graph::matmul(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.shape.size() == 2 && vb.shape.size() == 2, "matmul",
              "expects rank-2 operands, got " + shape_str(va.shape) + " and " +
                  shape_str(vb.shape));
  ops.require(va.shape[1] == vb.shape[0], "matmul",
              "inner dimensions differ: " + shape_str(va.shape) + " x " + shape_str(vb.shape));
  auto n = std::make_unique<MatmulNode>();
  n->a = a;
  n->b = b;
  n->m = va.shape[0];
  n->k = va.shape[1];
  n->n = vb.shape[1];
  n->name = "matmul";
  n->val = Tensor({n->m, n->n});
  gemm_nn(va.ptr(), vb.ptr(), n->val.ptr(), n->m, n->k, n->n);
  return ops.attach(std::move(n), {a, b});
}

int Graph::transpose(int a) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  ops.require(va.shape.size() == 2, "transpose", "expects rank 2, got " + shape_str(va.shape));
  auto n = std::make_unique<TransposeNode>();
  n->a = a;
  n->m = va.shape[0];
  n->n = va.shape[1];
  n->name = "transpose";
  n->val = Tensor({n->n, n->m});
  for (int i = 0; i < n->m; ++i)
    for (int j = 0; j < n->n; ++j)
      n->val.data[static_cast<std::size_t>(j) * n->m + i] =
          va.data[static_cast<std::size_t>(i) * n->n + j];
  return ops.attach(std::move(n), {a});
}

int Graph::trace(int a) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  ops.require(va.shape.size() == 2 && va.shape[0] == va.shape[1], "trace",
              "expects a square matrix, got " + shape_str(va.shape));
  auto n = std::make_unique<TraceNode>();
  n->a = a;
  n->n = va.shape[0];
  n->name = "trace";
  double s = 0.0;
  for (int i = 0; i < n->n; ++i) s += va.data[static_cast<std::size_t>(i) * n->n + i];
  n->val = Tensor::scalar(s);
  return ops.attach(std::move(n), {a});
}

int Graph::trace_prod(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.shape.size() == 2 && vb.shape.size() == 2 && va.shape[0] == vb.shape[1] &&
                  va.shape[1] == vb.shape[0],
              "trace_prod",
              "expects [m,n] and [n,m], got " + shape_str(va.shape) + " and " +
                  shape_str(vb.shape));
  auto n = std::make_unique<TraceProdNode>();
  n->a = a;
  n->b = b;
  n->m = va.shape[0];
  n->n = va.shape[1];
  n->name = "trace_prod";
  double s = 0.0;
  for (int i = 0; i < n->m; ++i)
    for (int j = 0; j < n->n; ++j)
      s += va.data[static_cast<std::size_t>(i) * n->n + j] *
           vb.data[static_cast<std::size_t>(j) * n->m + i];
  n->val = Tensor::scalar(s);
  return ops.attach(std::move(n), {a, b});
}

int Graph::conv2d_3x3(int x, int w) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  const Tensor& vw = ops.val(w);
  ops.require(vx.shape.size() == 3, "conv2d_3x3", "image must be [c,h,w], got " +
                                                      shape_str(vx.shape));
  ops.require(vw.shape.size() == 4 && vw.shape[2] == 3 && vw.shape[3] == 3, "conv2d_3x3",
              "weights must be [co,ci,3,3], got " + shape_str(vw.shape));
  ops.require(vw.shape[1] == vx.shape[0], "conv2d_3x3",
              "channel mismatch: image " + shape_str(vx.shape) + ", weights " +
                  shape_str(vw.shape));
  auto n = std::make_unique<Conv3x3Node>();
  n->x = x;
  n->w = w;
  n->ci = vx.shape[0];
  n->co = vw.shape[0];
  n->h = vx.shape[1];
  n->wd = vx.shape[2];
  n->name = "conv2d_3x3";
  n->val = Tensor({n->co, n->h, n->wd});
  conv3_forward(vx.ptr(), vw.ptr(), n->val.ptr(), n->ci, n->co, n->h, n->wd);
  return ops.attach(std::move(n), {x, w});
}

int Graph::batchnorm(int x, int gamma, int beta, double eps) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  const Tensor& vg = ops.val(gamma);
  const Tensor& vb = ops.val(beta);
  ops.require(vx.shape.size() == 3, "batchnorm", "image must be [c,h,w], got " +
                                                     shape_str(vx.shape));
  const int c = vx.shape[0];
  ops.require(vg.shape == std::vector<int>{c} && vb.shape == std::vector<int>{c}, "batchnorm",
              "gamma/beta must be [" + std::to_string(c) + "], got " + shape_str(vg.shape) +
                  " and " + shape_str(vb.shape));
  auto n = std::make_unique<BatchNormNode>();
  n->x = x;
  n->gamma = gamma;
  n->beta = beta;
  n->c = c;
  n->h = vx.shape[1];
  n->wd = vx.shape[2];
  n->name = "batchnorm";
  const int hw = n->h * n->wd;
  n->mu.resize(c);
  n->istd.resize(c);
  n->val = Tensor(vx.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = vx.ptr() + static_cast<std::size_t>(ch) * hw;
    const double m = sum4(xp, hw) / hw;
    double var = 0.0;
    for (int i = 0; i < hw; ++i) {
      const double dv = xp[i] - m;
      var += dv * dv;
    }
    var /= hw;
    const double is = 1.0 / std::sqrt(var + eps);
    n->mu[ch] = m;
    n->istd[ch] = is;
    double* yp = n->val.ptr() + static_cast<std::size_t>(ch) * hw;
    const double gv = vg.data[ch], bv = vb.data[ch];
    for (int i = 0; i < hw; ++i) yp[i] = gv * (xp[i] - m) * is + bv;
  }
  return ops.attach(std::move(n), {x, gamma, beta});
}

int Graph::batchnorm_fixed(int x, int gamma, int beta, int mean, int var, double eps) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  const Tensor& vg = ops.val(gamma);
  const Tensor& vb = ops.val(beta);
  const Tensor& vm = ops.val(mean);
  const Tensor& vv = ops.val(var);
  ops.require(vx.shape.size() == 3, "batchnorm_fixed",
              "image must be [c,h,w], got " + shape_str(vx.shape));
  const int c = vx.shape[0];
  const std::vector<int> want{c};
  ops.require(vg.shape == want && vb.shape == want && vm.shape == want && vv.shape == want,
              "batchnorm_fixed", "per-channel vectors must be [" + std::to_string(c) + "]");
  ops.require(!impl_->at(mean).needs_i && !impl_->at(mean).needs_p && !impl_->at(var).needs_i &&
                  !impl_->at(var).needs_p,
              "batchnorm_fixed", "mean/var must be constants");
  auto n = std::make_unique<BatchNormFixedNode>();
  n->x = x;
  n->gamma = gamma;
  n->beta = beta;
  n->c = c;
  n->h = vx.shape[1];
  n->wd = vx.shape[2];
  n->name = "batchnorm_fixed";
  const int hw = n->h * n->wd;
  n->mu.resize(c);
  n->istd.resize(c);
  n->val = Tensor(vx.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double m = vm.data[ch];
    const double is = 1.0 / std::sqrt(vv.data[ch] + eps);
    n->mu[ch] = m;
    n->istd[ch] = is;
    const double* xp = vx.ptr() + static_cast<std::size_t>(ch) * hw;
    double* yp = n->val.ptr() + static_cast<std::size_t>(ch) * hw;
    const double gv = vg.data[ch], bv = vb.data[ch];
    for (int i = 0; i < hw; ++i) yp[i] = gv * (xp[i] - m) * is + bv;
  }
  return ops.attach(std::move(n), {x, gamma, beta, mean, var});
}

int Graph::maxpool2x2(int x) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 3, "maxpool2x2", "image must be [c,h,w], got " +
                                                      shape_str(vx.shape));
  ops.require(vx.shape[1] % 2 == 0 && vx.shape[2] % 2 == 0, "maxpool2x2",
              "spatial dims must be even, got " + shape_str(vx.shape));
  auto n = std::make_unique<MaxPoolNode>();
  n->x = x;
  n->c = vx.shape[0];
  n->oh = vx.shape[1] / 2;
  n->ow = vx.shape[2] / 2;
  n->name = "maxpool2x2";
  n->val = Tensor({n->c, n->oh, n->ow});
  n->sel.resize(n->val.numel());
  const int ih = vx.shape[1], iw = vx.shape[2];
  std::size_t o = 0;
  for (int ch = 0; ch < n->c; ++ch) {
    const double* xp = vx.ptr() + static_cast<std::size_t>(ch) * ih * iw;
    for (int y = 0; y < n->oh; ++y)
      for (int xo = 0; xo < n->ow; ++xo, ++o) {
        double best = xp[static_cast<std::size_t>(2 * y) * iw + 2 * xo];
        int bi = 0;
        for (int s = 1; s < 4; ++s) {
          const double v = xp[static_cast<std::size_t>(2 * y + (s >> 1)) * iw + 2 * xo + (s & 1)];
          if (v > best) {
            best = v;
            bi = s;
          }
        }
        n->val.data[o] = best;
        n->sel[o] = static_cast<std::uint8_t>(bi);
      }
  }
  return ops.attach(std::move(n), {x});
}

int Graph::reshape(int x, std::vector<int> shape) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(Tensor::count(shape) == vx.numel(), "reshape",
              "cannot reshape " + shape_str(vx.shape) + " to " + shape_str(shape));
  auto n = std::make_unique<ReshapeNode>();
  n->x = x;
  n->name = "reshape";
  n->val = Tensor(std::move(shape), vx.data);
  return ops.attach(std::move(n), {x});
}

int Graph::sum_all(int x) {
  GraphOps ops{*impl_};
  auto n = std::make_unique<SumAllNode>();
  n->x = x;
  n->name = "sum_all";
  n->val = Tensor::scalar(sum4(ops.val(x).ptr(), static_cast<int>(ops.val(x).numel())));
  return ops.attach(std::move(n), {x});
}

int Graph::mean_all(int x) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  auto n = std::make_unique<MeanAllNode>();
  n->x = x;
  n->name = "mean_all";
  n->val = Tensor::scalar(sum4(vx.ptr(), static_cast<int>(vx.numel())) /
                          static_cast<double>(vx.numel()));
  return ops.attach(std::move(n), {x});
}

int Graph::rows_mean(int x) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 2, "rows_mean", "expects [m,d], got " + shape_str(vx.shape));
  auto n = std::make_unique<RowsMeanNode>();
  n->x = x;
  n->m = vx.shape[0];
  n->d = vx.shape[1];
  n->name = "rows_mean";
  n->val = Tensor({n->d});
  for (int i = 0; i < n->m; ++i)
    for (int j = 0; j < n->d; ++j) n->val.data[j] += vx.data[static_cast<std::size_t>(i) * n->d + j];
  for (int j = 0; j < n->d; ++j) n->val.data[j] /= n->m;
  return ops.attach(std::move(n), {x});
}

int Graph::rows_covariance(int x) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 2, "rows_covariance",
              "expects [m,d], got " + shape_str(vx.shape));
  auto n = std::make_unique<RowsCovNode>();
  n->x = x;
  n->m = vx.shape[0];
  n->d = vx.shape[1];
  n->name = "rows_covariance";
  const int m = n->m, d = n->d;
  std::vector<double> mu(d, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) mu[j] += vx.data[static_cast<std::size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) mu[j] /= m;
  std::vector<double> xc(static_cast<std::size_t>(m) * d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      xc[static_cast<std::size_t>(i) * d + j] = vx.data[static_cast<std::size_t>(i) * d + j] - mu[j];
  n->val = Tensor({d, d});
  // (1/m) Xc^T Xc
  gemm_tn(xc.data(), xc.data(), n->val.ptr(), m, d, d);
  const double invm = 1.0 / m;
  for (double& v : n->val.data) v *= invm;
  return ops.attach(std::move(n), {x});
}

int Graph::softmax(int x) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 1, "softmax", "expects a vector, got " + shape_str(vx.shape));
  auto n = std::make_unique<SoftmaxNode>();
  n->x = x;
  n->name = "softmax";
  n->val = vx;
  double mx = vx.data[0];
  for (double v : vx.data) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : n->val.data) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : n->val.data) v /= s;
  return ops.attach(std::move(n), {x});
}

int Graph::gather_scalar(int x, int index) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 1, "gather_scalar",
              "expects a vector, got " + shape_str(vx.shape));
  ops.require(index >= 0 && index < vx.shape[0], "gather_scalar",
              "index " + std::to_string(index) + " out of range for " + shape_str(vx.shape));
  auto n = std::make_unique<GatherScalarNode>();
  n->x = x;
  n->index = index;
  n->name = "gather_scalar";
  n->val = Tensor::scalar(vx.data[index]);
  return ops.attach(std::move(n), {x});
}

int Graph::cosine_matrix(int a, int b) {
  GraphOps ops{*impl_};
  const Tensor& va = ops.val(a);
  const Tensor& vb = ops.val(b);
  ops.require(va.shape.size() == 2 && vb.shape.size() == 2 && va.shape[1] == vb.shape[1],
              "cosine_matrix",
              "expects [ma,d] and [mb,d], got " + shape_str(va.shape) + " and " +
                  shape_str(vb.shape));
  auto n = std::make_unique<CosineMatrixNode>();
  n->a = a;
  n->b = b;
  n->ma = va.shape[0];
  n->mb = vb.shape[0];
  n->d = va.shape[1];
  n->name = "cosine_matrix";
  const int d = n->d;
  n->ah.resize(static_cast<std::size_t>(n->ma) * d);
  n->bh.resize(static_cast<std::size_t>(n->mb) * d);
  n->na.resize(n->ma);
  n->nb.resize(n->mb);
  for (int i = 0; i < n->ma; ++i) {
    const double* r = va.ptr() + static_cast<std::size_t>(i) * d;
    const double nr = std::max(std::sqrt(dot4(r, r, d)), 1e-12);
    n->na[i] = nr;
    double* hr = n->ah.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) hr[j] = r[j] / nr;
  }
  for (int i = 0; i < n->mb; ++i) {
    const double* r = vb.ptr() + static_cast<std::size_t>(i) * d;
    const double nr = std::max(std::sqrt(dot4(r, r, d)), 1e-12);
    n->nb[i] = nr;
    double* hr = n->bh.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) hr[j] = r[j] / nr;
  }
  n->val = Tensor({n->ma, n->mb});
  gemm_nt(n->ah.data(), n->bh.data(), n->val.ptr(), n->ma, d, n->mb);
  return ops.attach(std::move(n), {a, b});
}

int Graph::topk_rows_sum(int x, int k) {
  GraphOps ops{*impl_};
  const Tensor& vx = ops.val(x);
  ops.require(vx.shape.size() == 2, "topk_rows_sum",
              "expects [m,p], got " + shape_str(vx.shape));
  ops.require(k >= 1 && k <= vx.shape[1], "topk_rows_sum",
              "k=" + std::to_string(k) + " out of range for " + shape_str(vx.shape));
  auto n = std::make_unique<TopkRowsSumNode>();
  n->x = x;
  n->m = vx.shape[0];
  n->p = vx.shape[1];
  n->k = k;
  n->name = "topk_rows_sum";
  n->picked.resize(static_cast<std::size_t>(n->m) * k);
  double total = 0.0;
  std::vector<std::pair<double, int>> best(k);
  for (int i = 0; i < n->m; ++i) {
    const double* row = vx.ptr() + static_cast<std::size_t>(i) * n->p;
    int filled = 0;
    for (int j = 0; j < n->p; ++j) {
      const double v = row[j];
      // keep `best` ordered by (value desc, index asc); equal values never
      // displace an earlier index
      int pos = filled;
      while (pos > 0 && best[pos - 1].first < v) --pos;
      if (pos < k) {
        const int last = std::min(filled, k - 1);
        for (int t = last; t > pos; --t) best[t] = best[t - 1];
        best[pos] = {v, j};
        if (filled < k) ++filled;
      }
    }
    for (int t = 0; t < k; ++t) {
      total += best[t].first;
      n->picked[static_cast<std::size_t>(i) * k + t] = best[t].second;
    }
  }
  n->val = Tensor::scalar(total);
  return ops.attach(std::move(n), {x});
}

int Graph::stack_scalars(const std::vector<int>& xs) {
  GraphOps ops{*impl_};
  ops.require(!xs.empty(), "stack_scalars", "needs at least one element");
  auto n = std::make_unique<StackScalarsNode>();
  n->xs = xs;
  n->name = "stack_scalars";
  n->val = Tensor({static_cast<int>(xs.size())});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& v = ops.val(xs[i]);
    ops.require(v.numel() == 1, "stack_scalars",
                "element " + std::to_string(i) + " is not scalar: " + shape_str(v.shape));
    n->val.data[i] = v.data[0];
  }
  return ops.attach(std::move(n), xs);
}

void Graph::backward(int root, GradTargets targets) {
  GraphNode& r = impl_->at(root);
  if (r.val.numel() != 1)
    throw std::invalid_argument("graph: backward root must be scalar, got " +
                                shape_str(r.val.shape));
  for (auto& n : impl_->nodes) n->grad_live = false;
  impl_->mode = targets;
  if (!impl_->wants(root)) return;  // no selected leaves below the root
  impl_->grad_buf(root).data[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    GraphNode& n = *impl_->nodes[id];
    if (!n.grad_live) continue;
    if (!impl_->wants(id)) continue;
    n.backprop(*impl_);
  }
}

// ---- utilities ------------------------------------------------------------

Tensor input_gradient(const std::function<int(Graph&, int)>& build, const Tensor& x) {
  Graph g;
  const int xid = g.input(x);
  const int root = build(g, xid);
  g.backward(root, GradTargets{true, false});
  return g.gradient(xid);
}

FdReport finite_difference_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                 const Tensor& analytic_grad, double fd_eps, int max_coords,
                                 std::uint64_t seed) {
  if (!x.same_shape(analytic_grad))
    throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
  std::vector<std::size_t> coords;
  const std::size_t n = x.numel();
  if (max_coords > 0 && static_cast<std::size_t>(max_coords) < n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    Rng rng = derive_rng(seed, "fd-coords");
    for (int i = 0; i < max_coords; ++i) {
      const std::size_t j = i + rng.uniform_int(n - i);
      std::swap(all[i], all[j]);
      coords.push_back(all[i]);
    }
  } else {
    coords.resize(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
  }
  FdReport rep;
  Tensor probe = x;
  for (std::size_t c : coords) {
    const double orig = probe.data[c];
    probe.data[c] = orig + fd_eps;
    const double fp = f(probe);
    probe.data[c] = orig - fd_eps;
    const double fm = f(probe);
    probe.data[c] = orig;
    const double fd = (fp - fm) / (2.0 * fd_eps);
    const double ana = analytic_grad.data[c];
    const double abs_err = std::fabs(ana - fd);
    const double rel_err = abs_err / (std::fabs(ana) + std::fabs(fd) + 1e-12);
    if (abs_err > rep.max_abs_err) {
      rep.max_abs_err = abs_err;
      rep.worst_index = c;
    }
    rep.max_rel_err = std::max(rep.max_rel_err, rel_err);
  }
  return rep;
}

}  // namespace mdat
