#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "faqd/tensor.hpp"

namespace faqd {

namespace detail {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C (MxN) = A (MxK) * B, B given row-major as KxN or, when transb, NxK.
inline void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool transb,
                 bool accumulate = false) {
  ECMap A(a, m, k);
  EMap C(c, m, n);
  if (transb) {
    ECMap B(b, n, k);
    if (accumulate)
      C.noalias() += A * B.transpose();
    else
      C.noalias() = A * B.transpose();
  } else {
    ECMap B(b, k, n);
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  }
}

// C (MxN) = A^T (stored KxM) * B (KxN)
inline void gemm_ta(const float* a, const float* b, float* c, int m, int k, int n,
                    bool accumulate = false) {
  ECMap A(a, k, m);
  ECMap B(b, k, n);
  EMap C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// Linear interpolation taps, half-pixel centers, edge-clamped.
struct LinTap {
  int i0, i1;
  float w0, w1;
};

inline std::vector<LinTap> linear_taps(int in, int on) {
  std::vector<LinTap> t(static_cast<size_t>(on));
  float r = static_cast<float>(in) / static_cast<float>(on);
  for (int o = 0; o < on; ++o) {
    float src = (static_cast<float>(o) + 0.5f) * r - 0.5f;
    float fl = std::floor(src);
    int i0 = static_cast<int>(fl);
    float f = src - fl;
    int a = std::clamp(i0, 0, in - 1), b = std::clamp(i0 + 1, 0, in - 1);
    t[static_cast<size_t>(o)] = {a, b, 1.0f - f, f};
  }
  return t;
}

}  // namespace detail

// Per-layer batch-norm running statistics. Forward in training mode stages the
// batch statistics into pending_*; they affect the running averages only when
// commit() is called (so repeated forwards, e.g. finite-difference probes, do
// not drift the state).
struct BNRunning {
  std::vector<float> mean, var;
  std::vector<float> pending_mean, pending_var;
  bool has_pending = false;

  explicit BNRunning(int channels = 0)
      : mean(static_cast<size_t>(channels), 0.0f), var(static_cast<size_t>(channels), 1.0f) {}

  void commit(float momentum) {
    if (!has_pending) return;
    for (size_t c = 0; c < mean.size(); ++c) {
      mean[c] = momentum * mean[c] + (1.0f - momentum) * pending_mean[c];
      var[c] = momentum * var[c] + (1.0f - momentum) * pending_var[c];
    }
    has_pending = false;
  }
};

class Graph;

// A custom primitive: forward_fn computes the output from input tensors;
// backward_fn maps (inputs, output, upstream grad) to one gradient per input,
// bypassing any true derivative of forward_fn (straight-through estimators).
struct CustomOp {
  std::string name;
  std::function<Tensor(const std::vector<const Tensor*>&)> forward;
  std::function<std::vector<Tensor>(const std::vector<const Tensor*>&, const Tensor&,
                                    const Tensor&)>
      backward;
};

using CustomOpId = int;

namespace detail {
struct CustomRegistry {
  std::mutex mu;
  std::vector<std::shared_ptr<const CustomOp>> ops;
  static CustomRegistry& instance() {
    static CustomRegistry r;
    return r;
  }
};
}  // namespace detail

inline CustomOpId custom_grad(
    std::string name, std::function<Tensor(const std::vector<const Tensor*>&)> forward_fn,
    std::function<std::vector<Tensor>(const std::vector<const Tensor*>&, const Tensor&,
                                      const Tensor&)>
        backward_fn) {
  auto op = std::make_shared<CustomOp>();
  op->name = std::move(name);
  op->forward = std::move(forward_fn);
  op->backward = std::move(backward_fn);
  auto& reg = detail::CustomRegistry::instance();
  std::lock_guard<std::mutex> lock(reg.mu);
  reg.ops.push_back(std::move(op));
  return static_cast<CustomOpId>(reg.ops.size() - 1);
}

inline std::shared_ptr<const CustomOp> lookup_custom(CustomOpId id) {
  auto& reg = detail::CustomRegistry::instance();
  std::lock_guard<std::mutex> lock(reg.mu);
  if (id < 0 || id >= static_cast<int>(reg.ops.size()))
    throw ConfigError("custom op id " + std::to_string(id) + " is not registered");
  return reg.ops[static_cast<size_t>(id)];
}

// Reverse-mode autodiff over a recorded expression DAG. Nodes are appended in
// topological order by construction; forward() evaluates every node, and
// backward() walks the list in reverse accumulating gradients (add-into
// semantics at fan-out). Shapes are fixed at record time; leaves can be
// re-bound and the graph re-run, which keeps training steps allocation-free.
class Graph {
 public:
  using NodeId = int;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves -------------------------------------------------------------

  NodeId input(const std::string& name, Tensor t) {
    NodeId id = add_leaf(std::move(t));
    if (!name.empty()) {
      if (named_.count(name)) throw ConfigError("graph input '" + name + "' already exists");
      named_[name] = id;
    }
    return id;
  }

  NodeId leaf(Tensor t) { return add_leaf(std::move(t)); }

  NodeId constant(Tensor t) {
    t.requires_grad = false;
    return add_leaf(std::move(t));
  }

  void bind(NodeId id, const Tensor& t) {
    Node& n = node(id);
    if (!n.is_leaf) throw StateError("bind: node " + std::to_string(id) + " is not a leaf");
    if (t.shape != n.val.shape)
      throw ShapeError("bind: expected shape " + shape_str(n.val.shape) + ", got " +
                       shape_str(t.shape));
    n.val.data = t.data;
    forward_clean_ = false;
  }

  void bind(const std::string& name, const Tensor& t) { bind(named_id(name), t); }

  void mark_output(const std::string& name, NodeId id) {
    node(id);
    outputs_[name] = id;
  }

  // ---- execution ----------------------------------------------------------

  void forward() {
    for (auto& n : nodes_)
      if (n->fwd) n->fwd();
    forward_clean_ = true;
  }

  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs) {
    for (const auto& [name, t] : inputs) bind(name, t);
    forward();
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out[name] = node(id).val;
    return out;
  }

  void backward(NodeId out, const Tensor& seed) {
    if (!forward_clean_)
      throw StateError("backward called before forward (or after re-binding inputs)");
    Node& o = node(out);
    if (seed.shape != o.val.shape)
      throw ShapeError("backward: seed shape " + shape_str(seed.shape) +
                       " does not match output shape " + shape_str(o.val.shape));
    for (auto& n : nodes_)
      if (n->requires_grad) {
        n->grad.assign(n->val.data.size(), 0.0f);
      }
    if (!o.requires_grad) return;  // no differentiable leaves reachable
    o.grad = seed.data;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.requires_grad && n.bwd) n.bwd();
    }
  }

  void backward(NodeId out) { backward(out, Tensor::full(node(out).val.shape, 1.0f)); }

  // ---- access -------------------------------------------------------------

  const Tensor& value(NodeId id) const { return node(id).val; }
  float scalar_value(NodeId id) const {
    const Node& n = node(id);
    if (n.val.data.size() != 1) throw ShapeError("scalar_value: node is not a scalar");
    return n.val.data[0];
  }
  const std::vector<float>& grad(NodeId id) const { return node(id).grad; }
  Tensor grad_tensor(NodeId id) const {
    const Node& n = node(id);
    Tensor t = Tensor::zeros(n.val.shape);
    if (!n.grad.empty()) t.data = n.grad;
    return t;
  }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  const std::string& op_name(NodeId id) const { return node(id).op; }
  NodeId named_id(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw ConfigError("graph has no input named '" + name + "'");
    return it->second;
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  // ---- primitives ----------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false) {
    Node &na = node(a), &nb = node(b);
    require_rank("matmul", na, 2);
    require_rank("matmul", nb, 2);
    int m = na.val.dim(0), k = na.val.dim(1);
    int bk = transpose_b ? nb.val.dim(1) : nb.val.dim(0);
    int n = transpose_b ? nb.val.dim(0) : nb.val.dim(1);
    if (k != bk)
      throw ShapeError("matmul: inner dimensions disagree, " + shape_str(na.val.shape) + " vs " +
                       shape_str(nb.val.shape));
    NodeId id = add_node("matmul", {a, b}, {m, n});
    Node* out = nodes_.back().get();
    Node *pa = &node(a), *pb = &node(b);
    out->fwd = [out, pa, pb, m, k, n, transpose_b] {
      detail::gemm(pa->val.data.data(), pb->val.data.data(), out->val.data.data(), m, k, n,
                   transpose_b);
    };
    out->bwd = [out, pa, pb, m, k, n, transpose_b] {
      if (pa->requires_grad) {
        // dA = dC * B^T  (or dC * B when b was transposed)
        detail::gemm(out->grad.data(), pb->val.data.data(), pa->grad.data(), m, n, k,
                     !transpose_b, true);
      }
      if (pb->requires_grad) {
        if (transpose_b)  // dB (n x k) = dC^T * A
          detail::gemm_ta(out->grad.data(), pa->val.data.data(), pb->grad.data(), n, m, k, true);
        else  // dB (k x n) = A^T * dC
          detail::gemm_ta(pa->val.data.data(), out->grad.data(), pb->grad.data(), k, m, n, true);
      }
    };
    return id;
  }

  // x: BxCxHxW, w: OxCxKhxKw, square kernel, symmetric stride/padding.
  NodeId conv2d(NodeId x, NodeId w, int stride, int pad) {
    Node &nx = node(x), &nw = node(w);
    require_rank("conv2d", nx, 4);
    require_rank("conv2d", nw, 4);
    int B = nx.val.dim(0), C = nx.val.dim(1), H = nx.val.dim(2), W = nx.val.dim(3);
    int O = nw.val.dim(0), KC = nw.val.dim(1), kh = nw.val.dim(2), kw = nw.val.dim(3);
    if (C != KC)
      throw ShapeError("conv2d: input channels " + std::to_string(C) +
                       " != kernel channels " + std::to_string(KC));
    if (kh != kw) throw ShapeError("conv2d: only square kernels supported");
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
    int OH = (H + 2 * pad - kh) / stride + 1;
    int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH < 1 || OW < 1)
      throw ShapeError("conv2d: kernel " + std::to_string(kh) + " does not fit input " +
                       shape_str(nx.val.shape) + " with pad " + std::to_string(pad));
    NodeId id = add_node("conv2d", {x, w}, {B, O, OH, OW});
    Node* out = nodes_.back().get();
    Node *px = &node(x), *pw = &node(w);

    struct Scratch {
      std::vector<float> col, mat, dmat, dcol;
    };
    auto sc = std::make_shared<Scratch>();
    int K = C * kh * kw;        // columns of the im2col matrix
    int R = B * OH * OW;        // rows
    auto im2col = [=](const float* xd, float* col) {
      int r = 0;
      for (int b = 0; b < B; ++b) {
        const float* xb = xd + static_cast<std::int64_t>(b) * C * H * W;
        for (int oy = 0; oy < OH; ++oy) {
          for (int ox = 0; ox < OW; ++ox, ++r) {
            float* row = col + static_cast<std::int64_t>(r) * K;
            int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
            int i = 0;
            for (int c = 0; c < C; ++c) {
              const float* xc = xb + static_cast<std::int64_t>(c) * H * W;
              for (int ky = 0; ky < kh; ++ky) {
                int iy = iy0 + ky;
                for (int kx = 0; kx < kw; ++kx, ++i) {
                  int ix = ix0 + kx;
                  row[i] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                               ? xc[iy * W + ix]
                               : 0.0f;
                }
              }
            }
          }
        }
      }
    };

    out->fwd = [=] {
      sc->col.resize(static_cast<size_t>(R) * K);
      sc->mat.resize(static_cast<size_t>(R) * O);
      im2col(px->val.data.data(), sc->col.data());
      detail::gemm(sc->col.data(), pw->val.data.data(), sc->mat.data(), R, K, O,
                   /*transb=*/true);
      // scatter (b,oy,ox,o) -> NCHW
      float* y = out->val.data.data();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) {
          float* yc = y + (static_cast<std::int64_t>(b) * O + o) * OH * OW;
          const float* src = sc->mat.data() + static_cast<std::int64_t>(b) * OH * OW * O + o;
          for (int p2 = 0; p2 < OH * OW; ++p2) yc[p2] = src[static_cast<std::int64_t>(p2) * O];
        }
    };
    out->bwd = [=] {
      sc->dmat.resize(static_cast<size_t>(R) * O);
      const float* gy = out->grad.data();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) {
          const float* gc = gy + (static_cast<std::int64_t>(b) * O + o) * OH * OW;
          float* dst = sc->dmat.data() + static_cast<std::int64_t>(b) * OH * OW * O + o;
          for (int p2 = 0; p2 < OH * OW; ++p2) dst[static_cast<std::int64_t>(p2) * O] = gc[p2];
        }
      if (pw->requires_grad)  // dW (OxK) += dmat^T (OxR) * col (RxK)
        detail::gemm_ta(sc->dmat.data(), sc->col.data(), pw->grad.data(), O, R, K, true);
      if (px->requires_grad) {
        sc->dcol.resize(static_cast<size_t>(R) * K);
        detail::gemm(sc->dmat.data(), pw->val.data.data(), sc->dcol.data(), R, O, K,
                     /*transb=*/false);
        float* gx = px->grad.data();
        int r = 0;
        for (int b = 0; b < B; ++b) {
          float* gxb = gx + static_cast<std::int64_t>(b) * C * H * W;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox, ++r) {
              const float* row = sc->dcol.data() + static_cast<std::int64_t>(r) * K;
              int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
              int i = 0;
              for (int c = 0; c < C; ++c) {
                float* gxc = gxb + static_cast<std::int64_t>(c) * H * W;
                for (int ky = 0; ky < kh; ++ky) {
                  int iy = iy0 + ky;
                  for (int kx = 0; kx < kw; ++kx, ++i) {
                    int ix = ix0 + kx;
                    if (iy >= 0 && iy < H && ix >= 0 && ix < W) gxc[iy * W + ix] += row[i];
                  }
                }
              }
            }
        }
      }
    };
    return id;
  }

  // rank-4 x with per-channel bias (len C), or rank-2 x with per-column bias.
  NodeId bias_add(NodeId x, NodeId b) {
    Node &nx = node(x), &nb = node(b);
    if (nb.val.rank() != 1) throw ShapeError("bias_add: bias must be rank 1");
    if (nx.val.rank() == 4) {
      if (nb.val.dim(0) != nx.val.dim(1))
        throw ShapeError("bias_add: bias length " + std::to_string(nb.val.dim(0)) +
                         " != channels " + std::to_string(nx.val.dim(1)));
    } else if (nx.val.rank() == 2) {
      if (nb.val.dim(0) != nx.val.dim(1))
        throw ShapeError("bias_add: bias length " + std::to_string(nb.val.dim(0)) +
                         " != columns " + std::to_string(nx.val.dim(1)));
    } else {
      throw ShapeError("bias_add: input must be rank 2 or 4");
    }
    NodeId id = add_node("bias_add", {x, b}, nx.val.shape);
    Node* out = nodes_.back().get();
    Node *px = &node(x), *pb = &node(b);
    bool nchw = nx.val.rank() == 4;
    int Bn = nx.val.dim(0), C = nx.val.dim(1);
    int HW = nchw ? nx.val.dim(2) * nx.val.dim(3) : 1;
    out->fwd = [=] {
      const float* xd = px->val.data.data();
      const float* bd = pb->val.data.data();
      float* y = out->val.data.data();
      std::int64_t i = 0;
      for (int b2 = 0; b2 < Bn; ++b2)
        for (int c = 0; c < C; ++c) {
          float bv = bd[c];
          for (int p2 = 0; p2 < HW; ++p2, ++i) y[i] = xd[i] + bv;
        }
    };
    out->bwd = [=] {
      const float* g = out->grad.data();
      if (px->requires_grad) {
        float* gx = px->grad.data();
        for (size_t i = 0; i < out->grad.size(); ++i) gx[i] += g[i];
      }
      if (pb->requires_grad) {
        float* gb = pb->grad.data();
        std::int64_t i = 0;
        for (int b2 = 0; b2 < Bn; ++b2)
          for (int c = 0; c < C; ++c) {
            float s = 0.0f;
            for (int p2 = 0; p2 < HW; ++p2, ++i) s += g[i];
            gb[c] += s;
          }
      }
    };
    return id;
  }

  NodeId add(NodeId a, NodeId b) { return elementwise2("add", a, b); }
  NodeId sub(NodeId a, NodeId b) { return elementwise2("sub", a, b); }
  NodeId mul(NodeId a, NodeId b) { return elementwise2("mul", a, b); }

  NodeId scale(NodeId a, float c) {
    Node& na = node(a);
    NodeId id = add_node("scale", {a}, na.val.shape);
    Node* out = nodes_.back().get();
    Node* pa = &node(a);
    out->fwd = [out, pa, c] {
      for (size_t i = 0; i < out->val.data.size(); ++i) out->val.data[i] = c * pa->val.data[i];
    };
    out->bwd = [out, pa, c] {
      if (!pa->requires_grad) return;
      for (size_t i = 0; i < out->grad.size(); ++i) pa->grad[i] += c * out->grad[i];
    };
    return id;
  }

  NodeId relu(NodeId x) {
    Node& nx = node(x);
    NodeId id = add_node("relu", {x}, nx.val.shape);
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    out->fwd = [out, px] {
      for (size_t i = 0; i < out->val.data.size(); ++i)
        out->val.data[i] = px->val.data[i] > 0.0f ? px->val.data[i] : 0.0f;
    };
    out->bwd = [out, px] {
      if (!px->requires_grad) return;
      for (size_t i = 0; i < out->grad.size(); ++i)
        if (px->val.data[i] > 0.0f) px->grad[i] += out->grad[i];
    };
    return id;
  }

  NodeId avg_pool(NodeId x, int win, int stride) {
    Node& nx = node(x);
    require_rank("avg_pool", nx, 4);
    int B = nx.val.dim(0), C = nx.val.dim(1), H = nx.val.dim(2), W = nx.val.dim(3);
    if (win < 1 || stride < 1) throw ConfigError("avg_pool: bad window/stride");
    int OH = (H - win) / stride + 1, OW = (W - win) / stride + 1;
    if (OH < 1 || OW < 1) throw ShapeError("avg_pool: window does not fit input");
    NodeId id = add_node("avg_pool", {x}, {B, C, OH, OW});
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    float inv = 1.0f / static_cast<float>(win * win);
    out->fwd = [=] {
      const float* xd = px->val.data.data();
      float* y = out->val.data.data();
      for (int bc = 0; bc < B * C; ++bc) {
        const float* xp = xd + static_cast<std::int64_t>(bc) * H * W;
        float* yp = y + static_cast<std::int64_t>(bc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            float s = 0.0f;
            for (int ky = 0; ky < win; ++ky)
              for (int kx = 0; kx < win; ++kx)
                s += xp[(oy * stride + ky) * W + ox * stride + kx];
            yp[oy * OW + ox] = s * inv;
          }
      }
    };
    out->bwd = [=] {
      if (!px->requires_grad) return;
      const float* g = out->grad.data();
      float* gx = px->grad.data();
      for (int bc = 0; bc < B * C; ++bc) {
        float* gxp = gx + static_cast<std::int64_t>(bc) * H * W;
        const float* gp = g + static_cast<std::int64_t>(bc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            float gv = gp[oy * OW + ox] * inv;
            for (int ky = 0; ky < win; ++ky)
              for (int kx = 0; kx < win; ++kx)
                gxp[(oy * stride + ky) * W + ox * stride + kx] += gv;
          }
      }
    };
    return id;
  }

  NodeId global_avg_pool(NodeId x) {
    Node& nx = node(x);
    require_rank("global_avg_pool", nx, 4);
    int B = nx.val.dim(0), C = nx.val.dim(1), HW = nx.val.dim(2) * nx.val.dim(3);
    NodeId id = add_node("global_avg_pool", {x}, {B, C});
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    float inv = 1.0f / static_cast<float>(HW);
    out->fwd = [=] {
      const float* xd = px->val.data.data();
      float* y = out->val.data.data();
      for (int bc = 0; bc < B * C; ++bc) {
        const float* xp = xd + static_cast<std::int64_t>(bc) * HW;
        float s = 0.0f;
        for (int p2 = 0; p2 < HW; ++p2) s += xp[p2];
        y[bc] = s * inv;
      }
    };
    out->bwd = [=] {
      if (!px->requires_grad) return;
      const float* g = out->grad.data();
      float* gx = px->grad.data();
      for (int bc = 0; bc < B * C; ++bc) {
        float gv = g[bc] * inv;
        float* gxp = gx + static_cast<std::int64_t>(bc) * HW;
        for (int p2 = 0; p2 < HW; ++p2) gxp[p2] += gv;
      }
    };
    return id;
  }

  // Batch normalization over (B,H,W) per channel. In training mode batch
  // statistics normalize the activations and are staged into `run`; inference
  // mode uses the committed running statistics.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, std::shared_ptr<BNRunning> run,
                    bool training, float momentum = 0.9f, float eps = 1e-5f) {
    Node& nx = node(x);
    require_rank("batch_norm", nx, 4);
    int B = nx.val.dim(0), C = nx.val.dim(1), HW = nx.val.dim(2) * nx.val.dim(3);
    Node &ng = node(gamma), &nb = node(beta);
    if (ng.val.size() != C || nb.val.size() != C)
      throw ShapeError("batch_norm: gamma/beta length must equal channels " + std::to_string(C));
    if (static_cast<int>(run->mean.size()) != C)
      throw ShapeError("batch_norm: running stats length must equal channels");
    NodeId id = add_node("batch_norm", {x, gamma, beta}, nx.val.shape);
    Node* out = nodes_.back().get();
    Node *px = &node(x), *pg = &node(gamma), *pb = &node(beta);

    struct Saved {
      std::vector<float> mean, invstd;
    };
    auto sv = std::make_shared<Saved>();
    int m = B * HW;
    out->fwd = [=] {
      sv->mean.assign(static_cast<size_t>(C), 0.0f);
      sv->invstd.assign(static_cast<size_t>(C), 0.0f);
      const float* xd = px->val.data.data();
      float* y = out->val.data.data();
      if (training) {
        std::vector<float> var(static_cast<size_t>(C), 0.0f);
        for (int c = 0; c < C; ++c) {
          double s = 0.0;
          for (int b = 0; b < B; ++b) {
            const float* xp = xd + (static_cast<std::int64_t>(b) * C + c) * HW;
            for (int p2 = 0; p2 < HW; ++p2) s += xp[p2];
          }
          float mu = static_cast<float>(s / m);
          double v = 0.0;
          for (int b = 0; b < B; ++b) {
            const float* xp = xd + (static_cast<std::int64_t>(b) * C + c) * HW;
            for (int p2 = 0; p2 < HW; ++p2) {
              double d = xp[p2] - mu;
              v += d * d;
            }
          }
          sv->mean[c] = mu;
          var[c] = static_cast<float>(v / m);
          sv->invstd[c] = 1.0f / std::sqrt(var[c] + eps);
        }
        run->pending_mean = sv->mean;
        run->pending_var = var;
        run->has_pending = true;
      } else {
        for (int c = 0; c < C; ++c) {
          sv->mean[c] = run->mean[c];
          sv->invstd[c] = 1.0f / std::sqrt(run->var[c] + eps);
        }
      }
      const float* gd = pg->val.data.data();
      const float* bd = pb->val.data.data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const float* xp = xd + (static_cast<std::int64_t>(b) * C + c) * HW;
          float* yp = y + (static_cast<std::int64_t>(b) * C + c) * HW;
          float mu = sv->mean[c], is = sv->invstd[c], ga = gd[c], be = bd[c];
          for (int p2 = 0; p2 < HW; ++p2) yp[p2] = ga * (xp[p2] - mu) * is + be;
        }
    };
    out->bwd = [=] {
      const float* xd = px->val.data.data();
      const float* g = out->grad.data();
      const float* gd = pg->val.data.data();
      for (int c = 0; c < C; ++c) {
        float mu = sv->mean[c], is = sv->invstd[c];
        double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy*xhat)
        for (int b = 0; b < B; ++b) {
          std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
          for (int p2 = 0; p2 < HW; ++p2) {
            float xh = (xd[off + p2] - mu) * is;
            s1 += g[off + p2];
            s2 += g[off + p2] * xh;
          }
        }
        if (pg->requires_grad) pg->grad[c] += static_cast<float>(s2);
        if (pb->requires_grad) pb->grad[c] += static_cast<float>(s1);
        if (px->requires_grad) {
          float ga = gd[c];
          float* gx = px->grad.data();
          if (training) {
            float a1 = static_cast<float>(s1 / m), a2 = static_cast<float>(s2 / m);
            for (int b = 0; b < B; ++b) {
              std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
              for (int p2 = 0; p2 < HW; ++p2) {
                float xh = (xd[off + p2] - mu) * is;
                gx[off + p2] += ga * is * (g[off + p2] - a1 - xh * a2);
              }
            }
          } else {
            for (int b = 0; b < B; ++b) {
              std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * HW;
              for (int p2 = 0; p2 < HW; ++p2) gx[off + p2] += ga * is * g[off + p2];
            }
          }
        }
      }
    };
    return id;
  }

  NodeId softmax(NodeId x) {
    Node& nx = node(x);
    require_rank("softmax", nx, 2);
    int B = nx.val.dim(0), K = nx.val.dim(1);
    NodeId id = add_node("softmax", {x}, nx.val.shape);
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    out->fwd = [=] {
      const float* xd = px->val.data.data();
      float* y = out->val.data.data();
      for (int b = 0; b < B; ++b) {
        const float* xr = xd + static_cast<std::int64_t>(b) * K;
        float* yr = y + static_cast<std::int64_t>(b) * K;
        float mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
          yr[k] = std::exp(xr[k] - mx);
          s += yr[k];
        }
        float inv = static_cast<float>(1.0 / s);
        for (int k = 0; k < K; ++k) yr[k] *= inv;
      }
    };
    out->bwd = [=] {
      if (!px->requires_grad) return;
      const float* y = out->val.data.data();
      const float* g = out->grad.data();
      float* gx = px->grad.data();
      for (int b = 0; b < B; ++b) {
        std::int64_t off = static_cast<std::int64_t>(b) * K;
        double dot = 0.0;
        for (int k = 0; k < K; ++k) dot += g[off + k] * y[off + k];
        for (int k = 0; k < K; ++k)
          gx[off + k] += y[off + k] * (g[off + k] - static_cast<float>(dot));
      }
    };
    return id;
  }

  NodeId log(NodeId x) {
    Node& nx = node(x);
    NodeId id = add_node("log", {x}, nx.val.shape);
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    out->fwd = [out, px] {
      for (size_t i = 0; i < out->val.data.size(); ++i)
        out->val.data[i] = std::log(px->val.data[i]);
    };
    out->bwd = [out, px] {
      if (!px->requires_grad) return;
      for (size_t i = 0; i < out->grad.size(); ++i) px->grad[i] += out->grad[i] / px->val.data[i];
    };
    return id;
  }

  NodeId sum_all(NodeId x) { return reduce_all("sum_all", x, 1.0f); }
  NodeId mean_all(NodeId x) {
    return reduce_all("mean_all", x, 1.0f / static_cast<float>(node(x).val.size()));
  }

  NodeId reshape(NodeId x, Shape s) {
    Node& nx = node(x);
    if (numel(s) != nx.val.size())
      throw ShapeError("reshape: cannot view " + shape_str(nx.val.shape) + " as " + shape_str(s));
    NodeId id = add_node("reshape", {x}, std::move(s));
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    out->fwd = [out, px] { out->val.data = px->val.data; };
    out->bwd = [out, px] {
      if (!px->requires_grad) return;
      for (size_t i = 0; i < out->grad.size(); ++i) px->grad[i] += out->grad[i];
    };
    return id;
  }

  // Bilinear resize of NCHW maps (half-pixel centers). Linear in x.
  NodeId bilinear_resize(NodeId x, int oh, int ow) {
    Node& nx = node(x);
    require_rank("bilinear_resize", nx, 4);
    int B = nx.val.dim(0), C = nx.val.dim(1), H = nx.val.dim(2), W = nx.val.dim(3);
    if (oh < 1 || ow < 1) throw ConfigError("bilinear_resize: bad target size");
    NodeId id = add_node("bilinear_resize", {x}, {B, C, oh, ow});
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    using Tap = detail::LinTap;
    auto ty = std::make_shared<std::vector<Tap>>(detail::linear_taps(H, oh));
    auto tx = std::make_shared<std::vector<Tap>>(detail::linear_taps(W, ow));
    out->fwd = [=] {
      const float* xd = px->val.data.data();
      float* y = out->val.data.data();
      for (int bc = 0; bc < B * C; ++bc) {
        const float* xp = xd + static_cast<std::int64_t>(bc) * H * W;
        float* yp = y + static_cast<std::int64_t>(bc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const Tap& a = (*ty)[static_cast<size_t>(oy)];
          for (int ox = 0; ox < ow; ++ox) {
            const Tap& b = (*tx)[static_cast<size_t>(ox)];
            yp[oy * ow + ox] = a.w0 * (b.w0 * xp[a.i0 * W + b.i0] + b.w1 * xp[a.i0 * W + b.i1]) +
                               a.w1 * (b.w0 * xp[a.i1 * W + b.i0] + b.w1 * xp[a.i1 * W + b.i1]);
          }
        }
      }
    };
    out->bwd = [=] {
      if (!px->requires_grad) return;
      const float* g = out->grad.data();
      float* gx = px->grad.data();
      for (int bc = 0; bc < B * C; ++bc) {
        float* gxp = gx + static_cast<std::int64_t>(bc) * H * W;
        const float* gp = g + static_cast<std::int64_t>(bc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const Tap& a = (*ty)[static_cast<size_t>(oy)];
          for (int ox = 0; ox < ow; ++ox) {
            const Tap& b = (*tx)[static_cast<size_t>(ox)];
            float gv = gp[oy * ow + ox];
            gxp[a.i0 * W + b.i0] += a.w0 * b.w0 * gv;
            gxp[a.i0 * W + b.i1] += a.w0 * b.w1 * gv;
            gxp[a.i1 * W + b.i0] += a.w1 * b.w0 * gv;
            gxp[a.i1 * W + b.i1] += a.w1 * b.w1 * gv;
          }
        }
      }
    };
    return id;
  }

  // Mean negative log-softmax of the true class. labels: rank-1 float tensor
  // of class indices (not differentiable).
  NodeId nll(NodeId logits, NodeId labels) {
    Node& nx = node(logits);
    Node& nl = node(labels);
    require_rank("nll", nx, 2);
    if (nl.val.rank() != 1 || nl.val.dim(0) != nx.val.dim(0))
      throw ShapeError("nll: labels must be rank 1 with one entry per row");
    int B = nx.val.dim(0), K = nx.val.dim(1);
    NodeId id = add_node("nll", {logits, labels}, {1});
    Node* out = nodes_.back().get();
    Node *px = &node(logits), *pl = &node(labels);
    auto probs = std::make_shared<std::vector<float>>();
    out->fwd = [=] {
      probs->assign(static_cast<size_t>(B) * K, 0.0f);
      const float* xd = px->val.data.data();
      double total = 0.0;
      for (int b = 0; b < B; ++b) {
        int lab = static_cast<int>(pl->val.data[static_cast<size_t>(b)]);
        if (lab < 0 || lab >= K)
          throw InputError("nll: label " + std::to_string(lab) + " out of range [0," +
                           std::to_string(K) + ") at row " + std::to_string(b));
        const float* xr = xd + static_cast<std::int64_t>(b) * K;
        float mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(xr[k]) - mx);
        double logz = std::log(s) + mx;
        total += logz - xr[lab];
        float* pr = probs->data() + static_cast<std::int64_t>(b) * K;
        for (int k = 0; k < K; ++k)
          pr[k] = static_cast<float>(std::exp(static_cast<double>(xr[k]) - logz));
      }
      out->val.data[0] = static_cast<float>(total / B);
    };
    out->bwd = [=] {
      if (!px->requires_grad) return;
      float up = out->grad[0] / static_cast<float>(B);
      float* gx = px->grad.data();
      for (int b = 0; b < B; ++b) {
        int lab = static_cast<int>(pl->val.data[static_cast<size_t>(b)]);
        const float* pr = probs->data() + static_cast<std::int64_t>(b) * K;
        float* gr = gx + static_cast<std::int64_t>(b) * K;
        for (int k = 0; k < K; ++k) gr[k] += up * (pr[k] - (k == lab ? 1.0f : 0.0f));
      }
    };
    return id;
  }

  // KL(P||Q) with P = softmax(t_logits), Q = softmax(s_logits), mean over
  // rows. The teacher side (first argument) carries no gradient.
  NodeId kl(NodeId t_logits, NodeId s_logits) {
    Node& nt = node(t_logits);
    Node& ns = node(s_logits);
    require_rank("kl", nt, 2);
    require_rank("kl", ns, 2);
    if (nt.val.shape != ns.val.shape)
      throw ShapeError("kl: logit shapes disagree, " + shape_str(nt.val.shape) + " vs " +
                       shape_str(ns.val.shape));
    int B = nt.val.dim(0), K = nt.val.dim(1);
    NodeId id = add_node("kl", {t_logits, s_logits}, {1});
    Node* out = nodes_.back().get();
    Node *pt = &node(t_logits), *ps = &node(s_logits);
    auto saved = std::make_shared<std::vector<float>>();  // P then Q, rowwise
    out->fwd = [=] {
      saved->assign(static_cast<size_t>(2) * B * K, 0.0f);
      const float* td = pt->val.data.data();
      const float* sd = ps->val.data.data();
      float* P = saved->data();
      float* Q = saved->data() + static_cast<std::int64_t>(B) * K;
      double total = 0.0;
      auto row_logsoftmax = [K](const float* xr, float* prob, double* logp) {
        float mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(xr[k]) - mx);
        double logz = std::log(s) + mx;
        for (int k = 0; k < K; ++k) {
          logp[k] = static_cast<double>(xr[k]) - logz;
          prob[k] = static_cast<float>(std::exp(logp[k]));
        }
      };
      std::vector<double> lp(static_cast<size_t>(K)), lq(static_cast<size_t>(K));
      for (int b = 0; b < B; ++b) {
        row_logsoftmax(td + static_cast<std::int64_t>(b) * K,
                       P + static_cast<std::int64_t>(b) * K, lp.data());
        row_logsoftmax(sd + static_cast<std::int64_t>(b) * K,
                       Q + static_cast<std::int64_t>(b) * K, lq.data());
        for (int k = 0; k < K; ++k)
          total += P[static_cast<std::int64_t>(b) * K + k] * (lp[k] - lq[k]);
      }
      out->val.data[0] = static_cast<float>(total / B);
    };
    out->bwd = [=] {
      if (!ps->requires_grad) return;
      float up = out->grad[0] / static_cast<float>(B);
      const float* P = saved->data();
      const float* Q = saved->data() + static_cast<std::int64_t>(B) * K;
      float* gs = ps->grad.data();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * K; ++i)
        gs[i] += up * (Q[i] - P[i]);
    };
    return id;
  }

  // Mean squared error over all entries. The first (teacher) argument carries
  // no gradient.
  NodeId mse(NodeId t, NodeId s) {
    Node& nt = node(t);
    Node& ns = node(s);
    if (nt.val.shape != ns.val.shape)
      throw InputError("mse: shapes disagree, " + shape_str(nt.val.shape) + " vs " +
                       shape_str(ns.val.shape));
    NodeId id = add_node("mse", {t, s}, {1});
    Node* out = nodes_.back().get();
    Node *pt = &node(t), *ps = &node(s);
    std::int64_t n = nt.val.size();
    out->fwd = [=] {
      const float* td = pt->val.data.data();
      const float* sd = ps->val.data.data();
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(td[i]) - sd[i];
        acc += d * d;
      }
      out->val.data[0] = static_cast<float>(acc / static_cast<double>(n));
    };
    out->bwd = [=] {
      if (!ps->requires_grad) return;
      float up = out->grad[0] * 2.0f / static_cast<float>(n);
      const float* td = pt->val.data.data();
      const float* sd = ps->val.data.data();
      float* gs = ps->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gs[i] += up * (sd[i] - td[i]);
    };
    return id;
  }

  // Apply a registered custom primitive (straight-through estimators, fused
  // losses). The forward function runs once at record time to fix the output
  // shape.
  NodeId apply(CustomOpId op_id, std::vector<NodeId> inputs) {
    auto op = lookup_custom(op_id);
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    for (NodeId i : inputs) in.push_back(&node(i).val);
    Tensor first = op->forward(in);
    NodeId id = add_node(op->name, inputs, first.shape);
    Node* out = nodes_.back().get();
    out->val.data = std::move(first.data);
    std::vector<Node*> ins;
    for (NodeId i : inputs) ins.push_back(&node(i));
    out->fwd = [out, ins, op] {
      std::vector<const Tensor*> in2;
      in2.reserve(ins.size());
      for (Node* p : ins) in2.push_back(&p->val);
      Tensor r = op->forward(in2);
      if (r.shape != out->val.shape)
        throw ShapeError(op->name + ": forward output shape changed between runs");
      out->val.data = std::move(r.data);
    };
    out->bwd = [out, ins, op] {
      std::vector<const Tensor*> in2;
      in2.reserve(ins.size());
      for (Node* p : ins) in2.push_back(&p->val);
      Tensor up(out->val.shape, out->grad);
      std::vector<Tensor> gs = op->backward(in2, out->val, up);
      if (gs.size() != ins.size())
        throw ConfigError(op->name + ": backward returned " + std::to_string(gs.size()) +
                          " gradients for " + std::to_string(ins.size()) + " inputs");
      for (size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        if (gs[i].data.empty()) continue;  // op defines this input as gradient-free
        if (gs[i].shape != ins[i]->val.shape)
          throw ConfigError(op->name + ": gradient " + std::to_string(i) + " has shape " +
                            shape_str(gs[i].shape) + ", input has " +
                            shape_str(ins[i]->val.shape));
        for (size_t j = 0; j < gs[i].data.size(); ++j) ins[i]->grad[j] += gs[i].data[j];
      }
    };
    return id;
  }

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Tensor val;
    std::vector<float> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::function<void()> fwd;
    std::function<void()> bwd;
  };

  Node& node(NodeId id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw ConfigError("graph: bad node id " + std::to_string(id));
    return *nodes_[static_cast<size_t>(id)];
  }
  const Node& node(NodeId id) const { return const_cast<Graph*>(this)->node(id); }

  static void require_rank(const char* op, const Node& n, int rank) {
    if (n.val.rank() != rank)
      throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                       " input, got " + shape_str(n.val.shape));
  }

  NodeId add_leaf(Tensor t) {
    auto n = std::make_unique<Node>();
    n->op = "leaf";
    n->requires_grad = t.requires_grad;
    n->is_leaf = true;
    n->val = std::move(t);
    nodes_.push_back(std::move(n));
    forward_clean_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId add_node(std::string op, std::vector<NodeId> inputs, Shape out_shape) {
    auto n = std::make_unique<Node>();
    n->op = std::move(op);
    n->inputs = inputs;
    bool rg = false;
    for (NodeId i : inputs) rg = rg || node(i).requires_grad;
    n->requires_grad = rg;
    n->val = Tensor::zeros(std::move(out_shape));
    nodes_.push_back(std::move(n));
    forward_clean_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId elementwise2(const char* op, NodeId a, NodeId b) {
    Node &na = node(a), &nb = node(b);
    if (na.val.shape != nb.val.shape)
      throw ShapeError(std::string(op) + ": shapes disagree, " + shape_str(na.val.shape) +
                       " vs " + shape_str(nb.val.shape));
    NodeId id = add_node(op, {a, b}, na.val.shape);
    Node* out = nodes_.back().get();
    Node *pa = &node(a), *pb = &node(b);
    std::string o(op);
    if (o == "add") {
      out->fwd = [out, pa, pb] {
        for (size_t i = 0; i < out->val.data.size(); ++i)
          out->val.data[i] = pa->val.data[i] + pb->val.data[i];
      };
      out->bwd = [out, pa, pb] {
        for (size_t i = 0; i < out->grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += out->grad[i];
          if (pb->requires_grad) pb->grad[i] += out->grad[i];
        }
      };
    } else if (o == "sub") {
      out->fwd = [out, pa, pb] {
        for (size_t i = 0; i < out->val.data.size(); ++i)
          out->val.data[i] = pa->val.data[i] - pb->val.data[i];
      };
      out->bwd = [out, pa, pb] {
        for (size_t i = 0; i < out->grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += out->grad[i];
          if (pb->requires_grad) pb->grad[i] -= out->grad[i];
        }
      };
    } else {
      out->fwd = [out, pa, pb] {
        for (size_t i = 0; i < out->val.data.size(); ++i)
          out->val.data[i] = pa->val.data[i] * pb->val.data[i];
      };
      out->bwd = [out, pa, pb] {
        for (size_t i = 0; i < out->grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += out->grad[i] * pb->val.data[i];
          if (pb->requires_grad) pb->grad[i] += out->grad[i] * pa->val.data[i];
        }
      };
    }
    return id;
  }

  NodeId reduce_all(const char* op, NodeId x, float factor) {
    NodeId id = add_node(op, {x}, {1});
    Node* out = nodes_.back().get();
    Node* px = &node(x);
    out->fwd = [out, px, factor] {
      double s = 0.0;
      for (float v : px->val.data) s += v;
      out->val.data[0] = static_cast<float>(s) * factor;
    };
    out->bwd = [out, px, factor] {
      if (!px->requires_grad) return;
      float g = out->grad[0] * factor;
      for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
    };
    return id;
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<std::string, NodeId> named_;
  std::map<std::string, NodeId> outputs_;
  bool forward_clean_ = false;
};

using NodeId = Graph::NodeId;

}  // namespace faqd
