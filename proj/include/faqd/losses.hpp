#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "faqd/flops.hpp"
#include "faqd/graph.hpp"
#include "faqd/tensor.hpp"

namespace faqd {

inline constexpr float kPixelNormFloor = 1e-8f;

// Tapped activation map, CxHxW or batched BxCxHxW.
struct FeatureMap {
  Tensor values;

  FeatureMap() = default;
  explicit FeatureMap(Tensor t) : values(std::move(t)) {
    if (values.rank() != 3 && values.rank() != 4)
      throw ShapeError("FeatureMap: expected CxHxW or BxCxHxW, got " + shape_str(values.shape));
  }

  bool batched() const { return values.rank() == 4; }
  int batch() const { return batched() ? values.dim(0) : 1; }
  int channels() const { return values.dim(batched() ? 1 : 0); }
  int height() const { return values.dim(batched() ? 2 : 1); }
  int width() const { return values.dim(batched() ? 3 : 2); }
  int pixels() const { return height() * width(); }

  const float* image(int b) const {
    return values.data.data() +
           static_cast<std::int64_t>(b) * channels() * height() * width();
  }
};

namespace detail {

// Gather image b of a CHW/BCHW map into an N x C pixel matrix, dividing each
// pixel vector by max(||.||, floor). Pass floor=0 to skip normalization.
inline void pixel_matrix_into(const FeatureMap& f, int b, float floor, std::vector<float>& out) {
  int C = f.channels(), N = f.pixels();
  out.resize(static_cast<size_t>(N) * C);
  const float* src = f.image(b);
  for (int p = 0; p < N; ++p) {
    float* row = out.data() + static_cast<std::int64_t>(p) * C;
    double nrm = 0.0;
    for (int c = 0; c < C; ++c) {
      float v = src[static_cast<std::int64_t>(c) * N + p];
      row[c] = v;
      nrm += static_cast<double>(v) * v;
    }
    if (floor > 0.0f) {
      float inv = 1.0f / std::max(static_cast<float>(std::sqrt(nrm)), floor);
      for (int c = 0; c < C; ++c) row[c] *= inv;
    }
  }
}

// Value-form bilinear resize of a CHW/BCHW map (half-pixel centers).
inline Tensor bilinear_resize_value(const Tensor& t, int oh, int ow) {
  bool batched = t.rank() == 4;
  int B = batched ? t.dim(0) : 1;
  int C = t.dim(batched ? 1 : 0), H = t.dim(batched ? 2 : 1), W = t.dim(batched ? 3 : 2);
  Shape os = batched ? Shape{B, C, oh, ow} : Shape{C, oh, ow};
  Tensor out = Tensor::zeros(os);
  auto ty = linear_taps(H, oh);
  auto tx = linear_taps(W, ow);
  for (int bc = 0; bc < B * C; ++bc) {
    const float* xp = t.data.data() + static_cast<std::int64_t>(bc) * H * W;
    float* yp = out.data.data() + static_cast<std::int64_t>(bc) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const LinTap& a = ty[static_cast<size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        const LinTap& b2 = tx[static_cast<size_t>(ox)];
        yp[oy * ow + ox] =
            a.w0 * (b2.w0 * xp[a.i0 * W + b2.i0] + b2.w1 * xp[a.i0 * W + b2.i1]) +
            a.w1 * (b2.w0 * xp[a.i1 * W + b2.i0] + b2.w1 * xp[a.i1 * W + b2.i1]);
      }
    }
  }
  return out;
}

inline float dot_rows(const float* a, const float* b, int c) {
  // four scalar accumulators; fixed reassociation keeps results reproducible
  float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
  int i = 0;
  for (; i + 4 <= c; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < c; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Sum of squared differences between the Gram matrices of pt (NxCt) and
// ps (NxCs), never materializing them. Cache-blocked over j; per-multiply
// cost is size-independent so the scaling benchmark sees a clean N^2 law.
// Adds its multiply count to the instrumented counter.
inline double fa_gram_sqdiff(const float* pt, int ct, const float* ps, int cs, int n) {
  constexpr int kJB = 512;
  double acc = 0.0;
  for (int j0 = 0; j0 < n; j0 += kJB) {
    int j1 = std::min(j0 + kJB, n);
    for (int i = 0; i < n; ++i) {
      const float* ti = pt + static_cast<std::int64_t>(i) * ct;
      const float* si = ps + static_cast<std::int64_t>(i) * cs;
      double row = 0.0;
      for (int j = j0; j < j1; ++j) {
        float d = dot_rows(ti, pt + static_cast<std::int64_t>(j) * ct, ct) -
                  dot_rows(si, ps + static_cast<std::int64_t>(j) * cs, cs);
        row += static_cast<double>(d) * d;
      }
      acc += row;
    }
  }
  flops::add(flops::fa_loss_multiplies(n, ct, cs));
  return acc;
}

}  // namespace detail

// Channel-dimension normalization of every spatial position's pixel vector.
inline FeatureMap normalize_pixels(const FeatureMap& f) {
  FeatureMap out;
  out.values = Tensor::zeros(f.values.shape);
  int B = f.batch(), C = f.channels(), N = f.pixels();
  for (int b = 0; b < B; ++b) {
    const float* src = f.image(b);
    float* dst = out.values.data.data() + static_cast<std::int64_t>(b) * C * N;
    for (int p = 0; p < N; ++p) {
      double nrm = 0.0;
      for (int c = 0; c < C; ++c) {
        float v = src[static_cast<std::int64_t>(c) * N + p];
        nrm += static_cast<double>(v) * v;
      }
      float inv = 1.0f / std::max(static_cast<float>(std::sqrt(nrm)), kPixelNormFloor);
      for (int c = 0; c < C; ++c)
        dst[static_cast<std::int64_t>(c) * N + p] = src[static_cast<std::int64_t>(c) * N + p] * inv;
    }
  }
  return out;
}

// Pixel matrix view (N x C, rows are channel vectors of spatial positions,
// flattened row-major over H then W) of image b.
inline Tensor pixel_matrix(const FeatureMap& f, int b = 0) {
  std::vector<float> buf;
  detail::pixel_matrix_into(f, b, 0.0f, buf);
  return Tensor({f.pixels(), f.channels()}, std::move(buf));
}

// HW x HW matrix of pairwise cosines between pixel vectors.
struct AffinityMatrix {
  int n = 0;
  Tensor values;
};

inline AffinityMatrix affinity_matrix(const FeatureMap& f, int b = 0) {
  int N = f.pixels(), C = f.channels();
  std::vector<float> p;
  detail::pixel_matrix_into(f, b, kPixelNormFloor, p);
  AffinityMatrix s;
  s.n = N;
  s.values = Tensor::zeros({N, N});
  faqd::detail::gemm(p.data(), p.data(), s.values.data.data(), N, C, N, /*transb=*/true);
  return s;
}

// Feature affinity loss (1/(WH)^2) * ||S^T - S^S||_F^2, averaged over the
// batch. Student maps with a different spatial size are bilinearly resized to
// the teacher's H,W first; channel counts may differ.
inline double fa_loss(const FeatureMap& fs, const FeatureMap& ft) {
  if (fs.batch() != ft.batch())
    throw ShapeError("fa_loss: batch sizes disagree, " + std::to_string(fs.batch()) + " vs " +
                     std::to_string(ft.batch()));
  FeatureMap resized;
  const FeatureMap* s = &fs;
  if (fs.height() != ft.height() || fs.width() != ft.width()) {
    resized = FeatureMap(detail::bilinear_resize_value(fs.values, ft.height(), ft.width()));
    s = &resized;
  }
  int N = ft.pixels();
  double scale = 1.0 / (static_cast<double>(N) * N);
  double acc = 0.0;
  std::vector<float> pt, ps;
  for (int b = 0; b < ft.batch(); ++b) {
    detail::pixel_matrix_into(ft, b, kPixelNormFloor, pt);
    detail::pixel_matrix_into(*s, b, kPixelNormFloor, ps);
    acc += scale * detail::fa_gram_sqdiff(pt.data(), ft.channels(), ps.data(), s->channels(), N);
  }
  return acc / ft.batch();
}

// KL(P||Q) with P = softmax(p_logits), Q = softmax(q_logits), mean over rows.
inline double kl_loss(const Tensor& p_logits, const Tensor& q_logits) {
  if (p_logits.shape != q_logits.shape)
    throw ShapeError("kl_loss: logit shapes disagree");
  int B = p_logits.rank() == 2 ? p_logits.dim(0) : 1;
  int K = p_logits.rank() == 2 ? p_logits.dim(1) : p_logits.dim(0);
  auto logsoftmax = [K](const float* xr, std::vector<double>& lp) {
    double mx = xr[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xr[k]));
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(xr[k] - mx);
    double logz = std::log(s) + mx;
    for (int k = 0; k < K; ++k) lp[static_cast<size_t>(k)] = xr[k] - logz;
  };
  std::vector<double> lp(static_cast<size_t>(K)), lq(static_cast<size_t>(K));
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    logsoftmax(p_logits.data.data() + static_cast<std::int64_t>(b) * K, lp);
    logsoftmax(q_logits.data.data() + static_cast<std::int64_t>(b) * K, lq);
    for (int k = 0; k < K; ++k)
      total += std::exp(lp[static_cast<size_t>(k)]) *
               (lp[static_cast<size_t>(k)] - lq[static_cast<size_t>(k)]);
  }
  return total / B;
}

inline double mse_logit_loss(const Tensor& t_logits, const Tensor& s_logits) {
  if (t_logits.shape != s_logits.shape)
    throw InputError("mse_logit_loss: shapes disagree, " + shape_str(t_logits.shape) + " vs " +
                     shape_str(s_logits.shape));
  double acc = 0.0;
  for (size_t i = 0; i < t_logits.data.size(); ++i) {
    double d = static_cast<double>(t_logits.data[i]) - s_logits.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(t_logits.data.size());
}

inline double nll_loss(const Tensor& s_logits, const std::vector<int>& labels) {
  int B = s_logits.rank() == 2 ? s_logits.dim(0) : 1;
  int K = s_logits.rank() == 2 ? s_logits.dim(1) : s_logits.dim(0);
  if (static_cast<int>(labels.size()) != B)
    throw InputError("nll_loss: expected " + std::to_string(B) + " labels");
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= K)
      throw InputError("nll_loss: label " + std::to_string(labels[static_cast<size_t>(b)]) +
                       " out of range [0," + std::to_string(K) + ")");
    const float* xr = s_logits.data.data() + static_cast<std::int64_t>(b) * K;
    double mx = xr[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xr[k]));
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(xr[k] - mx);
    total += std::log(s) + mx - xr[labels[static_cast<size_t>(b)]];
  }
  return total / B;
}

enum class KdKind { MSE, KL };

inline const char* kd_kind_name(KdKind k) { return k == KdKind::MSE ? "mse" : "kl"; }

// Weights of the composite objective alpha*KD + beta*FA + gamma*GT.
struct LossConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.5;
  KdKind kd_kind = KdKind::MSE;
  bool label_free = false;
  int tap_count = 3;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0)
      throw ConfigError("LossConfig: weights must be nonnegative");
    if (tap_count < 1) throw ConfigError("LossConfig: tap_count must be positive");
  }
};

struct LossTerms {
  double kd = 0.0, fa = 0.0, gt = 0.0, total = 0.0;
};

// Composite objective, value form. Breakdown terms are pre-weighting.
inline LossTerms faqd_loss(const Tensor& t_logits, const Tensor& s_logits,
                           const std::vector<FeatureMap>& taps_t,
                           const std::vector<FeatureMap>& taps_s, const std::vector<int>* labels,
                           const LossConfig& cfg) {
  cfg.validate();
  if (taps_t.size() != taps_s.size())
    throw InputError("faqd_loss: tap count mismatch, " + std::to_string(taps_t.size()) + " vs " +
                     std::to_string(taps_s.size()));
  if (!cfg.label_free && labels == nullptr)
    throw InputError("faqd_loss: labels required unless label_free");
  LossTerms t;
  t.kd = cfg.kd_kind == KdKind::MSE ? mse_logit_loss(t_logits, s_logits)
                                    : kl_loss(t_logits, s_logits);
  for (size_t l = 0; l < taps_t.size(); ++l) t.fa += fa_loss(taps_s[l], taps_t[l]);
  if (!cfg.label_free) t.gt = nll_loss(s_logits, *labels);
  t.total = cfg.alpha * t.kd + cfg.beta * t.fa + (cfg.label_free ? 0.0 : cfg.gamma * t.gt);
  return t;
}

// ---- graph forms -----------------------------------------------------------

namespace detail {

// Fused FA loss graph primitive on raw (unnormalized) BxCxHxW taps with equal
// spatial size. Normalization happens inside; gradient flows to the student
// (second) input only. Backward recomputes the Gram difference blockwise.
inline CustomOpId fa_loss_op_id() {
  static CustomOpId id = custom_grad(
      "fa_loss",
      [](const std::vector<const Tensor*>& in) {
        if (in.size() != 2) throw ConfigError("fa_loss: expected inputs (teacher, student)");
        FeatureMap ft(*in[0]), fs(*in[1]);
        if (ft.batch() != fs.batch() || ft.height() != fs.height() || ft.width() != fs.width())
          throw ShapeError("fa_loss: tap shapes disagree, " + shape_str(in[0]->shape) + " vs " +
                           shape_str(in[1]->shape));
        int N = ft.pixels();
        int B = ft.batch();
        double scale = 1.0 / (static_cast<double>(N) * N);
        double acc = 0.0;
        thread_local std::vector<float> pt, ps, gt, gs;
        gt.resize(static_cast<size_t>(N) * N);
        gs.resize(static_cast<size_t>(N) * N);
        for (int b = 0; b < B; ++b) {
          pixel_matrix_into(ft, b, kPixelNormFloor, pt);
          pixel_matrix_into(fs, b, kPixelNormFloor, ps);
          gemm(pt.data(), pt.data(), gt.data(), N, ft.channels(), N, true);
          gemm(ps.data(), ps.data(), gs.data(), N, fs.channels(), N, true);
          double img = 0.0;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * N; ++i) {
            double d = static_cast<double>(gt[static_cast<size_t>(i)]) -
                       gs[static_cast<size_t>(i)];
            img += d * d;
          }
          acc += scale * img;
        }
        return Tensor::scalar(static_cast<float>(acc / B));
      },
      [](const std::vector<const Tensor*>& in, const Tensor&, const Tensor& up) {
        FeatureMap ft(*in[0]), fs(*in[1]);
        int N = ft.pixels(), B = ft.batch(), Cs = fs.channels();
        Tensor dfs = Tensor::zeros(in[1]->shape);
        double scale = 1.0 / (static_cast<double>(N) * N);
        float coef = static_cast<float>(-4.0 * scale / B * up.data[0]);
        thread_local std::vector<float> pt, ps, d, gs, dps;
        d.resize(static_cast<size_t>(N) * N);
        gs.resize(static_cast<size_t>(N) * N);
        dps.resize(static_cast<size_t>(N) * Cs);
        for (int b = 0; b < B; ++b) {
          pixel_matrix_into(ft, b, kPixelNormFloor, pt);
          pixel_matrix_into(fs, b, kPixelNormFloor, ps);
          // D = Gt - Gs
          gemm(pt.data(), pt.data(), d.data(), N, ft.channels(), N, true);
          gemm(ps.data(), ps.data(), gs.data(), N, Cs, N, true);
          for (size_t i = 0; i < d.size(); ++i) d[i] -= gs[i];
          // dPs = coef * D * Ps, then chain through row normalization
          gemm(d.data(), ps.data(), dps.data(), N, N, Cs, false);
          const float* raw = fs.image(b);
          float* out = dfs.data.data() + static_cast<std::int64_t>(b) * Cs * N;
          for (int p = 0; p < N; ++p) {
            const float* gp = dps.data() + static_cast<std::int64_t>(p) * Cs;
            const float* prow = ps.data() + static_cast<std::int64_t>(p) * Cs;
            double nrm = 0.0;
            for (int c = 0; c < Cs; ++c) {
              float v = raw[static_cast<std::int64_t>(c) * N + p];
              nrm += static_cast<double>(v) * v;
            }
            float vn = static_cast<float>(std::sqrt(nrm));
            if (vn >= kPixelNormFloor) {
              double dot = 0.0;
              for (int c = 0; c < Cs; ++c) dot += static_cast<double>(gp[c]) * prow[c];
              for (int c = 0; c < Cs; ++c)
                out[static_cast<std::int64_t>(c) * N + p] +=
                    coef * (gp[c] - static_cast<float>(dot) * prow[c]) / vn;
            } else {
              for (int c = 0; c < Cs; ++c)
                out[static_cast<std::int64_t>(c) * N + p] += coef * gp[c] / kPixelNormFloor;
            }
          }
        }
        std::vector<Tensor> gs_out(2);
        gs_out[1] = std::move(dfs);
        return gs_out;
      });
  return id;
}

}  // namespace detail

// FA loss between tap nodes (teacher, student), resizing the student map to
// the teacher's spatial size when they differ.
inline NodeId fa_loss_node(Graph& g, NodeId tap_t, NodeId tap_s) {
  const Tensor& vt = g.value(tap_t);
  const Tensor& vs = g.value(tap_s);
  if (vt.rank() != 4 || vs.rank() != 4)
    throw ShapeError("fa_loss_node: taps must be BxCxHxW");
  NodeId s = tap_s;
  if (vt.dim(2) != vs.dim(2) || vt.dim(3) != vs.dim(3))
    s = g.bilinear_resize(tap_s, vt.dim(2), vt.dim(3));
  return g.apply(detail::fa_loss_op_id(), {tap_t, s});
}

struct FaqdNodes {
  NodeId total = -1;
  NodeId kd = -1;
  NodeId fa = -1;  // -1 when there are no taps
  NodeId gt = -1;  // -1 when label-free
};

using FaTermBuilder = std::function<NodeId(Graph&, NodeId, NodeId)>;

// Composite objective, graph form. fa_term defaults to the exact FA loss;
// the trainer swaps in the sketched estimator when configured.
inline FaqdNodes faqd_loss_nodes(Graph& g, NodeId t_logits, NodeId s_logits,
                                 const std::vector<NodeId>& taps_t,
                                 const std::vector<NodeId>& taps_s, NodeId labels,
                                 const LossConfig& cfg, FaTermBuilder fa_term = {}) {
  cfg.validate();
  if (taps_t.size() != taps_s.size()) throw InputError("faqd_loss: tap count mismatch");
  if (!cfg.label_free && labels < 0)
    throw InputError("faqd_loss: labels required unless label_free");
  if (!fa_term) fa_term = [](Graph& gg, NodeId t, NodeId s) { return fa_loss_node(gg, t, s); };
  FaqdNodes out;
  out.kd = cfg.kd_kind == KdKind::MSE ? g.mse(t_logits, s_logits) : g.kl(t_logits, s_logits);
  for (size_t l = 0; l < taps_t.size(); ++l) {
    NodeId term = fa_term(g, taps_t[l], taps_s[l]);
    out.fa = out.fa < 0 ? term : g.add(out.fa, term);
  }
  NodeId total = g.scale(out.kd, static_cast<float>(cfg.alpha));
  if (out.fa >= 0) total = g.add(total, g.scale(out.fa, static_cast<float>(cfg.beta)));
  if (!cfg.label_free) {
    out.gt = g.nll(s_logits, labels);
    total = g.add(total, g.scale(out.gt, static_cast<float>(cfg.gamma)));
  }
  out.total = total;
  return out;
}

}  // namespace faqd
