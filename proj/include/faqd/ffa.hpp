#pragma once

#include <cmath>
#include <vector>

#include "faqd/flops.hpp"
#include "faqd/losses.hpp"
#include "faqd/rng.hpp"

namespace faqd {

// Gaussian sketch Z in R^{N x k}, i.i.d. N(0,1), reproducible per seed.
struct SketchMatrix {
  int rows = 0;  // N = H*W
  int cols = 0;  // ensemble size k
  Tensor values;
  std::uint64_t seed = 0;

  float at(int r, int c) const {
    return values.data[static_cast<size_t>(r) * cols + static_cast<size_t>(c)];
  }
};

inline SketchMatrix sample_sketch(int n, int k, std::uint64_t seed) {
  if (n < 1 || k < 1) throw InputError("sample_sketch: N and k must be >= 1");
  SketchMatrix z;
  z.rows = n;
  z.cols = k;
  z.seed = seed;
  z.values = Tensor::zeros({n, k});
  Rng rng(seed);
  for (auto& v : z.values.data) v = rng.normal_f();
  return z;
}

namespace detail {

// y (len c) = P^T z ; out (len n) = P y. Adds 2nc multiplies to the counter.
inline void gram_action(const float* p, int n, int c, const float* z, float* y, float* out) {
  for (int j = 0; j < c; ++j) y[j] = 0.0f;
  for (int i = 0; i < n; ++i) {
    const float* row = p + static_cast<std::int64_t>(i) * c;
    float zi = z[i];
    for (int j = 0; j < c; ++j) y[j] += row[j] * zi;
  }
  for (int i = 0; i < n; ++i)
    out[i] = dot_rows(p + static_cast<std::int64_t>(i) * c, y, c);
  flops::add(2ull * static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(c));
}

inline double ffa_column(const float* pt, int ct, const float* ps, int cs, int n, const float* z,
                         std::vector<float>& scratch) {
  scratch.resize(static_cast<size_t>(2 * n + ct + cs));
  float* at = scratch.data();
  float* as = scratch.data() + n;
  float* yt = scratch.data() + 2 * n;
  float* ys = scratch.data() + 2 * n + ct;
  gram_action(pt, n, ct, z, yt, at);
  gram_action(ps, n, cs, z, ys, as);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = static_cast<double>(at[i]) - as[i];
    acc += d * d;
  }
  flops::add(static_cast<std::uint64_t>(n));
  return acc;
}

}  // namespace detail

// Single-sketch estimator (1/(WH)^2) ||(S1 - S2) z||^2, computed as two
// matrix-vector products per feature map without materializing either
// affinity matrix. Inputs are pixel-normalized N x C matrices.
inline double ffa_single(const Tensor& ft_norm, const Tensor& fs_norm,
                         const std::vector<float>& z) {
  if (ft_norm.rank() != 2 || fs_norm.rank() != 2)
    throw InputError("ffa_single: expected N x C matrices");
  int n = ft_norm.dim(0);
  if (fs_norm.dim(0) != n || static_cast<int>(z.size()) != n)
    throw InputError("ffa_single: row/sketch length mismatch (" + std::to_string(n) + ", " +
                     std::to_string(fs_norm.dim(0)) + ", " + std::to_string(z.size()) + ")");
  std::vector<float> scratch;
  double acc = detail::ffa_column(ft_norm.data.data(), ft_norm.dim(1), fs_norm.data.data(),
                                  fs_norm.dim(1), n, z.data(), scratch);
  return acc / (static_cast<double>(n) * n);
}

// k-ensemble FFA loss (1/k) sum_l ||(S1-S2) z_l||^2 / (WH)^2. Cost O(kNC).
inline double ffa_loss_k(const Tensor& ft_norm, const Tensor& fs_norm, const SketchMatrix& zk) {
  if (zk.cols < 1) throw InputError("ffa_loss_k: k must be >= 1");
  if (ft_norm.rank() != 2 || fs_norm.rank() != 2)
    throw InputError("ffa_loss_k: expected N x C matrices");
  int n = ft_norm.dim(0);
  if (fs_norm.dim(0) != n || zk.rows != n)
    throw InputError("ffa_loss_k: row/sketch length mismatch");
  std::vector<float> z(static_cast<size_t>(n)), scratch;
  double acc = 0.0;
  for (int l = 0; l < zk.cols; ++l) {
    for (int i = 0; i < n; ++i) z[static_cast<size_t>(i)] = zk.at(i, l);
    acc += detail::ffa_column(ft_norm.data.data(), ft_norm.dim(1), fs_norm.data.data(),
                              fs_norm.dim(1), n, z.data(), scratch);
  }
  return acc / (static_cast<double>(zk.cols) * n * n);
}

// Pairwise squared distances via the row-norm broadcast
// S = 1 (x) v - 2AA^T + v (x) 1.
inline Tensor pairwise_sqdist(const Tensor& a) {
  if (a.rank() != 2) throw InputError("pairwise_sqdist: expected n x c matrix");
  int n = a.dim(0), c = a.dim(1);
  std::vector<float> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const float* row = a.data.data() + static_cast<std::int64_t>(i) * c;
    for (int j = 0; j < c; ++j) s += static_cast<double>(row[j]) * row[j];
    v[static_cast<size_t>(i)] = static_cast<float>(s);
  }
  Tensor out = Tensor::zeros({n, n});
  detail::gemm(a.data.data(), a.data.data(), out.data.data(), n, c, n, /*transb=*/true);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      float& e = out.data[static_cast<size_t>(i) * n + static_cast<size_t>(j)];
      e = v[static_cast<size_t>(i)] - 2.0f * e + v[static_cast<size_t>(j)];
    }
  return out;
}

// Sketched mode: the row norms plus the action of AA^T on the sketch,
// A (A^T Z) in R^{n x k}, so consumers can approximate the 2AA^T term.
struct SketchedPairwise {
  std::vector<float> row_sqnorms;
  Tensor gram_action;  // n x k
};

inline SketchedPairwise pairwise_sqdist_sketched(const Tensor& a, const SketchMatrix& z) {
  if (a.rank() != 2) throw InputError("pairwise_sqdist: expected n x c matrix");
  int n = a.dim(0), c = a.dim(1);
  if (z.rows != n) throw InputError("pairwise_sqdist: sketch rows must equal matrix rows");
  SketchedPairwise out;
  out.row_sqnorms.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const float* row = a.data.data() + static_cast<std::int64_t>(i) * c;
    for (int j = 0; j < c; ++j) s += static_cast<double>(row[j]) * row[j];
    out.row_sqnorms[static_cast<size_t>(i)] = static_cast<float>(s);
  }
  out.gram_action = Tensor::zeros({n, z.cols});
  // A^T Z (c x k), then A * that
  std::vector<float> atz(static_cast<size_t>(c) * z.cols);
  detail::gemm_ta(a.data.data(), z.values.data.data(), atz.data(), c, n, z.cols);
  detail::gemm(a.data.data(), atz.data(), out.gram_action.data.data(), n, c, z.cols, false);
  return out;
}

// ---- graph form --------------------------------------------------------------

namespace detail {

// Fused FFA loss graph primitive on raw BxCxHxW taps plus an N x k sketch
// leaf. Normalizes inside; gradient flows to the student input only.
inline CustomOpId ffa_loss_op_id() {
  static CustomOpId id = custom_grad(
      "ffa_loss",
      [](const std::vector<const Tensor*>& in) {
        if (in.size() != 3) throw ConfigError("ffa_loss: expected inputs (teacher, student, Z)");
        FeatureMap ft(*in[0]), fs(*in[1]);
        const Tensor& z = *in[2];
        if (ft.batch() != fs.batch() || ft.height() != fs.height() || ft.width() != fs.width())
          throw ShapeError("ffa_loss: tap shapes disagree");
        int N = ft.pixels(), B = ft.batch();
        if (z.rank() != 2 || z.dim(0) != N)
          throw ShapeError("ffa_loss: sketch must be N x k with N = " + std::to_string(N));
        int k = z.dim(1);
        double acc = 0.0;
        thread_local std::vector<float> pt, ps, zc, scratch;
        zc.resize(static_cast<size_t>(N));
        for (int b = 0; b < B; ++b) {
          pixel_matrix_into(ft, b, kPixelNormFloor, pt);
          pixel_matrix_into(fs, b, kPixelNormFloor, ps);
          for (int l = 0; l < k; ++l) {
            for (int i = 0; i < N; ++i)
              zc[static_cast<size_t>(i)] = z.data[static_cast<size_t>(i) * k + l];
            acc += ffa_column(pt.data(), ft.channels(), ps.data(), fs.channels(), N, zc.data(),
                              scratch);
          }
        }
        acc /= static_cast<double>(k) * N * N * B;
        return Tensor::scalar(static_cast<float>(acc));
      },
      [](const std::vector<const Tensor*>& in, const Tensor&, const Tensor& up) {
        FeatureMap ft(*in[0]), fs(*in[1]);
        const Tensor& z = *in[2];
        int N = ft.pixels(), B = ft.batch(), Ct = ft.channels(), Cs = fs.channels();
        int k = z.dim(1);
        Tensor dfs = Tensor::zeros(in[1]->shape);
        float coef =
            static_cast<float>(-2.0 * up.data[0] / (static_cast<double>(k) * N * N * B));
        thread_local std::vector<float> pt, ps, zc, at, as, yt, ys, g, dps;
        zc.resize(static_cast<size_t>(N));
        at.resize(static_cast<size_t>(N));
        as.resize(static_cast<size_t>(N));
        yt.resize(static_cast<size_t>(Ct));
        ys.resize(static_cast<size_t>(Cs));
        g.resize(static_cast<size_t>(N));
        dps.assign(static_cast<size_t>(N) * Cs, 0.0f);
        for (int b = 0; b < B; ++b) {
          pixel_matrix_into(ft, b, kPixelNormFloor, pt);
          pixel_matrix_into(fs, b, kPixelNormFloor, ps);
          std::fill(dps.begin(), dps.end(), 0.0f);
          for (int l = 0; l < k; ++l) {
            for (int i = 0; i < N; ++i)
              zc[static_cast<size_t>(i)] = z.data[static_cast<size_t>(i) * k + l];
            gram_action(pt.data(), N, Ct, zc.data(), yt.data(), at.data());
            gram_action(ps.data(), N, Cs, zc.data(), ys.data(), as.data());
            // d = at - as;  dL/d(as) = -2 c0 d =: g ;  as = Ps (Ps^T zc)
            // dPs += g ys^T + zc (g^T Ps)
            for (int i = 0; i < N; ++i) g[static_cast<size_t>(i)] = coef * (at[i] - as[i]);
            std::vector<float> gtp(static_cast<size_t>(Cs), 0.0f);
            for (int i = 0; i < N; ++i) {
              const float* prow = ps.data() + static_cast<std::int64_t>(i) * Cs;
              float gi = g[static_cast<size_t>(i)];
              float* drow = dps.data() + static_cast<std::int64_t>(i) * Cs;
              for (int c = 0; c < Cs; ++c) {
                drow[c] += gi * ys[static_cast<size_t>(c)];
                gtp[static_cast<size_t>(c)] += gi * prow[c];
              }
            }
            for (int i = 0; i < N; ++i) {
              float zi = zc[static_cast<size_t>(i)];
              float* drow = dps.data() + static_cast<std::int64_t>(i) * Cs;
              for (int c = 0; c < Cs; ++c) drow[c] += zi * gtp[static_cast<size_t>(c)];
            }
          }
          // chain through row normalization into raw student values
          const float* raw = fs.image(b);
          float* outp = dfs.data.data() + static_cast<std::int64_t>(b) * Cs * N;
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
                outp[static_cast<std::int64_t>(c) * N + p] +=
                    (gp[c] - static_cast<float>(dot) * prow[c]) / vn;
            } else {
              for (int c = 0; c < Cs; ++c)
                outp[static_cast<std::int64_t>(c) * N + p] += gp[c] / kPixelNormFloor;
            }
          }
        }
        std::vector<Tensor> out(3);
        out[1] = std::move(dfs);
        return out;
      });
  return id;
}

}  // namespace detail

// Sketched FA term between tap nodes; z_leaf is an N x k sketch (bound fresh
// per batch by the trainer). Student maps are resized to the teacher size.
inline NodeId ffa_loss_node(Graph& g, NodeId tap_t, NodeId tap_s, NodeId z_leaf) {
  const Tensor& vt = g.value(tap_t);
  const Tensor& vs = g.value(tap_s);
  if (vt.rank() != 4 || vs.rank() != 4)
    throw ShapeError("ffa_loss_node: taps must be BxCxHxW");
  NodeId s = tap_s;
  if (vt.dim(2) != vs.dim(2) || vt.dim(3) != vs.dim(3))
    s = g.bilinear_resize(tap_s, vt.dim(2), vt.dim(3));
  return g.apply(detail::ffa_loss_op_id(), {tap_t, s, z_leaf});
}

}  // namespace faqd
