#pragma once

#include <cmath>
#include <cstdint>

#include "faqd/graph.hpp"
#include "faqd/tensor.hpp"

namespace faqd {

// Per-layer weight quantization scheme. bits=32 means identity.
struct QuantScheme {
  int bits = 32;

  void validate() const {
    if (bits != 1 && bits != 2 && bits != 4 && bits != 32)
      throw ConfigError("QuantScheme: bits must be one of {1,2,4,32}, got " +
                        std::to_string(bits));
  }
};

// 1-bit: scaled sign with alpha = mean(|w|) (the closed-form l2-optimal
// scaled-binary projection). b in {2,4}: symmetric uniform grid
// delta*clamp(round(w/delta), -(2^{b-1}-1), 2^{b-1}-1) with
// delta = max(|w|)/(2^{b-1}-1). Accumulation in double and a float-rounded
// step size keep the projection exactly idempotent.
inline Tensor quantize_weights(const Tensor& w, const QuantScheme& scheme) {
  scheme.validate();
  if (w.has_nan()) throw InputError("quantize_weights: NaN in weights");
  if (scheme.bits == 32) return Tensor(w.shape, w.data);

  Tensor out = Tensor::zeros(w.shape);
  if (scheme.bits == 1) {
    double s = 0.0;
    for (float v : w.data) s += std::fabs(static_cast<double>(v));
    float alpha = w.data.empty() ? 0.0f
                                 : static_cast<float>(s / static_cast<double>(w.data.size()));
    for (size_t i = 0; i < w.data.size(); ++i) out.data[i] = w.data[i] < 0.0f ? -alpha : alpha;
    return out;
  }
  int levels = (1 << (scheme.bits - 1)) - 1;  // 1 for 2-bit, 7 for 4-bit
  float mx = 0.0f;
  for (float v : w.data) mx = std::max(mx, std::fabs(v));
  float delta = mx > 0.0f ? static_cast<float>(static_cast<double>(mx) / levels) : 1.0f;
  for (size_t i = 0; i < w.data.size(); ++i) {
    float m = std::round(w.data[i] / delta);
    m = std::clamp(m, static_cast<float>(-levels), static_cast<float>(levels));
    out.data[i] = delta * m;
  }
  return out;
}

// Eq.-style relaxation blend u = (w + lambda*Quant(w)) / (1 + lambda).
inline Tensor binary_relax_blend(const Tensor& w, double lambda, const QuantScheme& scheme) {
  if (lambda < 0.0) throw InputError("binary_relax_blend: lambda must be nonnegative");
  Tensor q = quantize_weights(w, scheme);
  Tensor out = Tensor::zeros(w.shape);
  double t = lambda / (1.0 + lambda);
  for (size_t i = 0; i < w.data.size(); ++i) {
    double wi = w.data[i];
    out.data[i] = static_cast<float>(wi + t * (static_cast<double>(q.data[i]) - wi));
  }
  return out;
}

// Float shadow weights plus the quantized/relaxed weights used in forward.
struct QuantizedLayerState {
  Tensor w;        // shadow weights, updated by the optimizer
  Tensor u;        // forward weights: Quant(w) or the relaxation blend
  double lambda = 0.0;
  double eta = 1.02;
  QuantScheme scheme;

  void refresh_qat() { u = quantize_weights(w, scheme); }
  void refresh_relax() { u = binary_relax_blend(w, lambda, scheme); }
};

inline QuantizedLayerState relax_schedule_step(QuantizedLayerState state) {
  if (state.eta <= 1.0) throw ConfigError("relax_schedule_step: eta must be > 1");
  state.lambda *= state.eta;
  state.refresh_relax();
  return state;
}

// Learnable resolution for the quantized ReLU. act_bits=32 means plain ReLU.
struct QReLUParams {
  float alpha = 1.0f;
  int act_bits = 2;

  void validate() const {
    if (alpha <= 0.0f) throw ConfigError("QReLUParams: alpha must be positive");
    if (act_bits != 1 && act_bits != 2 && act_bits != 4 && act_bits != 32)
      throw ConfigError("QReLUParams: act_bits must be one of {1,2,4,32}");
  }
};

// Staircase activation: 0 for x<0, k*alpha on [(k-1)*alpha, k*alpha),
// saturating at (2^b-1)*alpha.
inline Tensor qrelu_forward(const Tensor& x, const QReLUParams& p) {
  p.validate();
  Tensor out = Tensor::zeros(x.shape);
  if (p.act_bits == 32) {
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = std::max(x.data[i], 0.0f);
    return out;
  }
  int kmax = (1 << p.act_bits) - 1;
  for (size_t i = 0; i < x.data.size(); ++i) {
    float v = x.data[i];
    if (v < 0.0f) {
      out.data[i] = 0.0f;
    } else {
      int k = static_cast<int>(std::floor(v / p.alpha)) + 1;
      if (k > kmax) k = kmax;
      out.data[i] = static_cast<float>(k) * p.alpha;
    }
  }
  return out;
}

// STE backward: dx passes upstream through on 0 < x < (2^b-1)*alpha (the
// clipped-ReLU derivative), and dalpha uses the three-valued proxy
// {0, 2^{b-1}, 2^b-1}.
struct QReLUGrad {
  Tensor dx;
  float dalpha = 0.0f;
};

inline QReLUGrad qrelu_backward_ste(const Tensor& x, const QReLUParams& p,
                                    const Tensor& upstream) {
  p.validate();
  if (x.shape != upstream.shape)
    throw ShapeError("qrelu_backward_ste: upstream shape " + shape_str(upstream.shape) +
                     " does not match input " + shape_str(x.shape));
  QReLUGrad g;
  g.dx = Tensor::zeros(x.shape);
  if (p.act_bits == 32) {
    for (size_t i = 0; i < x.data.size(); ++i)
      g.dx.data[i] = x.data[i] > 0.0f ? upstream.data[i] : 0.0f;
    return g;
  }
  float cap = static_cast<float>((1 << p.act_bits) - 1) * p.alpha;
  float mid = static_cast<float>(1 << (p.act_bits - 1));
  float high = static_cast<float>((1 << p.act_bits) - 1);
  double da = 0.0;
  for (size_t i = 0; i < x.data.size(); ++i) {
    float v = x.data[i];
    if (v <= 0.0f) continue;
    if (v < cap) {
      g.dx.data[i] = upstream.data[i];
      da += static_cast<double>(upstream.data[i]) * mid;
    } else {
      da += static_cast<double>(upstream.data[i]) * high;
    }
  }
  g.dalpha = static_cast<float>(da);
  return g;
}

// Graph primitive for the quantized ReLU, built on the custom-gradient hook:
// forward is the exact staircase, backward the STE pair above. Inputs are
// (x, alpha) where alpha is a 1-element tensor (learnable resolution).
inline CustomOpId qrelu_op_id(int act_bits) {
  static std::mutex mu;
  static std::map<int, CustomOpId> ids;
  std::lock_guard<std::mutex> lock(mu);
  auto it = ids.find(act_bits);
  if (it != ids.end()) return it->second;
  CustomOpId id = custom_grad(
      "qrelu" + std::to_string(act_bits),
      [act_bits](const std::vector<const Tensor*>& in) {
        if (in.size() != 2) throw ConfigError("qrelu: expected inputs (x, alpha)");
        QReLUParams p{in[1]->data.at(0), act_bits};
        return qrelu_forward(*in[0], p);
      },
      [act_bits](const std::vector<const Tensor*>& in, const Tensor&, const Tensor& up) {
        QReLUParams p{in[1]->data.at(0), act_bits};
        QReLUGrad g = qrelu_backward_ste(*in[0], p, up);
        std::vector<Tensor> out;
        out.push_back(std::move(g.dx));
        out.push_back(Tensor({1}, {g.dalpha}));
        return out;
      });
  ids[act_bits] = id;
  return id;
}

inline NodeId qrelu_node(Graph& g, NodeId x, NodeId alpha, int act_bits) {
  return g.apply(qrelu_op_id(act_bits), {x, alpha});
}

}  // namespace faqd
