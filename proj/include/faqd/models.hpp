#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "faqd/losses.hpp"
#include "faqd/quantize.hpp"

namespace faqd {

// Small CIFAR-style ResNet family: depth = 6n+2, three groups of basic blocks
// with strides 1,2,2. "resnet-tiny-8" has one block per group, "resnet-tiny-20"
// has three.
struct NetSpec {
  std::string name = "resnet-tiny-8";
  int depth = 8;
  std::vector<int> group_channels = {16, 32, 64};
  int classes = 10;
  int weight_bits = 32;
  int act_bits = 32;

  int tap_count() const { return static_cast<int>(group_channels.size()); }
  int blocks_per_group() const { return (depth - 2) / 6; }

  void validate() const {
    if (depth != 8 && depth != 20)
      throw ConfigError("NetSpec: unsupported depth " + std::to_string(depth) +
                        " (supported: 8, 20)");
    if (group_channels.empty()) throw ConfigError("NetSpec: group_channels empty");
    if (classes < 2) throw ConfigError("NetSpec: classes must be >= 2");
    QuantScheme{weight_bits}.validate();
    QReLUParams{1.0f, act_bits}.validate();
  }

  static NetSpec by_name(const std::string& name) {
    NetSpec s;
    s.name = name;
    if (name == "resnet-tiny-8")
      s.depth = 8;
    else if (name == "resnet-tiny-20")
      s.depth = 20;
    else
      throw ConfigError("NetSpec: unknown network '" + name + "'");
    return s;
  }
};

struct Network {
  NetSpec spec;
  // Float-trained tensors: BN gamma/beta, fc weight/bias, qrelu alphas, and
  // conv weights when weight_bits == 32.
  std::map<std::string, Tensor> params;
  // Per-conv quantization state when weight_bits < 32 (shadow w, forward u).
  std::map<std::string, QuantizedLayerState> quant;
  std::map<std::string, std::shared_ptr<BNRunning>> bn;
  // Activation sites, in forward order (names of ".alpha" params when
  // act_bits < 32).
  std::vector<std::string> act_sites;

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [k, t] : params) n += t.size();
    for (const auto& [k, q] : quant) n += q.w.size();
    return n;
  }

  bool conv_quantized() const { return spec.weight_bits < 32; }

  const Tensor& conv_weight(const std::string& name) const {
    if (conv_quantized()) return quant.at(name).u;
    return params.at(name);
  }

  void refresh_quant_qat() {
    for (auto& [k, q] : quant) q.refresh_qat();
  }
  void refresh_quant_relax() {
    for (auto& [k, q] : quant) q.refresh_relax();
  }
  void commit_bn(float momentum = 0.9f) {
    for (auto& [k, r] : bn) r->commit(momentum);
  }
};

namespace detail {

struct ConvDef {
  std::string name;
  int in_c, out_c, k, stride, pad;
};

// Walks the architecture in forward order, invoking callbacks so that
// construction, graph building and parameter counting all share one layout.
template <typename ConvCb, typename BnCb, typename ActCb, typename FcCb>
inline void walk_resnet(const NetSpec& spec, int in_channels, ConvCb conv, BnCb bnorm, ActCb act,
                        FcCb fc) {
  conv(ConvDef{"stem.conv.w", in_channels, spec.group_channels[0], 3, 1, 1});
  bnorm("stem.bn", spec.group_channels[0]);
  act("stem.act");
  int prev = spec.group_channels[0];
  for (size_t gi = 0; gi < spec.group_channels.size(); ++gi) {
    int ch = spec.group_channels[gi];
    int stride = gi == 0 ? 1 : 2;
    for (int b = 0; b < spec.blocks_per_group(); ++b) {
      std::string base = "g" + std::to_string(gi + 1) + ".b" + std::to_string(b) + ".";
      int s = b == 0 ? stride : 1;
      int ic = b == 0 ? prev : ch;
      if (b == 0 && (s != 1 || ic != ch)) {  // option-B projection shortcut
        conv(ConvDef{base + "proj.w", ic, ch, 1, s, 0});
        bnorm(base + "proj.bn", ch);
      }
      conv(ConvDef{base + "conv1.w", ic, ch, 3, s, 1});
      bnorm(base + "bn1", ch);
      act(base + "act1");
      conv(ConvDef{base + "conv2.w", ch, ch, 3, 1, 1});
      bnorm(base + "bn2", ch);
      act(base + "act2");
    }
    prev = ch;
  }
  fc("fc", prev, spec.classes);
}

}  // namespace detail

// Deterministic He-normal initialization; all conv layers acquire quantization
// state when weight_bits < 32 (the final fc and BN parameters stay float).
inline Network build_network(const NetSpec& spec, std::uint64_t seed, int in_channels = 3) {
  spec.validate();
  Network net;
  net.spec = spec;
  Rng rng(seed);
  auto he_conv = [&](const detail::ConvDef& d) {
    float stddev = std::sqrt(2.0f / static_cast<float>(d.in_c * d.k * d.k));
    Tensor w = Tensor::randn({d.out_c, d.in_c, d.k, d.k}, rng, stddev);
    if (spec.weight_bits < 32) {
      QuantizedLayerState q;
      q.w = std::move(w);
      q.scheme.bits = spec.weight_bits;
      q.lambda = 0.0;
      q.refresh_qat();
      net.quant[d.name] = std::move(q);
    } else {
      net.params[d.name] = std::move(w);
    }
  };
  auto bn = [&](const std::string& name, int ch) {
    net.params[name + ".gamma"] = Tensor::full({ch}, 1.0f);
    net.params[name + ".beta"] = Tensor::zeros({ch});
    net.bn[name] = std::make_shared<BNRunning>(ch);
  };
  auto act = [&](const std::string& name) {
    if (spec.act_bits < 32) {
      net.params[name + ".alpha"] = Tensor::scalar(1.0f);
      net.act_sites.push_back(name);
    }
  };
  auto fc = [&](const std::string& name, int in, int out) {
    float stddev = std::sqrt(2.0f / static_cast<float>(in));
    net.params[name + ".w"] = Tensor::randn({out, in}, rng, stddev);
    net.params[name + ".b"] = Tensor::zeros({out});
  };
  detail::walk_resnet(spec, in_channels, he_conv, bn, act, fc);
  return net;
}

// Graph handles for one network added into a (possibly shared) graph.
struct NetNodes {
  NodeId x = -1;
  NodeId logits = -1;
  std::vector<NodeId> taps;
  std::map<std::string, NodeId> leaves;  // param name -> leaf (u for quantized convs)
  std::vector<std::pair<std::string, NodeId>> act_preacts;  // site -> pre-activation node
};

// Records the full forward pass of `net` into `g` for a fixed batch shape.
// Leaves are bound to the network's current parameters; rebind them (see
// sync_net_leaves) after parameter updates. trainable controls requires_grad
// on the parameter leaves. float_acts forces plain ReLU at every activation
// site (used for warm-up calibration of the quantized-ReLU resolutions).
inline NetNodes add_network(Graph& g, const Network& net, int batch, int in_c, int in_h,
                            int in_w, bool training, bool trainable,
                            const std::string& prefix = "", bool float_acts = false) {
  net.spec.validate();
  NetNodes nn;
  Tensor x0 = Tensor::zeros({batch, in_c, in_h, in_w});
  nn.x = g.input(prefix + "x", std::move(x0));

  auto param_leaf = [&](const std::string& name, const Tensor& t) {
    Tensor v(t.shape, t.data);
    v.requires_grad = trainable;
    NodeId id = g.input(prefix + name, std::move(v));
    nn.leaves[name] = id;
    return id;
  };

  NodeId cur = nn.x;
  NodeId block_in = -1;
  std::string pending_proj_w, pending_proj_bn;
  int pending_proj_stride = 1;

  auto conv_cb = [&](const detail::ConvDef& d) {
    if (d.name.size() > 6 && d.name.substr(d.name.size() - 6) == "proj.w") {
      pending_proj_w = d.name;
      pending_proj_stride = d.stride;
      return;  // shortcut conv is applied at the block join
    }
    bool starts_block = d.name.find("conv1") != std::string::npos;
    if (starts_block) block_in = cur;
    NodeId w = param_leaf(d.name, net.conv_weight(d.name));
    cur = g.conv2d(cur, w, d.stride, d.pad);
  };
  auto bn_cb = [&](const std::string& name, int ch) {
    (void)ch;
    if (name.size() > 7 && name.substr(name.size() - 7) == "proj.bn") {
      pending_proj_bn = name;
      return;
    }
    NodeId ga = param_leaf(name + ".gamma", net.params.at(name + ".gamma"));
    NodeId be = param_leaf(name + ".beta", net.params.at(name + ".beta"));
    cur = g.batch_norm(cur, ga, be, net.bn.at(name), training);
    bool block_end = name.find("bn2") != std::string::npos;
    if (block_end) {
      NodeId shortcut = block_in;
      if (!pending_proj_w.empty()) {
        NodeId pw = param_leaf(pending_proj_w, net.conv_weight(pending_proj_w));
        shortcut = g.conv2d(block_in, pw, pending_proj_stride, 0);
        NodeId pga = param_leaf(pending_proj_bn + ".gamma",
                                net.params.at(pending_proj_bn + ".gamma"));
        NodeId pbe =
            param_leaf(pending_proj_bn + ".beta", net.params.at(pending_proj_bn + ".beta"));
        shortcut = g.batch_norm(shortcut, pga, pbe, net.bn.at(pending_proj_bn), training);
        pending_proj_w.clear();
        pending_proj_bn.clear();
      }
      cur = g.add(cur, shortcut);
    }
  };
  auto act_cb = [&](const std::string& name) {
    nn.act_preacts.emplace_back(name, cur);
    if (net.spec.act_bits < 32 && !float_acts) {
      NodeId al = param_leaf(name + ".alpha", net.params.at(name + ".alpha"));
      cur = qrelu_node(g, cur, al, net.spec.act_bits);
    } else {
      cur = g.relu(cur);
    }
    // taps come after the final activation of each group
    bool group_end = false;
    if (name == "stem.act") {
      group_end = false;
    } else if (name.find(".act2") != std::string::npos) {
      int b = name[name.find(".b") + 2] - '0';
      group_end = b == net.spec.blocks_per_group() - 1;
    }
    if (group_end) nn.taps.push_back(cur);
  };
  auto fc_cb = [&](const std::string& name, int in, int out) {
    (void)in;
    (void)out;
    NodeId pooled = g.global_avg_pool(cur);
    NodeId w = param_leaf(name + ".w", net.params.at(name + ".w"));
    NodeId b = param_leaf(name + ".b", net.params.at(name + ".b"));
    nn.logits = g.bias_add(g.matmul(pooled, w, /*transpose_b=*/true), b);
  };

  detail::walk_resnet(net.spec, in_c, conv_cb, bn_cb, act_cb, fc_cb);
  if (static_cast<int>(nn.taps.size()) != net.spec.tap_count())
    throw StateError("add_network: tap wiring produced " + std::to_string(nn.taps.size()) +
                     " taps, expected " + std::to_string(net.spec.tap_count()));
  return nn;
}

// Rebind every parameter leaf to the network's current values (after an
// optimizer step or a quantization refresh).
inline void sync_net_leaves(Graph& g, const NetNodes& nn, const Network& net) {
  for (const auto& [name, id] : nn.leaves) {
    if (net.quant.count(name))
      g.bind(id, net.quant.at(name).u);
    else
      g.bind(id, net.params.at(name));
  }
}

// One-off inference pass. x: BxCxHxW (or CxHxW, treated as batch 1).
struct ForwardResult {
  Tensor logits;
  std::vector<FeatureMap> taps;
};

inline ForwardResult forward_with_taps(const Network& net, const Tensor& x) {
  Tensor in = x;
  if (in.rank() == 3) in.shape = {1, x.dim(0), x.dim(1), x.dim(2)};
  if (in.rank() != 4) throw InputError("forward_with_taps: input must be BxCxHxW or CxHxW");
  Graph g;
  NetNodes nn = add_network(g, net, in.dim(0), in.dim(1), in.dim(2), in.dim(3),
                            /*training=*/false, /*trainable=*/false);
  g.bind(nn.x, in);
  g.forward();
  ForwardResult r;
  r.logits = g.value(nn.logits);
  r.taps.reserve(nn.taps.size());
  for (NodeId t : nn.taps) r.taps.emplace_back(g.value(t));
  return r;
}

// ---- checkpoint io -----------------------------------------------------------
//
// Binary little-endian format:
//   "FAQD" | u32 version=1
//   spec: str name | i32 depth | i32 classes | i32 weight_bits | i32 act_bits
//         | u32 ngroups | i32 x ngroups
//   u32 nquant   | per entry: str name | f64 lambda | f64 eta | i32 bits | tensor w
//   u32 nparams  | per entry: str name | tensor
//   u32 nbn      | per entry: str name | u32 c | f32 x c mean | f32 x c var
//   tensor: u8 rank | i32 dims... | f32 data (row-major)
//   str:    u16 len | bytes

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void put_bytes(std::FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw FormatError("checkpoint: write failed");
}
template <typename T>
inline void put(std::FILE* f, T v) {
  put_bytes(f, &v, sizeof(T));
}
inline void put_str(std::FILE* f, const std::string& s) {
  if (s.size() > 0xffff) throw FormatError("checkpoint: string too long");
  put<std::uint16_t>(f, static_cast<std::uint16_t>(s.size()));
  put_bytes(f, s.data(), s.size());
}
inline void put_tensor(std::FILE* f, const Tensor& t) {
  put<std::uint8_t>(f, static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape) put<std::int32_t>(f, d);
  put_bytes(f, t.data.data(), t.data.size() * sizeof(float));
}

inline void get_bytes(std::FILE* f, void* p, size_t n, const std::string& what) {
  if (std::fread(p, 1, n, f) != n)
    throw FormatError("checkpoint: truncated while reading " + what);
}
template <typename T>
inline T get(std::FILE* f, const std::string& what) {
  T v;
  get_bytes(f, &v, sizeof(T), what);
  return v;
}
inline std::string get_str(std::FILE* f, const std::string& what) {
  auto n = get<std::uint16_t>(f, what);
  std::string s(n, '\0');
  get_bytes(f, s.data(), n, what);
  return s;
}
inline Tensor get_tensor(std::FILE* f, const std::string& what) {
  auto rank = get<std::uint8_t>(f, what);
  if (rank > 8) throw FormatError("checkpoint: implausible tensor rank in " + what);
  Shape s(rank);
  for (auto& d : s) {
    d = get<std::int32_t>(f, what);
    if (d <= 0) throw FormatError("checkpoint: bad dimension in " + what);
  }
  Tensor t = Tensor::zeros(s);
  get_bytes(f, t.data.data(), t.data.size() * sizeof(float), what + " data");
  return t;
}

}  // namespace detail

inline void save_checkpoint(const Network& net, const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  using namespace detail;
  put_bytes(f.get(), "FAQD", 4);
  put<std::uint32_t>(f.get(), 1);
  put_str(f.get(), net.spec.name);
  put<std::int32_t>(f.get(), net.spec.depth);
  put<std::int32_t>(f.get(), net.spec.classes);
  put<std::int32_t>(f.get(), net.spec.weight_bits);
  put<std::int32_t>(f.get(), net.spec.act_bits);
  put<std::uint32_t>(f.get(), static_cast<std::uint32_t>(net.spec.group_channels.size()));
  for (int c : net.spec.group_channels) put<std::int32_t>(f.get(), c);
  put<std::uint32_t>(f.get(), static_cast<std::uint32_t>(net.quant.size()));
  for (const auto& [name, q] : net.quant) {
    put_str(f.get(), name);
    put<double>(f.get(), q.lambda);
    put<double>(f.get(), q.eta);
    put<std::int32_t>(f.get(), q.scheme.bits);
    put_tensor(f.get(), q.w);
  }
  put<std::uint32_t>(f.get(), static_cast<std::uint32_t>(net.params.size()));
  for (const auto& [name, t] : net.params) {
    put_str(f.get(), name);
    put_tensor(f.get(), t);
  }
  put<std::uint32_t>(f.get(), static_cast<std::uint32_t>(net.bn.size()));
  for (const auto& [name, r] : net.bn) {
    put_str(f.get(), name);
    put<std::uint32_t>(f.get(), static_cast<std::uint32_t>(r->mean.size()));
    put_bytes(f.get(), r->mean.data(), r->mean.size() * sizeof(float));
    put_bytes(f.get(), r->var.data(), r->var.size() * sizeof(float));
  }
}

inline Network load_checkpoint(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  using namespace detail;
  char magic[4];
  get_bytes(f.get(), magic, 4, "magic");
  if (std::string(magic, 4) != "FAQD")
    throw FormatError("checkpoint: bad magic in '" + path + "'");
  auto version = get<std::uint32_t>(f.get(), "version");
  if (version != 1)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  NetSpec spec;
  spec.name = get_str(f.get(), "spec name");
  spec.depth = get<std::int32_t>(f.get(), "spec depth");
  spec.classes = get<std::int32_t>(f.get(), "spec classes");
  spec.weight_bits = get<std::int32_t>(f.get(), "spec weight_bits");
  spec.act_bits = get<std::int32_t>(f.get(), "spec act_bits");
  auto ng = get<std::uint32_t>(f.get(), "spec groups");
  if (ng == 0 || ng > 16) throw FormatError("checkpoint: implausible group count");
  spec.group_channels.resize(ng);
  for (auto& c : spec.group_channels) c = get<std::int32_t>(f.get(), "group channels");
  spec.validate();

  // Rebuild the skeleton to recover the activation-site list and expected
  // shapes, then overwrite every tensor from the file.
  Network net = build_network(spec, 0);
  auto nq = get<std::uint32_t>(f.get(), "quant count");
  if (nq != net.quant.size())
    throw FormatError("checkpoint: quant entry count " + std::to_string(nq) +
                      " does not match architecture (" + std::to_string(net.quant.size()) + ")");
  for (std::uint32_t i = 0; i < nq; ++i) {
    std::string name = get_str(f.get(), "quant name");
    auto it = net.quant.find(name);
    if (it == net.quant.end())
      throw FormatError("checkpoint: unknown quant layer '" + name + "'");
    it->second.lambda = get<double>(f.get(), name + " lambda");
    it->second.eta = get<double>(f.get(), name + " eta");
    it->second.scheme.bits = get<std::int32_t>(f.get(), name + " bits");
    Tensor w = get_tensor(f.get(), "quant tensor '" + name + "'");
    if (w.shape != it->second.w.shape)
      throw FormatError("checkpoint: shape mismatch for '" + name + "': file " +
                        shape_str(w.shape) + " vs architecture " +
                        shape_str(it->second.w.shape));
    it->second.w = std::move(w);
    if (it->second.lambda > 0.0)
      it->second.refresh_relax();
    else
      it->second.refresh_qat();
  }
  auto np = get<std::uint32_t>(f.get(), "param count");
  if (np != net.params.size())
    throw FormatError("checkpoint: param entry count does not match architecture");
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = get_str(f.get(), "param name");
    auto it = net.params.find(name);
    if (it == net.params.end()) throw FormatError("checkpoint: unknown param '" + name + "'");
    Tensor t = get_tensor(f.get(), "param tensor '" + name + "'");
    if (t.shape != it->second.shape)
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    it->second = std::move(t);
  }
  auto nb = get<std::uint32_t>(f.get(), "bn count");
  if (nb != net.bn.size())
    throw FormatError("checkpoint: bn entry count does not match architecture");
  for (std::uint32_t i = 0; i < nb; ++i) {
    std::string name = get_str(f.get(), "bn name");
    auto it = net.bn.find(name);
    if (it == net.bn.end()) throw FormatError("checkpoint: unknown bn layer '" + name + "'");
    auto c = get<std::uint32_t>(f.get(), name + " channels");
    if (c != it->second->mean.size())
      throw FormatError("checkpoint: bn channel mismatch for '" + name + "'");
    get_bytes(f.get(), it->second->mean.data(), c * sizeof(float), name + " mean");
    get_bytes(f.get(), it->second->var.data(), c * sizeof(float), name + " var");
  }
  return net;
}

}  // namespace faqd
