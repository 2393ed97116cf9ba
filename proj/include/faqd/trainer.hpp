#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "faqd/data.hpp"
#include "faqd/ffa.hpp"
#include "faqd/models.hpp"

namespace faqd {

enum class TrainMode { EndToEnd, FineTune };
enum class QuantMode { QAT, BinaryRelax };
enum class OptimizerKind { SgdMomentum, Adam };
enum class FaRoute { Auto, Exact, FFA };

struct TrainConfig {
  TrainMode mode = TrainMode::EndToEnd;
  QuantMode quant_mode = QuantMode::QAT;
  LossConfig loss;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int epochs = 30;
  int batch_size = 64;
  std::uint64_t seed = 1;
  double lambda0 = 1.0;
  double eta = 1.02;  // relaxation growth per epoch
  FaRoute fa_route = FaRoute::Auto;
  int ffa_k = 10;

  void validate() const {
    loss.validate();
    if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
    if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: bad epochs/batch_size");
    if (quant_mode == QuantMode::BinaryRelax && eta <= 1.0)
      throw ConfigError("TrainConfig: eta must be > 1 in binary_relax mode");
    if (ffa_k < 1) throw ConfigError("TrainConfig: ffa_k must be >= 1");
  }
};

// End-to-end defaults to MSE + SGD, fine-tuning to KL + Adam. Explicit
// contrary settings are honored with a logged warning.
inline void resolve_mode_defaults(TrainConfig& cfg, bool kd_explicit, bool opt_explicit,
                                  bool lr_explicit = true,
                                  std::vector<std::string>* warnings = nullptr) {
  KdKind kd_def = cfg.mode == TrainMode::EndToEnd ? KdKind::MSE : KdKind::KL;
  OptimizerKind opt_def = cfg.mode == TrainMode::EndToEnd ? OptimizerKind::SgdMomentum
                                                          : OptimizerKind::Adam;
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
    std::cerr << "warning: " << msg << "\n";
  };
  if (!kd_explicit)
    cfg.loss.kd_kind = kd_def;
  else if (cfg.loss.kd_kind != kd_def)
    warn(std::string("kd_kind=") + kd_kind_name(cfg.loss.kd_kind) +
         " overrides the default for this mode");
  if (!opt_explicit)
    cfg.optimizer = opt_def;
  else if (cfg.optimizer != opt_def)
    warn("optimizer overrides the default for this mode");
  if (!lr_explicit) cfg.lr = cfg.optimizer == OptimizerKind::Adam ? 1e-3 : 0.1;
}

// Eq.-style QAT / BinaryRelax weight update on one layer: the shadow weights
// take the gradient that was computed at u, then u is re-projected.
inline QuantizedLayerState qat_update_step(QuantizedLayerState state, const Tensor& grad_at_u,
                                           double lr, QuantMode mode = QuantMode::QAT) {
  if (grad_at_u.shape != state.w.shape)
    throw ShapeError("qat_update_step: grad shape " + shape_str(grad_at_u.shape) +
                     " does not match weights " + shape_str(state.w.shape));
  for (size_t i = 0; i < state.w.data.size(); ++i)
    state.w.data[i] -= static_cast<float>(lr) * grad_at_u.data[i];
  if (mode == QuantMode::QAT)
    state.refresh_qat();
  else
    state.refresh_relax();
  return state;
}

namespace detail {

struct Optimizer {
  OptimizerKind kind = OptimizerKind::SgdMomentum;
  double momentum = 0.9, weight_decay = 5e-4;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;  // adam step counter, shared across params
  std::map<std::string, std::vector<float>> m1, m2;

  void begin_step() { ++t; }

  void step(const std::string& name, std::vector<float>& w, const std::vector<float>& g,
            double lr, bool decay) {
    auto& v1 = m1[name];
    if (v1.size() != w.size()) v1.assign(w.size(), 0.0f);
    if (kind == OptimizerKind::SgdMomentum) {
      for (size_t i = 0; i < w.size(); ++i) {
        float gi = g[i] + (decay ? static_cast<float>(weight_decay) * w[i] : 0.0f);
        v1[i] = static_cast<float>(momentum) * v1[i] + gi;
        w[i] -= static_cast<float>(lr) * v1[i];
      }
    } else {
      auto& v2 = m2[name];
      if (v2.size() != w.size()) v2.assign(w.size(), 0.0f);
      double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
      double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (size_t i = 0; i < w.size(); ++i) {
        float gi = g[i] + (decay ? static_cast<float>(weight_decay) * w[i] : 0.0f);
        v1[i] = static_cast<float>(b1) * v1[i] + static_cast<float>(1.0 - b1) * gi;
        v2[i] = static_cast<float>(b2) * v2[i] + static_cast<float>(1.0 - b2) * gi * gi;
        double mhat = v1[i] / bc1, vhat = v2[i] / bc2;
        w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

inline bool is_conv_weight(const std::string& name) {
  return name.find("conv") != std::string::npos ||
         (name.size() >= 6 && name.substr(name.size() - 6) == "proj.w");
}

inline double cosine_lr(double lr0, int epoch, int total) {
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * epoch / total));
}

// Applies leaf gradients to the network (shadow weights for quantized convs),
// then re-projects u. Iteration over the sorted leaf map is deterministic.
inline void apply_gradients(Network& net, Graph& g, const NetNodes& nn, Optimizer& opt,
                            double lr, QuantMode qmode) {
  opt.begin_step();
  for (const auto& [name, id] : nn.leaves) {
    const std::vector<float>& gr = g.grad(id);
    if (gr.empty()) continue;
    auto qit = net.quant.find(name);
    if (qit != net.quant.end()) {
      opt.step(name, qit->second.w.data, gr, lr, /*decay=*/true);
      if (qmode == QuantMode::QAT)
        qit->second.refresh_qat();
      else
        qit->second.refresh_relax();
    } else {
      auto pit = net.params.find(name);
      if (pit == net.params.end()) continue;
      bool decay = is_conv_weight(name);
      opt.step(name, pit->second.data, gr, lr, decay);
      if (name.size() >= 6 && name.substr(name.size() - 6) == ".alpha")
        pit->second.data[0] = std::max(pit->second.data[0], 1e-4f);  // keep resolution positive
    }
  }
}

}  // namespace detail

struct EpochRecord {
  int epoch = 0;
  double kd = 0, fa = 0, gt = 0, total = 0;  // epoch means; kd/fa/gt pre-weighting
  double lambda = 0;
  std::vector<float> alphas;
  double accuracy = -1.0;  // test accuracy, -1 when no eval set was given
  double seconds = 0;
};

struct Metrics {
  std::vector<std::string> alpha_names;
  std::vector<EpochRecord> epochs;
};

// Metrics CSV (deterministic body; wall-clock goes to the sidecar timing csv).
inline void write_metrics_csv(const Metrics& m, const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("metrics: cannot open '" + path + "'");
  std::fprintf(f, "epoch,kd,fa,gt,total,lambda,accuracy");
  for (const auto& a : m.alpha_names) std::fprintf(f, ",alpha_%s", a.c_str());
  std::fprintf(f, "\n");
  for (const auto& e : m.epochs) {
    std::fprintf(f, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", e.epoch, e.kd, e.fa, e.gt, e.total,
                 e.lambda, e.accuracy);
    for (float a : e.alphas) std::fprintf(f, ",%.9g", static_cast<double>(a));
    std::fprintf(f, "\n");
  }
  std::fclose(f);
}

inline void write_timing_csv(const Metrics& m, const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("metrics: cannot open '" + path + "'");
  std::fprintf(f, "epoch,seconds\n");
  for (const auto& e : m.epochs) std::fprintf(f, "%d,%.6f\n", e.epoch, e.seconds);
  std::fclose(f);
}

// Top-1 accuracy under inference mode; deterministic and batch-size invariant.
inline double evaluate(const Network& net, const DatasetHandle& data, int batch_size = 64) {
  if (data.n == 0) throw InputError("evaluate: empty dataset");
  if (!data.labeled()) throw InputError("evaluate: dataset has no labels");
  std::map<int, std::pair<std::unique_ptr<Graph>, NetNodes>> bundles;
  BatchStream bs = batches(data, batch_size, /*seed=*/0, /*epoch=*/0, /*drop_labels=*/false,
                           /*shuffle=*/false, /*apply_augment=*/false);
  Batch b;
  std::int64_t correct = 0;
  while (bs.next(b)) {
    int B = b.x.dim(0);
    auto it = bundles.find(B);
    if (it == bundles.end()) {
      auto g = std::make_unique<Graph>();
      NetNodes nn = add_network(*g, net, B, data.channels, data.height, data.width,
                                /*training=*/false, /*trainable=*/false);
      it = bundles.emplace(B, std::make_pair(std::move(g), nn)).first;
    }
    Graph& g = *it->second.first;
    const NetNodes& nn = it->second.second;
    g.bind(nn.x, b.x);
    g.forward();
    const Tensor& logits = g.value(nn.logits);
    int K = logits.dim(1);
    for (int i = 0; i < B; ++i) {
      const float* row = logits.data.data() + static_cast<std::int64_t>(i) * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == b.labels[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / data.n;
}

// 99th-percentile warm-up calibration of the quantized-ReLU resolutions:
// (2^b - 1) * alpha0 = p99(|pre-activation|) per site, measured with float
// activations on one batch.
inline void calibrate_alphas(Network& net, const Tensor& warmup_x) {
  if (net.spec.act_bits >= 32 || net.act_sites.empty()) return;
  Graph g;
  NetNodes nn = add_network(g, net, warmup_x.dim(0), warmup_x.dim(1), warmup_x.dim(2),
                            warmup_x.dim(3), /*training=*/true, /*trainable=*/false,
                            /*prefix=*/"", /*float_acts=*/true);
  g.bind(nn.x, warmup_x);
  g.forward();
  float denom = static_cast<float>((1 << net.spec.act_bits) - 1);
  for (const auto& [site, pre] : nn.act_preacts) {
    std::vector<float> mags;
    mags.reserve(g.value(pre).data.size());
    for (float v : g.value(pre).data) mags.push_back(std::fabs(v));
    std::sort(mags.begin(), mags.end());
    size_t idx = static_cast<size_t>(std::ceil(0.99 * mags.size()));
    if (idx > 0) --idx;
    float p99 = mags.empty() ? 1.0f : mags[idx];
    net.params.at(site + ".alpha").data[0] = std::max(p99 / denom, 1e-3f);
  }
}

namespace detail {

struct TrainBundle {
  std::unique_ptr<Graph> g;
  NetNodes teacher, student;
  NodeId labels = -1;
  FaqdNodes loss;
  std::vector<NodeId> sketches;  // one per tap in FFA route
  std::vector<int> sketch_rows;  // N per tap
};

}  // namespace detail

// FAQD distillation: frozen teacher supervises a (quantized) student through
// logits and tapped feature maps, Eq.-style composite objective. Returns
// per-epoch metrics; the student is trained in place.
inline Metrics distill_train(const Network& teacher, Network& student,
                             const DatasetHandle& train, const DatasetHandle* eval_set,
                             TrainConfig cfg) {
  cfg.validate();
  if (teacher.spec.tap_count() != student.spec.tap_count())
    throw ConfigError("distill_train: teacher has " + std::to_string(teacher.spec.tap_count()) +
                      " taps, student " + std::to_string(student.spec.tap_count()));
  if (teacher.spec.classes != student.spec.classes)
    throw ConfigError("distill_train: class count mismatch");
  if (train.n == 0) throw InputError("distill_train: empty dataset");

  // initial projection state
  if (student.conv_quantized()) {
    for (auto& [k, q] : student.quant) {
      q.eta = cfg.eta;
      q.lambda = cfg.quant_mode == QuantMode::BinaryRelax ? cfg.lambda0 : 0.0;
      if (cfg.quant_mode == QuantMode::BinaryRelax)
        q.refresh_relax();
      else
        q.refresh_qat();
    }
  }
  {  // warm-up alpha calibration on the first (unaugmented) batch
    BatchStream bs = batches(train, std::min(cfg.batch_size, train.n), cfg.seed, 0,
                             /*drop_labels=*/true, /*shuffle=*/false, /*apply_augment=*/false);
    Batch b;
    if (bs.next(b)) calibrate_alphas(student, b.x);
  }

  detail::Optimizer opt;
  opt.kind = cfg.optimizer;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  opt.b1 = cfg.adam_beta1;
  opt.b2 = cfg.adam_beta2;
  opt.eps = cfg.adam_eps;

  std::map<int, detail::TrainBundle> bundles;
  auto get_bundle = [&](int B) -> detail::TrainBundle& {
    auto it = bundles.find(B);
    if (it != bundles.end()) return it->second;
    detail::TrainBundle bu;
    bu.g = std::make_unique<Graph>();
    Graph& g = *bu.g;
    bu.teacher = add_network(g, teacher, B, train.channels, train.height, train.width,
                             /*training=*/false, /*trainable=*/false, "t.");
    bu.student = add_network(g, student, B, train.channels, train.height, train.width,
                             /*training=*/true, /*trainable=*/true, "s.");
    if (!cfg.loss.label_free) {
      Tensor lab = Tensor::zeros({B});
      bu.labels = g.input("labels", std::move(lab));
    }
    bool ffa = cfg.fa_route == FaRoute::FFA;
    if (cfg.fa_route == FaRoute::Auto) {
      int max_h = 0;
      for (NodeId t : bu.teacher.taps) max_h = std::max(max_h, g.value(t).dim(2));
      ffa = max_h > 32;
    }
    FaTermBuilder fa_term;
    if (ffa) {
      fa_term = [&bu, &cfg](Graph& gg, NodeId t, NodeId s) {
        const Tensor& vt = gg.value(t);
        int n = vt.dim(2) * vt.dim(3);
        Tensor z = Tensor::zeros({n, cfg.ffa_k});
        NodeId zleaf = gg.leaf(std::move(z));
        bu.sketches.push_back(zleaf);
        bu.sketch_rows.push_back(n);
        return ffa_loss_node(gg, t, s, zleaf);
      };
    }
    bu.loss = faqd_loss_nodes(g, bu.teacher.logits, bu.student.logits, bu.teacher.taps,
                              bu.student.taps, bu.labels, cfg.loss, fa_term);
    return bundles.emplace(B, std::move(bu)).first->second;
  };

  Metrics metrics;
  if (student.spec.act_bits < 32) metrics.alpha_names = student.act_sites;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = detail::cosine_lr(cfg.lr, epoch, cfg.epochs);
    BatchStream bs = batches(train, cfg.batch_size, cfg.seed, epoch,
                             /*drop_labels=*/cfg.loss.label_free, /*shuffle=*/true,
                             /*apply_augment=*/true);
    Batch b;
    double sum_kd = 0, sum_fa = 0, sum_gt = 0, sum_total = 0;
    int steps = 0, batch_index = 0;
    while (bs.next(b)) {
      detail::TrainBundle& bu = get_bundle(b.x.dim(0));
      Graph& g = *bu.g;
      g.bind(bu.teacher.x, b.x);
      g.bind(bu.student.x, b.x);
      sync_net_leaves(g, bu.student, student);
      if (!cfg.loss.label_free) {
        Tensor lab = Tensor::zeros({b.x.dim(0)});
        for (int i = 0; i < b.x.dim(0); ++i)
          lab.data[static_cast<size_t>(i)] = static_cast<float>(b.labels[static_cast<size_t>(i)]);
        g.bind(bu.labels, lab);
      }
      for (size_t ti = 0; ti < bu.sketches.size(); ++ti) {
        SketchMatrix z = sample_sketch(
            bu.sketch_rows[ti], cfg.ffa_k,
            Rng::mix(cfg.seed, static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(batch_index), static_cast<std::uint64_t>(ti)));
        g.bind(bu.sketches[ti], z.values);
      }
      g.forward();

      double kd = g.scalar_value(bu.loss.kd);
      double fa = bu.loss.fa >= 0 ? g.scalar_value(bu.loss.fa) : 0.0;
      double gt = bu.loss.gt >= 0 ? g.scalar_value(bu.loss.gt) : 0.0;
      double total = g.scalar_value(bu.loss.total);
      if (std::isnan(total)) {
        const char* which = std::isnan(kd) ? "KD" : std::isnan(fa) ? "FA" : "GT";
        throw Error(std::string("distill_train: NaN loss (first NaN term: ") + which +
                    ") at epoch " + std::to_string(epoch) + " step " +
                    std::to_string(batch_index));
      }
      g.backward(bu.loss.total, Tensor::scalar(1.0f));
      detail::apply_gradients(student, g, bu.student, opt, lr, cfg.quant_mode);
      student.commit_bn(0.9f);
      sum_kd += kd;
      sum_fa += fa;
      sum_gt += gt;
      sum_total += total;
      ++steps;
      ++batch_index;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.kd = sum_kd / steps;
    rec.fa = sum_fa / steps;
    rec.gt = sum_gt / steps;
    rec.total = sum_total / steps;
    rec.lambda = student.quant.empty() ? 0.0 : student.quant.begin()->second.lambda;
    if (cfg.quant_mode == QuantMode::BinaryRelax && student.conv_quantized() &&
        epoch + 1 < cfg.epochs) {
      for (auto& [k, q] : student.quant) q = relax_schedule_step(std::move(q));
    }
    for (const auto& site : metrics.alpha_names)
      rec.alphas.push_back(student.params.at(site + ".alpha").data[0]);
    if (eval_set) rec.accuracy = evaluate(student, *eval_set, cfg.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.epochs.push_back(rec);
  }
  return metrics;
}

// Plain float training (NLL objective); used for teachers and float students.
inline Metrics train_float(Network& net, const DatasetHandle& train,
                           const DatasetHandle* eval_set, TrainConfig cfg) {
  cfg.validate();
  if (net.spec.weight_bits != 32)
    throw ConfigError("train_float: network must be float (weight_bits=32)");
  if (!train.labeled()) throw InputError("train_float: needs labels");
  detail::Optimizer opt;
  opt.kind = cfg.optimizer;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  opt.b1 = cfg.adam_beta1;
  opt.b2 = cfg.adam_beta2;
  opt.eps = cfg.adam_eps;

  struct Bundle {
    std::unique_ptr<Graph> g;
    NetNodes nn;
    NodeId labels = -1, loss = -1;
  };
  std::map<int, Bundle> bundles;
  auto get_bundle = [&](int B) -> Bundle& {
    auto it = bundles.find(B);
    if (it != bundles.end()) return it->second;
    Bundle bu;
    bu.g = std::make_unique<Graph>();
    bu.nn = add_network(*bu.g, net, B, train.channels, train.height, train.width,
                        /*training=*/true, /*trainable=*/true);
    bu.labels = bu.g->input("labels", Tensor::zeros({B}));
    bu.loss = bu.g->nll(bu.nn.logits, bu.labels);
    return bundles.emplace(B, std::move(bu)).first->second;
  };

  Metrics metrics;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = detail::cosine_lr(cfg.lr, epoch, cfg.epochs);
    BatchStream bs = batches(train, cfg.batch_size, cfg.seed, epoch, false, true, true);
    Batch b;
    double sum_loss = 0;
    int steps = 0;
    while (bs.next(b)) {
      Bundle& bu = get_bundle(b.x.dim(0));
      Graph& g = *bu.g;
      g.bind(bu.nn.x, b.x);
      sync_net_leaves(g, bu.nn, net);
      Tensor lab = Tensor::zeros({b.x.dim(0)});
      for (int i = 0; i < b.x.dim(0); ++i)
        lab.data[static_cast<size_t>(i)] = static_cast<float>(b.labels[static_cast<size_t>(i)]);
      g.bind(bu.labels, lab);
      g.forward();
      double loss = g.scalar_value(bu.loss);
      if (std::isnan(loss))
        throw Error("train_float: NaN loss at epoch " + std::to_string(epoch));
      g.backward(bu.loss, Tensor::scalar(1.0f));
      detail::apply_gradients(net, g, bu.nn, opt, lr, QuantMode::QAT);
      net.commit_bn(0.9f);
      sum_loss += loss;
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.gt = sum_loss / steps;
    rec.total = sum_loss / steps;
    if (eval_set) rec.accuracy = evaluate(net, *eval_set, cfg.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.epochs.push_back(rec);
  }
  return metrics;
}

}  // namespace faqd
