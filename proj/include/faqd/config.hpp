#pragma once

#include <array>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "faqd/data.hpp"
#include "faqd/models.hpp"
#include "faqd/trainer.hpp"

namespace faqd {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "cifar"
  std::uint64_t seed = 1;
  int n = 2000;
  int eval_n = 500;
  int classes = 10;
  Shape shape = {3, 8, 8};
  float margin = 3.0f;
  std::vector<std::string> train_files, test_files;
  std::array<float, 3> mean = kCifar10Mean;
  std::array<float, 3> stddev = kCifar10Std;
  int subset_per_class = 0;  // 0 = use everything
  bool augment = true;
};

// Structured run configuration; unknown keys are rejected, every CLI flag
// overrides the matching key.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  NetSpec net;
  std::string teacher_checkpoint;
  std::string student_checkpoint;
  TrainConfig train;
  DataConfig data;
  // whether the file set these explicitly (mode defaults otherwise)
  bool kd_explicit = false, opt_explicit = false, lr_explicit = false;
};

namespace detail {

using nlohmann::json;

inline void require_keys(const json& j, const std::string& scope,
                         const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config: '" + scope + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k))
      throw ConfigError("config: unknown key '" + (scope.empty() ? k : scope + "." + k) + "'");
}

inline NetSpec parse_net(const json& j, const std::string& scope) {
  require_keys(j, scope,
               {"name", "depth", "group_channels", "classes", "weight_bits", "act_bits"});
  NetSpec s = NetSpec::by_name(j.value("name", std::string("resnet-tiny-8")));
  if (j.contains("depth")) s.depth = j["depth"].get<int>();
  if (j.contains("group_channels")) s.group_channels = j["group_channels"].get<std::vector<int>>();
  s.classes = j.value("classes", s.classes);
  s.weight_bits = j.value("weight_bits", s.weight_bits);
  s.act_bits = j.value("act_bits", s.act_bits);
  s.validate();
  return s;
}

inline void parse_loss(const json& j, LossConfig& l, bool& kd_explicit) {
  require_keys(j, "loss", {"alpha", "beta", "gamma", "kd_kind", "label_free", "tap_count"});
  l.alpha = j.value("alpha", l.alpha);
  l.beta = j.value("beta", l.beta);
  l.gamma = j.value("gamma", l.gamma);
  if (j.contains("kd_kind")) {
    std::string k = j["kd_kind"].get<std::string>();
    if (k == "mse")
      l.kd_kind = KdKind::MSE;
    else if (k == "kl")
      l.kd_kind = KdKind::KL;
    else
      throw ConfigError("config: loss.kd_kind must be 'mse' or 'kl'");
    kd_explicit = true;
  }
  l.label_free = j.value("label_free", l.label_free);
  if (j.contains("tap_count")) l.tap_count = j["tap_count"].get<int>();
  l.validate();
}

inline void parse_train(const json& j, RunConfig& rc) {
  require_keys(j, "train",
               {"mode", "quant_mode", "optimizer", "lr", "momentum", "weight_decay",
                "adam_beta1", "adam_beta2", "adam_eps", "epochs", "batch_size", "lambda0",
                "eta", "fa_route", "ffa_k"});
  TrainConfig& t = rc.train;
  if (j.contains("mode")) {
    std::string m = j["mode"].get<std::string>();
    if (m == "end_to_end" || m == "end2end")
      t.mode = TrainMode::EndToEnd;
    else if (m == "fine_tune" || m == "finetune")
      t.mode = TrainMode::FineTune;
    else
      throw ConfigError("config: train.mode must be 'end_to_end' or 'fine_tune'");
  }
  if (j.contains("quant_mode")) {
    std::string m = j["quant_mode"].get<std::string>();
    if (m == "qat")
      t.quant_mode = QuantMode::QAT;
    else if (m == "binary_relax")
      t.quant_mode = QuantMode::BinaryRelax;
    else
      throw ConfigError("config: train.quant_mode must be 'qat' or 'binary_relax'");
  }
  if (j.contains("optimizer")) {
    std::string o = j["optimizer"].get<std::string>();
    if (o == "sgd" || o == "sgd_momentum")
      t.optimizer = OptimizerKind::SgdMomentum;
    else if (o == "adam")
      t.optimizer = OptimizerKind::Adam;
    else
      throw ConfigError("config: train.optimizer must be 'sgd' or 'adam'");
    rc.opt_explicit = true;
  }
  if (j.contains("lr")) {
    t.lr = j["lr"].get<double>();
    rc.lr_explicit = true;
  }
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.adam_beta1 = j.value("adam_beta1", t.adam_beta1);
  t.adam_beta2 = j.value("adam_beta2", t.adam_beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lambda0 = j.value("lambda0", t.lambda0);
  t.eta = j.value("eta", t.eta);
  if (j.contains("fa_route")) {
    std::string f = j["fa_route"].get<std::string>();
    if (f == "auto")
      t.fa_route = FaRoute::Auto;
    else if (f == "exact")
      t.fa_route = FaRoute::Exact;
    else if (f == "ffa")
      t.fa_route = FaRoute::FFA;
    else
      throw ConfigError("config: train.fa_route must be 'auto', 'exact' or 'ffa'");
  }
  t.ffa_k = j.value("ffa_k", t.ffa_k);
}

inline void parse_data(const json& j, DataConfig& d) {
  require_keys(j, "data",
               {"source", "seed", "n", "eval_n", "classes", "shape", "margin", "train_files",
                "test_files", "mean", "std", "subset_per_class", "augment"});
  d.source = j.value("source", d.source);
  if (d.source != "synthetic" && d.source != "cifar")
    throw ConfigError("config: data.source must be 'synthetic' or 'cifar'");
  d.seed = j.value("seed", d.seed);
  d.n = j.value("n", d.n);
  d.eval_n = j.value("eval_n", d.eval_n);
  d.classes = j.value("classes", d.classes);
  if (j.contains("shape")) {
    d.shape = j["shape"].get<std::vector<int>>();
    if (d.shape.size() != 3) throw ConfigError("config: data.shape must be [C,H,W]");
  }
  d.margin = j.value("margin", d.margin);
  if (j.contains("train_files")) d.train_files = j["train_files"].get<std::vector<std::string>>();
  if (j.contains("test_files")) d.test_files = j["test_files"].get<std::vector<std::string>>();
  auto arr3 = [](const json& a, const char* what) {
    auto v = a.get<std::vector<float>>();
    if (v.size() != 3) throw ConfigError(std::string("config: data.") + what + " must have 3 entries");
    return std::array<float, 3>{v[0], v[1], v[2]};
  };
  if (j.contains("mean")) d.mean = arr3(j["mean"], "mean");
  if (j.contains("std")) d.stddev = arr3(j["std"], "std");
  d.subset_per_class = j.value("subset_per_class", d.subset_per_class);
  d.augment = j.value("augment", d.augment);
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::require_keys(j, "",
                       {"seed", "output_dir", "net", "teacher_checkpoint", "student_checkpoint",
                        "train", "loss", "data"});
  RunConfig rc;
  rc.seed = j.value("seed", rc.seed);
  rc.output_dir = j.value("output_dir", rc.output_dir);
  if (j.contains("net")) rc.net = detail::parse_net(j["net"], "net");
  rc.teacher_checkpoint = j.value("teacher_checkpoint", rc.teacher_checkpoint);
  rc.student_checkpoint = j.value("student_checkpoint", rc.student_checkpoint);
  if (j.contains("train")) detail::parse_train(j["train"], rc);
  if (j.contains("loss")) detail::parse_loss(j["loss"], rc.train.loss, rc.kd_explicit);
  if (j.contains("data")) detail::parse_data(j["data"], rc.data);
  rc.train.seed = rc.seed;
  rc.data.seed = j.contains("data") && j["data"].contains("seed") ? rc.data.seed : rc.seed;
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config: parse error in '" + path + "': " + e.what());
  }
  return parse_run_config(j);
}

struct LoadedData {
  DatasetHandle train, eval;
};

inline LoadedData load_data(const DataConfig& d) {
  LoadedData out;
  if (d.source == "synthetic") {
    DatasetHandle all = synthetic_dataset(d.seed, d.n + d.eval_n, d.classes, d.shape, d.margin);
    // split: first n train, remainder eval (same class means)
    out.train = all;
    out.eval = all;
    auto take = [&](DatasetHandle& h, int from, int count) {
      DatasetHandle sub;
      sub.channels = all.channels;
      sub.height = all.height;
      sub.width = all.width;
      sub.classes = all.classes;
      sub.n = count;
      sub.images.assign(all.images.begin() + static_cast<std::int64_t>(from) * all.item_size(),
                        all.images.begin() +
                            static_cast<std::int64_t>(from + count) * all.item_size());
      std::vector<int> labs(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) labs[static_cast<size_t>(i)] = all.label(from + i);
      sub.set_labels(std::move(labs));
      h = std::move(sub);
    };
    take(out.train, 0, d.n);
    take(out.eval, d.n, d.eval_n);
    out.train.augment = false;  // blobs are not images; augmentation off
  } else {
    if (d.train_files.empty()) throw ConfigError("config: data.train_files required for cifar");
    out.train = load_cifar_binary(d.train_files, d.mean, d.stddev);
    if (d.subset_per_class > 0) out.train = subset_per_class(out.train, d.subset_per_class);
    out.train.label_reads = 0;
    out.train.augment = d.augment;
    if (!d.test_files.empty()) out.eval = load_cifar_binary(d.test_files, d.mean, d.stddev);
  }
  return out;
}

}  // namespace faqd
