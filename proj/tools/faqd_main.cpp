// faqd command-line front end: teacher training, FAQD distillation, the FFA
// scaling benchmark and the verification suites.
//
// Exit codes: 0 success / verification pass, 1 usage or config error,
// 2 runtime error, 3 verification failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "faqd.hpp"

namespace {

using namespace faqd;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerifyFail = 3;

struct Overrides {
  std::string out, mode, loss_preset;
  int bits = -1, act_bits = -1, ffa_k = -1, epochs = -1, batch_size = -1;
  double lr = -1;
  long long seed = -1;
};

void apply_common(RunConfig& rc, const Overrides& ov) {
  if (!ov.out.empty()) rc.output_dir = ov.out;
  if (ov.seed >= 0) {
    rc.seed = static_cast<std::uint64_t>(ov.seed);
    rc.train.seed = rc.seed;
    rc.data.seed = rc.seed;
  }
  if (ov.epochs > 0) rc.train.epochs = ov.epochs;
  if (ov.batch_size > 0) rc.train.batch_size = ov.batch_size;
  if (ov.lr > 0) {
    rc.train.lr = ov.lr;
    rc.lr_explicit = true;
  }
}

std::string out_path(const RunConfig& rc, const std::string& name) {
  return (std::filesystem::path(rc.output_dir) / name).string();
}

int cmd_train_teacher(const std::string& config_path, const Overrides& ov) {
  RunConfig rc = load_run_config(config_path);
  apply_common(rc, ov);
  if (rc.net.weight_bits != 32)
    throw ConfigError("train-teacher: teacher must be float (net.weight_bits=32, got " +
                      std::to_string(rc.net.weight_bits) + ")");
  if (rc.net.act_bits != 32)
    throw ConfigError("train-teacher: teacher must use float activations");
  LoadedData data = load_data(rc.data);
  rc.net.classes = data.train.classes;
  Network net = build_network(rc.net, rc.seed, data.train.channels);
  resolve_mode_defaults(rc.train, rc.kd_explicit, rc.opt_explicit, rc.lr_explicit);
  Metrics m = train_float(net, data.train, data.eval.n ? &data.eval : nullptr, rc.train);
  std::string ckpt = out_path(rc, "teacher.ckpt");
  save_checkpoint(net, ckpt);
  write_metrics_csv(m, out_path(rc, "teacher_metrics.csv"));
  write_timing_csv(m, out_path(rc, "teacher_timing.csv"));
  double acc = m.epochs.empty() ? -1 : m.epochs.back().accuracy;
  std::printf("train-teacher done: epochs=%zu final_accuracy=%.4f checkpoint=%s\n",
              m.epochs.size(), acc, ckpt.c_str());
  return kExitOk;
}

// float checkpoint -> quantized student skeleton (shared architecture)
Network quantize_from_float(const Network& fnet, int weight_bits, int act_bits,
                            std::uint64_t seed, int in_channels) {
  NetSpec spec = fnet.spec;
  spec.weight_bits = weight_bits;
  spec.act_bits = act_bits;
  Network q = build_network(spec, seed, in_channels);
  for (auto& [name, t] : q.params) {
    auto it = fnet.params.find(name);
    if (it != fnet.params.end() && it->second.shape == t.shape) t = it->second;
  }
  for (auto& [name, st] : q.quant) {
    auto it = fnet.params.find(name);
    if (it == fnet.params.end())
      throw ConfigError("distill: float checkpoint lacks conv layer '" + name + "'");
    st.w = it->second;
    st.refresh_qat();
  }
  for (auto& [name, r] : q.bn) {
    auto it = fnet.bn.find(name);
    if (it != fnet.bn.end()) {
      r->mean = it->second->mean;
      r->var = it->second->var;
    }
  }
  return q;
}

int cmd_distill(const std::string& config_path, const Overrides& ov) {
  RunConfig rc = load_run_config(config_path);
  apply_common(rc, ov);
  if (ov.bits > 0) rc.net.weight_bits = ov.bits;
  if (ov.act_bits > 0) rc.net.act_bits = ov.act_bits;
  if (!ov.mode.empty()) {
    if (ov.mode == "end2end")
      rc.train.mode = TrainMode::EndToEnd;
    else if (ov.mode == "finetune")
      rc.train.mode = TrainMode::FineTune;
    else
      throw ConfigError("distill: --mode must be end2end or finetune");
  }
  if (!ov.loss_preset.empty()) {
    if (ov.loss_preset == "faqd") {
      // composite objective as configured
    } else if (ov.loss_preset == "qd") {
      rc.train.loss.beta = 0.0;
      rc.train.loss.kd_kind = KdKind::KL;
      rc.train.loss.gamma = 1.0 - rc.train.loss.alpha;
      if (rc.train.loss.gamma < 0) rc.train.loss.gamma = 0.0;
      rc.kd_explicit = true;
    } else if (ov.loss_preset == "label-free") {
      rc.train.loss.label_free = true;
    } else {
      throw ConfigError("distill: --loss must be faqd, qd or label-free");
    }
  }
  if (ov.ffa_k > 0) {
    rc.train.ffa_k = ov.ffa_k;
    rc.train.fa_route = FaRoute::FFA;
  }
  if (rc.teacher_checkpoint.empty())
    throw ConfigError("distill: teacher_checkpoint missing from config");
  Network teacher = load_checkpoint(rc.teacher_checkpoint);

  LoadedData data = load_data(rc.data);
  rc.net.classes = data.train.classes;
  Network student;
  if (rc.train.mode == TrainMode::FineTune) {
    if (rc.student_checkpoint.empty())
      throw ConfigError("distill: fine-tune mode needs student_checkpoint (a float model)");
    Network fstudent = load_checkpoint(rc.student_checkpoint);
    if (fstudent.spec.weight_bits != 32)
      throw ConfigError("distill: student_checkpoint must be a float model");
    student =
        quantize_from_float(fstudent, rc.net.weight_bits, rc.net.act_bits, rc.seed,
                            data.train.channels);
  } else {
    student = build_network(rc.net, rc.seed, data.train.channels);
  }
  resolve_mode_defaults(rc.train, rc.kd_explicit, rc.opt_explicit, rc.lr_explicit);

  DatasetHandle train = rc.train.loss.label_free ? label_free(data.train) : data.train;
  Metrics m = distill_train(teacher, student, train, data.eval.n ? &data.eval : nullptr,
                            rc.train);
  std::string ckpt = out_path(rc, "student.ckpt");
  save_checkpoint(student, ckpt);
  write_metrics_csv(m, out_path(rc, "distill_metrics.csv"));
  write_timing_csv(m, out_path(rc, "distill_timing.csv"));
  double acc = m.epochs.empty() ? -1 : m.epochs.back().accuracy;
  std::printf(
      "distill done: epochs=%zu final_accuracy=%.4f label_reads=%llu checkpoint=%s\n",
      m.epochs.size(), acc, static_cast<unsigned long long>(train.label_reads), ckpt.c_str());
  return kExitOk;
}

std::vector<int> geometric_list(int lo, int hi) {
  std::vector<int> v;
  for (int x = lo; x <= hi; x *= 2) v.push_back(x);
  return v;
}

int report_and_exitcode(const verify::VerifyReport& r, const std::string& out) {
  verify::write_report_csv(r, out);
  std::printf("suite=%s trials=%zu verdict=%s%s%s csv=%s\n", r.suite.c_str(), r.trials.size(),
              r.passed ? "PASS" : "FAIL", r.note.empty() ? "" : " note=",
              r.note.c_str(), out.c_str());
  for (const auto& [k, v] : r.params)
    if (k.find("slope") != std::string::npos) std::printf("  %s=%s\n", k.c_str(), v.c_str());
  return r.passed ? kExitOk : kExitVerifyFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature-affinity assisted distillation for quantization-aware training"};
  app.require_subcommand(1);

  Overrides ov;
  std::string config_path;

  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--config", config_path, "JSON run configuration")->required();
    c->add_option("--out", ov.out, "output directory (overrides config)");
    c->add_option("--seed", ov.seed, "seed (overrides config)");
    c->add_option("--epochs", ov.epochs, "epochs (overrides config)");
    c->add_option("--batch-size", ov.batch_size, "batch size (overrides config)");
    c->add_option("--lr", ov.lr, "learning rate (overrides config)");
  };

  CLI::App* tt = app.add_subcommand("train-teacher", "train a float teacher and checkpoint it");
  add_train_flags(tt);

  CLI::App* di = app.add_subcommand("distill", "train a quantized student against a teacher");
  add_train_flags(di);
  di->add_option("--bits", ov.bits, "weight bits {1,2,4,32}");
  di->add_option("--act-bits", ov.act_bits, "activation bits {1,2,4,32}");
  di->add_option("--mode", ov.mode, "end2end|finetune");
  di->add_option("--loss", ov.loss_preset, "faqd|qd|label-free");
  di->add_option("--ffa-k", ov.ffa_k, "sketch ensemble size (selects the sketched FA term)");

  int hmin = 8, hmax = 128, bc = 16, bk = 1, repeats = 5;
  long long bseed = 1;
  std::string bout = "out/bench_ffa.csv";
  CLI::App* be = app.add_subcommand("bench-ffa", "FA vs FFA wall-clock scaling study");
  be->add_option("--hmin", hmin, "smallest map side");
  be->add_option("--hmax", hmax, "largest map side (doubling)");
  be->add_option("--c", bc, "channels");
  be->add_option("--k", bk, "sketch ensemble size");
  be->add_option("--repeats", repeats, "timing repeats per size (>= 5)");
  be->add_option("--seed", bseed, "seed");
  be->add_option("--out", bout, "CSV path");

  std::string suite;
  int vn = -1, vc = -1, vd = 512, vtrials = -1, vsamples = 10000, vsteps = 200000;
  int vkmin = 1, vkmax = 64;
  double veps = -1.0;
  long long vseed = 1;
  std::string vout;
  CLI::App* ve = app.add_subcommand("verify", "run a statistical verification suite");
  ve->add_option("suite", suite, "one of: jl, unbiased, tail, scaling, argmin")->required();
  ve->add_option("--n", vn, "points / rows / problem size");
  ve->add_option("--c", vc, "channels");
  ve->add_option("--d", vd, "ambient dimension (jl)");
  ve->add_option("--epsilon", veps, "tolerance (jl, tail; tail default: auto)");
  ve->add_option("--trials", vtrials, "trial count");
  ve->add_option("--samples", vsamples, "Monte Carlo samples (unbiased)");
  ve->add_option("--kmin", vkmin, "smallest ensemble size");
  ve->add_option("--kmax", vkmax, "largest ensemble size (doubling)");
  ve->add_option("--steps", vsteps, "descent steps per k (argmin)");
  ve->add_option("--hmin", hmin, "smallest map side (scaling)");
  ve->add_option("--hmax", hmax, "largest map side (scaling)");
  ve->add_option("--repeats", repeats, "timing repeats (scaling)");
  ve->add_option("--seed", vseed, "seed");
  ve->add_option("--out", vout, "CSV path (default out/verify_<suite>.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (tt->parsed()) return cmd_train_teacher(config_path, ov);
    if (di->parsed()) return cmd_distill(config_path, ov);
    if (be->parsed()) {
      auto r = verify::run_scaling_bench(geometric_list(hmin, hmax), bc, bk, repeats,
                                         static_cast<std::uint64_t>(bseed));
      return report_and_exitcode(r, bout);
    }
    if (ve->parsed()) {
      std::uint64_t seed = static_cast<std::uint64_t>(vseed);
      std::string out = vout;
      if (out.empty()) out = "out/verify_" + suite + ".csv";
      auto klist = geometric_list(vkmin, vkmax);
      if (suite == "jl") {
        auto r = verify::run_jl_check(vn > 0 ? vn : 64, vd, veps > 0 ? veps : 0.5,
                                      vtrials > 0 ? vtrials : 100, seed);
        return report_and_exitcode(r, out);
      } else if (suite == "unbiased") {
        auto r = verify::run_unbiasedness(vn > 0 ? vn : 64, vc > 0 ? vc : 8, vsamples, seed);
        return report_and_exitcode(r, out);
      } else if (suite == "tail") {
        auto r = verify::run_tail_decay(vn > 0 ? vn : 64, vc > 0 ? vc : 8, veps, klist,
                                        vtrials > 0 ? vtrials : 4000, seed);
        return report_and_exitcode(r, out);
      } else if (suite == "scaling") {
        auto r = verify::run_scaling_bench(geometric_list(hmin, hmax), vc > 0 ? vc : 16,
                                           bk, repeats, seed);
        return report_and_exitcode(r, out);
      } else if (suite == "argmin") {
        auto r = verify::run_argmin_demo(vn > 0 ? vn : 16, klist, seed, vsteps);
        return report_and_exitcode(r, out);
      }
      std::fprintf(stderr, "unknown suite '%s'; valid suites: jl, unbiased, tail, scaling, argmin\n",
                   suite.c_str());
      return kExitUsage;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
