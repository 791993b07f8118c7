// tinyhd command-line tool. See `tinyhd --help` and `tinyhd <command> --help`.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/tinyhd.hpp"

namespace {

using namespace tinyhd;

// Exit codes.
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kDiverged = 3;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::optional<double> width;
  std::string teacher;
  std::string aux;
  std::optional<int> epochs;
  std::string data;
  std::string eval;
  std::vector<std::string> checkpoints;
  std::optional<std::size_t> count;
  std::optional<int> splits;
  bool no_ta = false;
};

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.seed) c.seed = f.seed;
  if (!f.out.empty()) c.out = f.out;
  if (!f.mode.empty()) c.model.mode = parse_mode(f.mode);
  if (f.width) c.model.width_multiplier = *f.width;
  if (!f.teacher.empty()) c.teacher = f.teacher;
  if (!f.aux.empty()) c.aux_dir = f.aux;
  if (f.epochs) {
    if (*f.epochs < 0) throw ConfigError("--epochs must be >= 0");
    c.schedule = c.schedule.scaled_to(*f.epochs);
  }
  if (!f.data.empty()) c.train_dir = f.data;
  if (!f.eval.empty()) c.eval_dir = f.eval;
  if (f.checkpoints.size() == 1) c.checkpoint = f.checkpoints[0];
  if (f.count) c.synth_count = *f.count;
  if (f.splits) c.eval_splits = *f.splits;
  if (f.no_ta) c.reduction.use_teacher_assistant = false;
  c.model.validate();
  c.schedule.validate();
  return c;
}

fs::path require_out(const ExperimentConfig& c) {
  if (c.out.empty()) throw ConfigError("no output directory; set [run] out or pass --out");
  fs::create_directories(c.out);
  return c.out;
}

Dataset require_dataset(const std::string& dir, const char* what) {
  if (dir.empty()) throw ConfigError(std::string("no ") + what + " dataset given");
  if (!fs::exists(dir)) throw DataError(std::string(what) + " dataset not found: " + dir);
  return Dataset::load(dir);
}

/// Deterministic record of a run: command, seeds and resolved settings.
class RunManifest {
 public:
  explicit RunManifest(std::string command) { os_ << "tinyhd-run 1\ncommand " << command << '\n'; }
  void seed(const std::string& what, std::uint64_t v) { os_ << "seed " << what << ' ' << v << '\n'; }
  void line(const std::string& key, const std::string& v) { os_ << key << ' ' << v << '\n'; }
  void artifact(const std::string& name) { os_ << "artifact " << name << '\n'; }
  void write(const fs::path& dir) { atomic_write(dir / "manifest.txt", os_.str()); }

 private:
  std::ostringstream os_;
};

std::string schedule_str(const Schedule& s) {
  std::ostringstream os;
  os.precision(17);
  os << "epochs=" << s.epochs << " milestones=";
  for (std::size_t i = 0; i < s.milestones.size(); ++i) os << (i ? "," : "") << s.milestones[i];
  os << " batch_size=" << s.batch_size << " lr=" << s.lr << " momentum=" << s.momentum << " gamma=" << s.gamma
     << " flip_prob=" << s.flip_prob;
  return os.str();
}

/// Teacher from a `file:<dir>` or `frozen:<checkpoint>` spec. An empty
/// `file:` reads each dataset's own teacher maps.
std::unique_ptr<Teacher> make_teacher(const std::string& spec) {
  if (spec.empty() || spec == "file:") return std::make_unique<FileBackedTeacher>();
  if (spec.rfind("file:", 0) == 0) {
    const fs::path dir = spec.substr(5);
    if (!fs::is_directory(dir)) throw DataError("teacher directory not found: " + dir.string());
    return std::make_unique<FileBackedTeacher>(dir);
  }
  if (spec.rfind("frozen:", 0) == 0) {
    const fs::path ckpt = spec.substr(7);
    if (!fs::exists(ckpt)) throw DataError("teacher checkpoint not found: " + ckpt.string());
    return std::make_unique<FrozenHierarchicalTeacher>(load_checkpoint<float>(ckpt), "frozen:" + ckpt.string());
  }
  throw ConfigError("teacher must be file:<dir> or frozen:<checkpoint>, got '" + spec + "'");
}

std::string eval_row(const std::string& label, const EvalResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << label << ',' << r.loss << ',' << r.gt_kl << ',' << r.cc << '\n';
  return os.str();
}
constexpr const char* kEvalHeader = "stage,loss,gt_kl,cc\n";

void print_epoch(const EpochRecord& r) {
  std::printf("epoch %3d  lr %.3g  loss %.6f\n", r.epoch, r.lr, r.total);
  std::fflush(stdout);
}

// ---- commands ---------------------------------------------------------------------

int cmd_synth(const Flags& f) {
  ExperimentConfig c = resolve(f);
  const fs::path out = require_out(c);
  c.synth.seed = c.require_seed();
  write_synthetic_dataset(out, c.synth, c.synth_count);
  RunManifest m("synth-data");
  m.seed("run", c.synth.seed);
  m.line("synth", c.synth.serialize());
  m.line("count", std::to_string(c.synth_count));
  m.artifact("index.txt");
  m.write(out);
  std::printf("wrote %zu clips to %s\n", c.synth_count, out.string().c_str());
  return kOk;
}

int cmd_train(const Flags& f, bool distill) {
  ExperimentConfig c = resolve(f);
  const std::uint64_t seed = c.require_seed();
  const fs::path out = require_out(c);
  const Dataset train_set = require_dataset(c.train_dir, "training");
  std::optional<Dataset> eval_set, aux_set;
  if (!c.eval_dir.empty()) eval_set = require_dataset(c.eval_dir, "evaluation");
  if (!c.aux_dir.empty()) {
    if (!distill) throw ConfigError("--aux needs the distill command");
    aux_set = require_dataset(c.aux_dir, "auxiliary");
  }
  std::unique_ptr<Teacher> teacher;
  if (distill) teacher = make_teacher(c.teacher);
  else if (!c.teacher.empty()) throw ConfigError("--teacher needs the distill command");

  RunManifest m(distill ? "distill" : "train");
  m.seed("run", seed);
  m.seed("model_init", derive_seed(seed, 1));
  m.seed("train_order", derive_seed(seed, 2));
  m.line("model", c.model.serialize());
  m.line("schedule", schedule_str(c.schedule));
  if (teacher) m.line("teacher", teacher->describe());

  TinyHD<float> model(c.model, derive_seed(seed, 1));
  std::string eval_csv = kEvalHeader;
  if (eval_set) eval_csv += eval_row("init", evaluate(model, *eval_set, teacher.get()));

  TrainOptions o;
  o.schedule = c.schedule;
  o.seed = derive_seed(seed, 2);
  o.objective = distill ? Objective::distill : Objective::supervised;
  o.teacher = teacher.get();
  o.aux = aux_set ? &*aux_set : nullptr;
  o.dump_dir = out;
  o.prefetch_depth = c.prefetch_depth;
  o.on_epoch = print_epoch;
  const auto history = train(model, train_set, o);

  save_checkpoint(out / "model.ckpt", model);
  atomic_write(out / "history.csv", history_csv(history));
  m.artifact("model.ckpt");
  m.artifact("history.csv");
  if (eval_set) {
    const EvalResult r = evaluate(model, *eval_set, teacher.get());
    eval_csv += eval_row("final", r);
    atomic_write(out / "eval.csv", eval_csv);
    m.artifact("eval.csv");
    std::printf("eval loss %.6f  gt_kl %.6f  cc %.4f\n", r.loss, r.gt_kl, r.cc);
  }
  m.write(out);
  return kOk;
}

int cmd_reduce(const Flags& f) {
  ExperimentConfig c = resolve(f);
  const std::uint64_t seed = c.require_seed();
  const fs::path out = require_out(c);
  const Dataset train_set = require_dataset(c.train_dir, "training");
  std::optional<Dataset> eval_set;
  if (!c.eval_dir.empty()) eval_set = require_dataset(c.eval_dir, "evaluation");
  auto teacher = make_teacher(c.teacher);
  c.reduction.validate();

  std::optional<TinyHD<float>> first;
  if (!c.checkpoint.empty()) {
    if (!fs::exists(c.checkpoint)) throw DataError("checkpoint not found: " + c.checkpoint);
    first = load_checkpoint<float>(c.checkpoint);
  }
  ModelConfig mc = c.model;
  mc.width_multiplier = c.reduction.stages[0];
  mc.validate();

  RunManifest m("reduce");
  m.seed("run", seed);
  m.seed("model_init", derive_seed(seed, 1));
  m.seed("train_order", derive_seed(seed, 2));
  m.line("model", mc.serialize());
  m.line("schedule", schedule_str(c.schedule));
  m.line("teacher", teacher->describe());
  m.line("teacher_assistant", c.reduction.use_teacher_assistant ? "true" : "false");

  TrainOptions o;
  o.schedule = c.schedule;
  o.seed = derive_seed(seed, 2);
  o.dump_dir = out;
  o.prefetch_depth = c.prefetch_depth;
  o.on_epoch = print_epoch;
  auto stages = teacher_assistant_pipeline(c.reduction, mc, std::move(first), train_set, *teacher, o,
                                           derive_seed(seed, 1));

  std::ostringstream summary;
  summary.precision(10);
  summary << "width,params,eval_loss,gt_kl,cc\n";
  for (auto& s : stages) {
    std::ostringstream tag;
    tag << "width_" << s.width;
    const std::string name = tag.str();
    save_checkpoint(out / (name + ".ckpt"), s.model);
    atomic_write(out / (name + "_history.csv"), history_csv(s.history));
    m.artifact(name + ".ckpt");
    m.artifact(name + "_history.csv");
    summary << s.width << ',' << s.model.parameter_count();
    if (eval_set) {
      const EvalResult r = evaluate(s.model, *eval_set, teacher.get());
      summary << ',' << r.loss << ',' << r.gt_kl << ',' << r.cc;
    } else {
      summary << ",,,";
    }
    summary << '\n';
  }
  atomic_write(out / "stages.csv", summary.str());
  m.artifact("stages.csv");
  m.write(out);
  std::fputs(summary.str().c_str(), stdout);
  return kOk;
}

int cmd_eval(const Flags& f) {
  ExperimentConfig c = resolve(f);
  const std::uint64_t seed = c.require_seed();
  const fs::path out = require_out(c);
  if (c.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  if (!fs::exists(c.checkpoint)) throw DataError("checkpoint not found: " + c.checkpoint);
  const Dataset data = require_dataset(c.eval_dir.empty() ? c.train_dir : c.eval_dir, "evaluation");
  std::unique_ptr<Teacher> teacher;
  if (!c.teacher.empty()) teacher = make_teacher(c.teacher);
  TinyHD<float> model = load_checkpoint<float>(c.checkpoint);

  const EvalResult r = evaluate(model, data, teacher.get());
  const MetricReport report = evaluate_maps(r.predictions, r.ground_truth, r.fixations, r.groups,
                                            derive_seed(seed, 3), c.eval_splits);
  std::ostringstream summary;
  summary.precision(10);
  summary << report.summary() << "loss " << r.loss << "\ngt_kl " << r.gt_kl << '\n';
  atomic_write(out / "metrics.csv", report.to_csv());
  atomic_write(out / "summary.txt", summary.str());
  save_tensor(out / "predictions.nst", r.predictions);

  RunManifest m("eval");
  m.seed("run", seed);
  m.seed("metric_splits", derive_seed(seed, 3));
  m.line("checkpoint", c.checkpoint);
  m.line("splits", std::to_string(c.eval_splits));
  m.artifact("metrics.csv");
  m.artifact("summary.txt");
  m.artifact("predictions.nst");
  m.write(out);
  std::fputs(summary.str().c_str(), stdout);
  return kOk;
}

int cmd_profile(const Flags& f) {
  ExperimentConfig c = resolve(f);
  // Costs do not depend on weight values; the init seed is fixed.
  TinyHD<float> model(c.model, 0);
  const CostReport r = count_model(model);
  if (!c.out.empty()) {
    const fs::path out = require_out(c);
    atomic_write(out / "cost.csv", r.to_csv());
    atomic_write(out / "cost.txt", r.to_text());
    RunManifest m("profile");
    m.line("model", c.model.serialize());
    m.artifact("cost.csv");
    m.artifact("cost.txt");
    m.write(out);
  }
  std::fputs(r.to_csv().c_str(), stdout);
  std::fputs(r.to_text().c_str(), stderr);
  return kOk;
}

int cmd_agree(const Flags& f) {
  ExperimentConfig c = resolve(f);
  if (f.checkpoints.size() < 2) throw ConfigError("agree needs at least two --checkpoint values");
  const fs::path out = require_out(c);
  const Dataset data = require_dataset(c.eval_dir.empty() ? c.train_dir : c.eval_dir, "evaluation");
  std::vector<Tensor<float>> maps;
  for (const auto& path : f.checkpoints) {
    if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
    TinyHD<float> model = load_checkpoint<float>(path);
    maps.push_back(evaluate(model, data, nullptr).predictions);
  }
  const AgreementMatrix a = agreement(f.checkpoints, maps);
  atomic_write(out / "agreement.csv", a.to_csv());
  atomic_write(out / "agreement.txt", a.to_text());
  RunManifest m("agree");
  for (const auto& p : f.checkpoints) m.line("checkpoint", p);
  m.artifact("agreement.csv");
  m.artifact("agreement.txt");
  m.write(out);
  std::fputs(a.to_text().c_str(), stdout);
  return kOk;
}

int exit_code_for(const Error& e) {
  const std::string kind = e.kind();
  if (kind == "data" || kind == "shape") return kData;
  if (kind == "divergence") return kDiverged;
  return kUsage;
}

void report_error(const std::string& kind, const std::string& reason) {
  std::string r;
  for (char ch : reason) {
    if (ch == '"' || ch == '\\') r += '\\';
    r += ch == '\n' ? ' ' : ch;
  }
  std::fprintf(stderr, "error=%s reason=\"%s\"\n", kind.c_str(), r.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiny hierarchical-distillation video saliency toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", f.config, "Experiment config file")->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out, "Output directory");
  };
  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", f.seed, "Run seed (required unless in config)"); };
  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--mode", f.mode, "Prediction mode")->check(CLI::IsMember({"miso", "mimo"}));
    cmd->add_option("--width", f.width, "Width multiplier")->check(CLI::IsMember({1.0, 0.5, 0.25}));
  };
  auto add_training = [&](CLI::App* cmd) {
    cmd->add_option("--data", f.data, "Training dataset directory");
    cmd->add_option("--eval", f.eval, "Evaluation dataset directory (optional)");
    cmd->add_option("--epochs", f.epochs, "Epoch count; milestones rescale proportionally");
  };
  auto add_teacher = [&](CLI::App* cmd) {
    cmd->add_option("--teacher", f.teacher,
                    "file:<dir> (empty dir: each dataset's own teacher maps) or frozen:<checkpoint>");
  };

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset");
  add_common(synth);
  add_seed(synth);
  synth->add_option("--count", f.count, "Number of clips");

  auto* train_cmd = app.add_subcommand("train", "Supervised training on ground truth only");
  add_common(train_cmd);
  add_seed(train_cmd);
  add_model(train_cmd);
  add_training(train_cmd);

  auto* distill_cmd = app.add_subcommand("distill", "Training with teacher terms and optional auxiliary data");
  add_common(distill_cmd);
  add_seed(distill_cmd);
  add_model(distill_cmd);
  add_training(distill_cmd);
  add_teacher(distill_cmd);
  distill_cmd->add_option("--aux", f.aux, "Auxiliary (teacher-only) dataset directory");

  auto* reduce_cmd = app.add_subcommand("reduce", "Channel-reduction pipeline with optional teacher assistant");
  add_common(reduce_cmd);
  add_seed(reduce_cmd);
  add_model(reduce_cmd);
  add_training(reduce_cmd);
  add_teacher(reduce_cmd);
  reduce_cmd->add_option("--checkpoint", f.checkpoints, "Trained first-stage checkpoint (optional)")
      ->expected(1);
  reduce_cmd->add_flag("--no-ta", f.no_ta, "Distill every stage from the base teacher");

  auto* eval_cmd = app.add_subcommand("eval", "Metric report for a checkpoint");
  add_common(eval_cmd);
  add_seed(eval_cmd);
  eval_cmd->add_option("--checkpoint", f.checkpoints, "Checkpoint to evaluate")->expected(1);
  eval_cmd->add_option("--data", f.eval, "Dataset directory to evaluate on");
  add_teacher(eval_cmd);
  eval_cmd->add_option("--splits", f.splits, "Random negative splits for AUC-Borji and sAUC");

  auto* profile_cmd = app.add_subcommand("profile", "MAC and parameter counts for a config");
  add_common(profile_cmd);
  add_model(profile_cmd);

  auto* agree_cmd = app.add_subcommand("agree", "Pairwise CC/SIM agreement between checkpoints");
  add_common(agree_cmd);
  agree_cmd->add_option("--checkpoint", f.checkpoints, "Checkpoint (repeat, at least two)")->required();
  agree_cmd->add_option("--data", f.eval, "Dataset directory to predict on");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(f);
    if (*train_cmd) return cmd_train(f, false);
    if (*distill_cmd) return cmd_train(f, true);
    if (*reduce_cmd) return cmd_reduce(f);
    if (*eval_cmd) return cmd_eval(f);
    if (*profile_cmd) return cmd_profile(f);
    if (*agree_cmd) return cmd_agree(f);
  } catch (const Error& e) {
    report_error(e.kind(), e.what());
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    report_error("data", e.what());
    return kData;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return kUsage;
  }
  return kUsage;
}
