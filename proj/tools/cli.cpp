#include "cli.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ucil/embedding_io.hpp"
#include "ucil/eval.hpp"
#include "ucil/grad_check.hpp"
#include "ucil/trainer.hpp"

namespace ucil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct SynthArgs {
  SynthSpec spec;
  std::string out;
};

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string profile = "paper";
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> pnum, epochs, batch, eval_every, stop_after;
  std::optional<double> lr, lambda_old, lambda_ga;
  bool fixed_sigma = false, no_sep = false, no_projector = false, no_replay = false, no_align = false;
  bool frozen_old = false, cosine_lr = false, quiet = false;
  std::optional<std::string> memory, variance;
  std::string resume;
};

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string mapping = "global";
  bool as_json = false;
};

struct GradArgs {
  int instances = 20;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  bool no_projector = false;
};

void apply_threads() {
  if (const char* env = std::getenv("UCIL_THREADS")) {
    const int n = std::atoi(env);
    if (n < 1) throw ValidationError("UCIL_THREADS must be a positive integer");
    set_num_threads(n);
  } else {
    set_num_threads(1);
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot write");
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig c;
  if (a.profile == "desk") c = TrainConfig::desk_profile();
  else if (a.profile == "paper") c = TrainConfig::paper_profile();
  else throw ValidationError("--profile must be 'desk' or 'paper'");

  if (!a.config_file.empty()) c = TrainConfig::from_json(read_text(a.config_file), c);

  if (a.seed) c.seed = *a.seed;
  if (a.pnum) c.prototypes = *a.pnum;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch) c.batch_size = *a.batch;
  if (a.eval_every) c.eval_every = *a.eval_every;
  if (a.lr) c.learning_rate = *a.lr;
  if (a.lambda_old) c.lambda_old = *a.lambda_old;
  if (a.lambda_ga) c.lambda_ga = *a.lambda_ga;
  if (a.fixed_sigma) c.trainable_sigma = false;
  if (a.no_sep) c.sep_loss = false;
  if (a.no_projector) c.use_projector = false;
  if (a.no_replay) c.replay = false;
  if (a.no_align) c.align_loss = false;
  if (a.frozen_old) c.freeze_old_centers = true;
  if (a.cosine_lr) c.cosine_lr = true;
  VarianceMode variance = c.memory.variance;
  if (a.variance) {
    if (*a.variance == "scalar") variance = VarianceMode::Scalar;
    else if (*a.variance == "diagonal") variance = VarianceMode::Diagonal;
    else throw ValidationError("--variance must be 'diagonal' or 'scalar'");
  }
  c.memory = parse_memory_policy(a.memory ? *a.memory : memory_policy_string(c.memory), variance);

  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + s + "'");
    c.apply_override(s.substr(0, eq), s.substr(eq + 1));
  }
  c.validate();
  return c;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << v;
  return o.str();
}

json summary_json(const EngineState& state) {
  json sessions = json::array();
  for (const auto& r : state.reports) sessions.push_back(json::parse(report_json(r)));
  json doc{{"sessions", sessions}, {"pnum", state.config.prototypes}, {"tasks_done", state.tasks_done}};
  if (!state.reports.empty()) {
    const auto& last = state.reports.back();
    doc["acc_overall"] = last.accuracy;
    doc["forgetting"] = last.forgetting ? json(*last.forgetting) : json(nullptr);
    doc["forgetting_restricted"] = last.forgetting_restricted ? json(*last.forgetting_restricted) : json(nullptr);
  }
  return doc;
}

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto result = synth_stream(a.spec, a.out);
  out << result.manifest_path.string() << '\n';
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const auto manifest = read_manifest(a.manifest);
  validate_manifest_files(manifest);

  EngineState state;
  if (!a.resume.empty()) {
    state = load_checkpoint(a.resume);
    if (state.dim != manifest.dim)
      throw ValidationError("checkpoint dim " + std::to_string(state.dim) + " does not match manifest dim " +
                            std::to_string(manifest.dim));
  } else {
    state = make_engine_state(resolve_config(a), manifest.dim);
  }
  write_text(dir / "config.json", state.config.to_json() + "\n");

  const auto mode = a.resume.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | mode);
  std::ofstream results(dir / "results.jsonl", std::ios::binary | mode);
  if (!metrics || !results) throw IoError(dir.string(), "cannot open run logs");

  RunOptions options;
  options.checkpoint_path = dir / "checkpoint.ucck";
  options.stop_after = a.stop_after;
  options.hooks.on_epoch = [&](const EpochRecord& r) {
    metrics << epoch_record_json(r) << '\n';
    metrics.flush();
  };
  options.hooks.on_session = [&](const SessionReport& r) {
    results << report_json(r) << '\n';
    results.flush();
    if (!a.quiet) {
      out << "session " << r.session << ": classes=" << r.total_classes << " acc_overall=" << fmt(r.accuracy);
      if (r.forgetting) out << " forgetting=" << fmt(*r.forgetting);
      out << '\n';
    }
  };

  try {
    run_stream(manifest, state, options);
  } catch (const TrainingAbort& abort) {
    const fs::path diag = dir / "diagnostics.txt";
    write_text(diag, abort.diagnostics() + "\n");
    err << "error: " << abort.what() << " (diagnostics: " << diag.string() << ")\n";
    return kExitNumerical;
  }

  write_text(dir / "summary.json", summary_json(state).dump(2) + "\n");
  if (!state.reports.empty()) {
    const auto& last = state.reports.back();
    out << "acc_overall=" << fmt(last.accuracy);
    out << " forgetting=" << (last.forgetting ? fmt(*last.forgetting) : std::string("n/a"));
    out << " pnum=" << state.config.prototypes << '\n';
  }
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const EngineState state = load_checkpoint(a.checkpoint);
  const auto manifest = read_manifest(a.manifest);
  validate_manifest_files(manifest);
  if (manifest.dim != state.dim)
    throw ValidationError("manifest dim " + std::to_string(manifest.dim) + " does not match checkpoint dim " +
                          std::to_string(state.dim));
  if (state.tasks_done < 1) throw ValidationError("checkpoint has no trained sessions");
  const int sessions = std::min(state.tasks_done, static_cast<int>(manifest.tasks.size()));
  const SessionReport r = evaluate_session(manifest, state, sessions);
  const bool restricted = a.mapping == "restricted";

  if (a.as_json) {
    out << report_json(r) << '\n';
    return kExitOk;
  }
  out << "session=" << r.session << " classes=" << r.total_classes << " pnum=" << r.prototypes << '\n';
  out << "acc_overall=" << fmt(r.accuracy) << '\n';
  for (std::size_t t = 0; t < r.task_accuracy.size(); ++t)
    out << "acc_task_" << t + 1 << '=' << fmt(r.task_accuracy[t]) << '\n';
  out << "acc_task_1_restricted=" << fmt(r.first_task_restricted) << '\n';
  const auto& chosen = restricted ? r.forgetting_restricted : r.forgetting;
  out << "forgetting=" << (chosen ? fmt(*chosen) : std::string("n/a")) << " (mapping=" << a.mapping << ")\n";
  out << "forgetting_global=" << (r.forgetting ? fmt(*r.forgetting) : std::string("n/a"))
      << " forgetting_restricted=" << (r.forgetting_restricted ? fmt(*r.forgetting_restricted) : std::string("n/a"))
      << '\n';
  return kExitOk;
}

int cmd_inspect(const std::string& checkpoint, std::ostream& out) {
  const EngineState state = load_checkpoint(checkpoint);
  const auto& memory = state.memory;
  const auto classes = memory.classes();
  const bool exemplars = state.config.memory.kind == MemoryPolicy::Kind::Exemplars;
  out << "memory=" << memory_policy_string(state.config.memory)
      << " variance=" << (state.config.memory.variance == VarianceMode::Scalar ? "scalar" : "diagonal")
      << " dim=" << state.dim << " classes=" << classes.size() << '\n';

  std::array<int, 10> histogram{};
  if (exemplars) {
    std::map<int, int> per_class;
    for (const auto& e : memory.exemplars()) ++per_class[e.class_id];
    out << "class  task  exemplars\n";
    std::map<int, int> task_of;
    for (const auto& e : memory.exemplars()) task_of[e.class_id] = e.task_id + 1;
    for (const auto& [c, n] : per_class)
      out << std::setw(5) << c << ' ' << std::setw(5) << task_of[c] << ' ' << std::setw(10) << n << '\n';
  } else {
    out << "class  task  prototypes  samples  mean_purity\n";
    for (const auto& [c, idx] : memory.by_class()) {
      std::int64_t samples = 0;
      double purity = 0.0;
      for (auto i : idx) {
        const auto& s = memory.stats()[i];
        samples += s.count;
        purity += s.purity;
      }
      const auto& first = memory.stats()[idx.front()];
      out << std::setw(5) << c << ' ' << std::setw(5) << first.task_id + 1 << ' ' << std::setw(11) << idx.size()
          << ' ' << std::setw(8) << samples << ' ' << std::setw(12) << fmt(purity / static_cast<double>(idx.size()))
          << '\n';
    }
    for (const auto& s : memory.stats())
      ++histogram[static_cast<std::size_t>(std::clamp(static_cast<int>(s.purity * 10.0), 0, 9))];
  }
  out << "total_floats=" << memory.stored_floats() << '\n';
  out << "exemplar_equivalents_per_class=" << std::setprecision(4) << std::fixed
      << memory.exemplar_equivalents_per_class(state.dim) << '\n';
  if (!exemplars) {
    out << "purity_histogram:\n";
    for (std::size_t b = 0; b < histogram.size(); ++b) {
      out << "  [" << std::setprecision(1) << b / 10.0 << ", " << (b + 1) / 10.0 << (b == 9 ? "]" : ")") << ' '
          << histogram[b] << '\n';
    }
  }
  return kExitOk;
}

int cmd_grad_check(const GradArgs& a, std::ostream& out) {
  GradCheckOptions options;
  options.instances = a.instances;
  options.tolerance = a.tolerance;
  options.seed = a.seed;
  options.sizes.use_projector = !a.no_projector;
  const auto report = grad_check(options);
  out << report.summary();
  return report.passed ? kExitOk : kExitNumerical;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unsupervised class-incremental clustering engine", "ucil"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ucil 0.1.0");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic spherical-Gaussian task stream");
  s->add_option("--tasks", synth.spec.tasks, "Number of tasks")->capture_default_str();
  s->add_option("--classes", synth.spec.classes_per_task, "Classes per task")->capture_default_str();
  s->add_option("--dim", synth.spec.dim, "Embedding dimension")->capture_default_str();
  s->add_option("--train", synth.spec.train_per_class, "Training samples per class")->capture_default_str();
  s->add_option("--test", synth.spec.test_per_class, "Test samples per class")->capture_default_str();
  s->add_option("--spread", synth.spec.spread, "Cluster noise scale")->capture_default_str();
  s->add_option("--seed", synth.spec.seed, "Generator seed")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required()->envname("UCIL_OUT_DIR");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train on every task of a stream manifest");
  t->add_option("--manifest", train.manifest, "Stream manifest")->required();
  t->add_option("--out", train.out, "Run directory")->required()->envname("UCIL_OUT_DIR");
  t->add_option("--profile", train.profile, "Base profile: paper or desk")
      ->check(CLI::IsMember({"paper", "desk"}))
      ->capture_default_str();
  t->add_option("--config", train.config_file, "JSON config file (unknown keys are errors)");
  t->add_option("--set", train.sets, "Override a config field, key=value (repeatable)");
  t->add_option("--seed", train.seed, "Random seed");
  t->add_option("--pnum", train.pnum, "Prototypes per task");
  t->add_option("--epochs", train.epochs, "Epochs per task");
  t->add_option("--batch", train.batch, "Mini-batch size");
  t->add_option("--lr", train.lr, "Learning rate");
  t->add_option("--lambda-old", train.lambda_old, "Weight of the replay loss");
  t->add_option("--lambda-ga", train.lambda_ga, "Weight of the class-entropy term");
  t->add_option("--eval-every", train.eval_every, "Evaluate every N epochs (0: session end only)");
  t->add_option("--memory", train.memory, "proto or exemplar:K");
  t->add_option("--variance", train.variance, "Stored prototype variance: diagonal or scalar");
  t->add_flag("--fixed-sigma", train.fixed_sigma, "Keep prototype scales at their initial value");
  t->add_flag("--no-sep-loss", train.no_sep, "Disable the separation loss");
  t->add_flag("--no-projector", train.no_projector, "Compare centers with raw features");
  t->add_flag("--no-replay", train.no_replay, "Disable replay and the old-class loss");
  t->add_flag("--no-align", train.no_align, "Disable the granularity-alignment loss");
  t->add_flag("--frozen-old-centers", train.frozen_old, "Freeze centers of earlier sessions");
  t->add_flag("--cosine-lr", train.cosine_lr, "Cosine learning-rate decay within each task");
  t->add_option("--resume", train.resume, "Continue from a checkpoint (its config is used)");
  t->add_option("--stop-after", train.stop_after, "Stop after this many sessions in total");
  t->add_flag("--quiet", train.quiet, "Only print the final line");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest's test splits");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", eval.manifest, "Stream manifest")->required();
  e->add_option("--mapping", eval.mapping, "Forgetting mapping: global or restricted")
      ->check(CLI::IsMember({"global", "restricted"}))
      ->capture_default_str();
  e->add_flag("--json", eval.as_json, "Print the report as one JSON record");

  std::string inspect_path;
  auto* m = app.add_subcommand("inspect-memory", "Summarize the prototype memory of a checkpoint");
  m->add_option("--checkpoint", inspect_path, "Checkpoint file")->required();

  GradArgs grad;
  auto* g = app.add_subcommand("grad-check", "Compare analytic gradients with finite differences");
  g->add_option("--instances", grad.instances, "Random instances")->capture_default_str();
  g->add_option("--tolerance", grad.tolerance, "Max relative error")->capture_default_str();
  g->add_option("--seed", grad.seed, "Instance seed")->capture_default_str();
  g->add_flag("--no-projector", grad.no_projector, "Check the identity-projector variant");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << "ucil 0.1.0\n";
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }

  try {
    apply_threads();
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(train, out, err);
    if (*e) return cmd_eval(eval, out);
    if (*m) return cmd_inspect(inspect_path, out);
    if (*g) return cmd_grad_check(grad, out);
  } catch (const NumericalError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ucil::cli
