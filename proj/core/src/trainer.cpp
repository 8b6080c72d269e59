#include "ucil/trainer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "ucil/ot_assign.hpp"

namespace ucil {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

TrainConfig TrainConfig::paper_profile() { return TrainConfig{}; }

TrainConfig TrainConfig::desk_profile() {
  TrainConfig c;
  c.prototypes = 50;
  c.epochs = 50;
  c.batch_size = 128;
  return c;
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ValidationError(std::string("config: ") + name + " must be positive");
  };
  positive(prototypes, "prototypes");
  positive(epochs, "epochs");
  positive(batch_size, "batch_size");
  positive(learning_rate, "learning_rate");
  positive(temperature, "temperature");
  positive(epsilon, "epsilon");
  positive(sinkhorn_iters, "sinkhorn_iters");
  positive(hidden_dim, "hidden_dim");
  positive(proj_dim, "proj_dim");
  if (lambda_old < 0.0 || lambda_ga < 0.0) throw ValidationError("config: loss weights must be >= 0");
  if (replay_per_class < 0 || eval_every < 0) throw ValidationError("config: counts must be >= 0");
  if (center_init != "kmeans++" && center_init != "random")
    throw ValidationError("config: center_init must be 'kmeans++' or 'random'");
  if (memory.kind == MemoryPolicy::Kind::Exemplars && memory.exemplars_per_class < 1)
    throw ValidationError("config: exemplar memory needs a positive per-class budget");
}

ObjectiveWeights TrainConfig::objective_weights() const {
  ObjectiveWeights w;
  w.lambda_ga = lambda_ga;
  w.lambda_old = lambda_old;
  w.align = align_loss;
  w.sep = sep_loss;
  w.old = replay && lambda_old > 0.0;
  return w;
}

std::string memory_policy_string(const MemoryPolicy& policy) {
  if (policy.kind == MemoryPolicy::Kind::Exemplars) return "exemplar:" + std::to_string(policy.exemplars_per_class);
  return "proto";
}

MemoryPolicy parse_memory_policy(const std::string& text, VarianceMode variance) {
  MemoryPolicy p;
  p.variance = variance;
  if (text == "proto") return p;
  const std::string prefix = "exemplar:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const int k = std::stoi(text.substr(prefix.size()), &used);
      if (used == text.size() - prefix.size() && k > 0) {
        p.kind = MemoryPolicy::Kind::Exemplars;
        p.exemplars_per_class = k;
        return p;
      }
    } catch (const std::exception&) {
    }
  }
  throw ValidationError("memory must be 'proto' or 'exemplar:K', got '" + text + "'");
}

namespace {

json config_to_json(const TrainConfig& c) {
  return json{{"prototypes", c.prototypes},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"lambda_old", c.lambda_old},
              {"lambda_ga", c.lambda_ga},
              {"temperature", c.temperature},
              {"epsilon", c.epsilon},
              {"sinkhorn_iters", c.sinkhorn_iters},
              {"hidden_dim", c.hidden_dim},
              {"proj_dim", c.proj_dim},
              {"seed", c.seed},
              {"trainable_sigma", c.trainable_sigma},
              {"use_projector", c.use_projector},
              {"align_loss", c.align_loss},
              {"sep_loss", c.sep_loss},
              {"replay", c.replay},
              {"freeze_old_centers", c.freeze_old_centers},
              {"persist_moments", c.persist_moments},
              {"memory", memory_policy_string(c.memory)},
              {"variance", c.memory.variance == VarianceMode::Scalar ? "scalar" : "diagonal"},
              {"center_init", c.center_init},
              {"replay_per_class", c.replay_per_class},
              {"cosine_lr", c.cosine_lr},
              {"eval_every", c.eval_every}};
}

template <typename T>
void read_field(const json& doc, const char* key, T& out) {
  if (!doc.contains(key)) return;
  try {
    out = doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config: bad value for '") + key + "'");
  }
}

}  // namespace

std::string TrainConfig::to_json() const { return config_to_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text, const TrainConfig& base) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("config: expected a JSON object");
  const json known = config_to_json(base);
  for (const auto& [key, _] : doc.items())
    if (!known.contains(key)) throw ValidationError("config: unknown key '" + key + "'");

  TrainConfig c = base;
  read_field(doc, "prototypes", c.prototypes);
  read_field(doc, "epochs", c.epochs);
  read_field(doc, "batch_size", c.batch_size);
  read_field(doc, "learning_rate", c.learning_rate);
  read_field(doc, "lambda_old", c.lambda_old);
  read_field(doc, "lambda_ga", c.lambda_ga);
  read_field(doc, "temperature", c.temperature);
  read_field(doc, "epsilon", c.epsilon);
  read_field(doc, "sinkhorn_iters", c.sinkhorn_iters);
  read_field(doc, "hidden_dim", c.hidden_dim);
  read_field(doc, "proj_dim", c.proj_dim);
  read_field(doc, "seed", c.seed);
  read_field(doc, "trainable_sigma", c.trainable_sigma);
  read_field(doc, "use_projector", c.use_projector);
  read_field(doc, "align_loss", c.align_loss);
  read_field(doc, "sep_loss", c.sep_loss);
  read_field(doc, "replay", c.replay);
  read_field(doc, "freeze_old_centers", c.freeze_old_centers);
  read_field(doc, "persist_moments", c.persist_moments);
  read_field(doc, "center_init", c.center_init);
  read_field(doc, "replay_per_class", c.replay_per_class);
  read_field(doc, "cosine_lr", c.cosine_lr);
  read_field(doc, "eval_every", c.eval_every);

  std::string variance = c.memory.variance == VarianceMode::Scalar ? "scalar" : "diagonal";
  read_field(doc, "variance", variance);
  if (variance != "scalar" && variance != "diagonal")
    throw ValidationError("config: variance must be 'diagonal' or 'scalar'");
  std::string memory = memory_policy_string(c.memory);
  read_field(doc, "memory", memory);
  c.memory = parse_memory_policy(memory, variance == "scalar" ? VarianceMode::Scalar : VarianceMode::Diagonal);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const std::string& text) { return from_json(text, TrainConfig{}); }

void TrainConfig::apply_override(const std::string& key, const std::string& value) {
  json patch;
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  // Memory policies and variance modes are plain strings on the command line.
  if ((key == "memory" || key == "variance" || key == "center_init") && !parsed.is_string()) parsed = value;
  patch[key] = parsed;
  *this = from_json(patch.dump(), *this);
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments, double lr,
               const AdamHyper& hyper) {
  if (params.size() != grads.size()) throw ValidationError("adam_step: shape mismatch");
  moments.resize(params.size());
  ++moments.step;
  const double t = static_cast<double>(moments.step);
  const double correct1 = 1.0 - std::pow(hyper.beta1, t);
  const double correct2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    moments.first[i] = hyper.beta1 * moments.first[i] + (1.0 - hyper.beta1) * g;
    moments.second[i] = hyper.beta2 * moments.second[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = moments.first[i] / correct1;
    const double v_hat = moments.second[i] / correct2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

// ---------------------------------------------------------------------------

std::string epoch_record_json(const EpochRecord& r) {
  json doc{{"task", r.task},       {"epoch", r.epoch},         {"batches", r.batches},
           {"L_proto", r.loss.proto}, {"L_align", r.loss.align}, {"L_old", r.loss.old},
           {"L_sep", r.loss.sep},     {"L_reduct", r.loss.reduct}, {"total", r.loss.total}};
  if (r.accuracy) doc["acc"] = *r.accuracy;
  return doc.dump();
}

EpochRecord epoch_record_from_json(const std::string& line) {
  EpochRecord r;
  try {
    const auto doc = json::parse(line);
    r.task = doc.at("task").get<int>();
    r.epoch = doc.at("epoch").get<int>();
    r.batches = doc.at("batches").get<int>();
    r.loss.proto = doc.at("L_proto").get<double>();
    r.loss.align = doc.at("L_align").get<double>();
    r.loss.old = doc.at("L_old").get<double>();
    r.loss.sep = doc.at("L_sep").get<double>();
    r.loss.reduct = doc.at("L_reduct").get<double>();
    r.loss.total = doc.at("total").get<double>();
    if (doc.contains("acc")) r.accuracy = doc.at("acc").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadSection, std::string("bad metric record: ") + e.what());
  }
  return r;
}

TrainingAbort::TrainingAbort(int task_, int epoch_, int batch_, const LossTerms& loss_)
    : NumericalError("non-finite loss at task " + std::to_string(task_) + ", epoch " + std::to_string(epoch_) +
                     ", batch " + std::to_string(batch_)),
      task(task_),
      epoch(epoch_),
      batch(batch_),
      loss(loss_) {}

std::string TrainingAbort::diagnostics() const {
  std::ostringstream out;
  out << "task=" << task << " epoch=" << epoch << " batch=" << batch << " L_proto=" << loss.proto
      << " L_align=" << loss.align << " L_old=" << loss.old << " L_sep=" << loss.sep << " total=" << loss.total;
  return out.str();
}

EngineState make_engine_state(const TrainConfig& config, int dim) {
  config.validate();
  if (dim < 2) throw ValidationError("feature dimension must be >= 2");
  EngineState s;
  s.config = config;
  s.dim = dim;
  s.projector = config.use_projector ? init_projector(dim, config.hidden_dim, config.proj_dim, mix_seed(config.seed, 1))
                                     : identity_projector(dim);
  s.centers.temperature = config.temperature;
  s.centers.centers.resize(0, s.projector.out_dim());
  return s;
}

// ---------------------------------------------------------------------------

SessionReport evaluate_session(const StreamManifest& manifest, const EngineState& state, int sessions) {
  if (sessions < 1 || sessions > static_cast<int>(manifest.tasks.size()))
    throw ValidationError("evaluate_session: " + std::to_string(sessions) + " sessions requested, manifest has " +
                          std::to_string(manifest.tasks.size()));
  if (state.centers.size() == 0) throw ValidationError("evaluate_session: model has no classes yet");

  std::vector<int> predictions;
  Labels labels;
  std::vector<std::size_t> task_begin;
  for (int t = 0; t < sessions; ++t) {
    const auto set = load_labeled(manifest.resolve(manifest.tasks[static_cast<std::size_t>(t)].test));
    if (set.features.cols() != state.dim)
      throw ValidationError("test split of task " + std::to_string(t) + " has dim " +
                            std::to_string(set.features.cols()) + ", model expects " + std::to_string(state.dim));
    const auto pred = predict_classes(set.features, state.projector, state.centers);
    task_begin.push_back(predictions.size());
    predictions.insert(predictions.end(), pred.begin(), pred.end());
    labels.insert(labels.end(), set.labels.begin(), set.labels.end());
  }
  task_begin.push_back(predictions.size());

  const int k_total = static_cast<int>(state.centers.size());
  const auto overall = clustering_accuracy(predictions, labels, k_total);
  SessionReport report;
  report.session = sessions;
  report.total_classes = k_total;
  report.prototypes = state.config.prototypes;
  report.accuracy = overall.accuracy;
  report.mapping = overall.mapping;
  report.confusion = overall.confusion;
  for (int t = 0; t < sessions; ++t) {
    const auto b = static_cast<std::ptrdiff_t>(task_begin[static_cast<std::size_t>(t)]);
    const auto e = static_cast<std::ptrdiff_t>(task_begin[static_cast<std::size_t>(t) + 1]);
    const std::vector<int> p(predictions.begin() + b, predictions.begin() + e);
    const Labels y(labels.begin() + b, labels.begin() + e);
    report.task_accuracy.push_back(mapped_accuracy(p, y, overall.mapping));
    if (t == 0) report.first_task_restricted = clustering_accuracy(p, y, k_total).accuracy;
  }
  if (sessions >= 2 && !state.reports.empty()) {
    const auto& first = state.reports.front();
    report.forgetting = forgetting_score(first.task_accuracy.front(), report.task_accuracy.front());
    report.forgetting_restricted = forgetting_score(first.first_task_restricted, report.first_task_restricted);
  }
  return report;
}

namespace {

struct ProtoMoments {
  AdamMoments means, log_sigma;
};

bool all_finite(const ObjectiveGrads& g) {
  return g.protos.means.allFinite() && g.protos.log_sigma.allFinite() && g.head.centers.allFinite() &&
         g.head.projector.w1.allFinite() && g.head.projector.b1.allFinite() && g.head.projector.w2.allFinite() &&
         g.head.projector.b2.allFinite();
}

}  // namespace

SessionReport train_task(const StreamManifest& manifest, int task, EngineState& state, const TrainHooks& hooks) {
  const TrainConfig& cfg = state.config;
  if (task != state.tasks_done)
    throw ValidationError("train_task: expected task " + std::to_string(state.tasks_done) + ", got " +
                          std::to_string(task));
  if (task < 0 || task >= static_cast<int>(manifest.tasks.size()))
    throw ValidationError("train_task: manifest has no task " + std::to_string(task));
  if (manifest.dim != state.dim)
    throw ValidationError("train_task: manifest dim " + std::to_string(manifest.dim) + " vs model dim " +
                          std::to_string(state.dim));

  const auto& entry = manifest.tasks[static_cast<std::size_t>(task)];
  const Matrix train = load_unlabeled(manifest.resolve(entry.train));
  if (train.cols() != state.dim) throw ValidationError("train_task: training split has the wrong dimension");

  const auto t = static_cast<std::uint64_t>(task);
  const std::uint64_t center_seed = mix_seed(cfg.seed, 2, t);
  CenterRange current;
  if (cfg.center_init == "kmeans++" && train.rows() >= entry.num_classes) {
    const auto picks = kmeanspp_seeds(train, entry.num_classes, center_seed);
    current = state.centers.add_session(projector_forward(train(picks, Eigen::all), state.projector).embed);
  } else {
    current = state.centers.add_session(entry.num_classes, state.projector.out_dim(), center_seed);
  }
  if (!cfg.persist_moments)
    for (AdamMoments* m : {&state.w1_moments, &state.b1_moments, &state.w2_moments, &state.b2_moments,
                           &state.center_moments})
      *m = AdamMoments{};
  state.center_moments.resize(static_cast<std::size_t>(state.centers.centers.size()));
  PrototypeSet protos = init_prototypes(cfg.prototypes, state.dim, mix_seed(cfg.seed, 3, t), &train);
  ProtoMoments proto_moments;

  const ObjectiveWeights weights = cfg.objective_weights();
  const bool replay_on = weights.old && !state.memory.empty();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.learning_rate;
    if (cfg.cosine_lr) lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));

    BatchIterator batches(train, static_cast<std::size_t>(cfg.batch_size), mix_seed(cfg.seed, 4, t),
                          static_cast<std::uint64_t>(epoch));
    EpochRecord record;
    record.task = task;
    record.epoch = epoch;
    for (int b = 0; !batches.done(); ++b) {
      const FeatureBatch batch = batches.next();
      const Matrix log_post = log_posterior(batch.features, protos);
      const Matrix targets = to_per_sample_targets(sinkhorn_balanced(log_post, cfg.epsilon, cfg.sinkhorn_iters));

      ReplaySet replay;
      if (replay_on) {
        const int per_class = cfg.replay_per_class > 0
                                  ? cfg.replay_per_class
                                  : replay_per_class(static_cast<std::size_t>(cfg.batch_size), state.centers.size());
        replay = sample_old(state.memory, per_class,
                            mix_seed(cfg.seed, 5, t, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)));
      }

      const ObjectiveBatch inputs{batch.features, targets, replay_on ? &replay : nullptr, current};
      ObjectiveResult result = objective_with_grads(protos, state.projector, state.centers, inputs, weights);
      if (!result.loss.finite() || !all_finite(result.grads)) throw TrainingAbort(task, epoch, b, result.loss);
      if (hooks.on_batch) hooks.on_batch(BatchEvent{task, epoch, b, result.loss});

      adam_step(protos.means, result.grads.protos.means, proto_moments.means, lr);
      if (cfg.trainable_sigma) adam_step(protos.log_sigma, result.grads.protos.log_sigma, proto_moments.log_sigma, lr);
      if (!state.projector.identity) {
        adam_step(state.projector.w1, result.grads.head.projector.w1, state.w1_moments, lr);
        adam_step(state.projector.b1, result.grads.head.projector.b1, state.b1_moments, lr);
        adam_step(state.projector.w2, result.grads.head.projector.w2, state.w2_moments, lr);
        adam_step(state.projector.b2, result.grads.head.projector.b2, state.b2_moments, lr);
      }
      const Eigen::Index frozen = cfg.freeze_old_centers ? current.begin : 0;
      const Matrix kept = state.centers.centers.topRows(frozen);
      adam_step(state.centers.centers, result.grads.head.centers, state.center_moments, lr);
      protos.project();
      state.centers.project();
      state.centers.centers.topRows(frozen) = kept;

      record.batches += 1;
      record.loss.proto += result.loss.proto;
      record.loss.align += result.loss.align;
      record.loss.old += result.loss.old;
      record.loss.sep += result.loss.sep;
      record.loss.reduct += result.loss.reduct;
      record.loss.total += result.loss.total;
    }
    const double nb = record.batches;
    record.loss.proto /= nb;
    record.loss.align /= nb;
    record.loss.old /= nb;
    record.loss.sep /= nb;
    record.loss.reduct /= nb;
    record.loss.total /= nb;
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs)
      record.accuracy = evaluate_session(manifest, state, task + 1).accuracy;
    state.metrics.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);
  }

  if (cfg.memory.kind == MemoryPolicy::Kind::Exemplars) {
    state.memory.add(select_exemplars(train, state.projector, state.centers, current, task,
                                      cfg.memory.exemplars_per_class, mix_seed(cfg.seed, 6, t)));
  } else {
    state.memory.add(consolidate_task(
        {train, protos, state.projector, state.centers, current, task, cfg.memory.variance}));
  }
  state.last_prototypes = std::move(protos);
  state.tasks_done = task + 1;

  SessionReport report = evaluate_session(manifest, state, task + 1);
  state.reports.push_back(report);
  if (hooks.on_session) hooks.on_session(report);
  return report;
}

std::vector<SessionReport> run_stream(const StreamManifest& manifest, EngineState& state, const RunOptions& options) {
  std::vector<SessionReport> out;
  const int total = static_cast<int>(manifest.tasks.size());
  const int last = options.stop_after ? std::min(*options.stop_after, total) : total;
  for (int t = state.tasks_done; t < last; ++t) {
    out.push_back(train_task(manifest, t, state, options.hooks));
    if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, state);
  }
  return out;
}

EngineState run_stream(const StreamManifest& manifest, const TrainConfig& config, const RunOptions& options) {
  EngineState state = make_engine_state(config, manifest.dim);
  run_stream(manifest, state, options);
  return state;
}

}  // namespace ucil
