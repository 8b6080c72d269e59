#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ucil/classifier.hpp"
#include "ucil/common.hpp"
#include "ucil/embedding_io.hpp"
#include "ucil/eval.hpp"
#include "ucil/memory.hpp"
#include "ucil/objective.hpp"
#include "ucil/proto_model.hpp"

namespace ucil {

struct TrainConfig {
  int prototypes = 1000;  // pNum, per task
  int epochs = 200;
  int batch_size = 512;
  double learning_rate = 1e-3;
  double lambda_old = 10.0;
  double lambda_ga = 4.0;
  double temperature = 0.1;
  double epsilon = 0.05;
  int sinkhorn_iters = 3;
  int hidden_dim = 768;
  int proj_dim = 128;
  std::uint64_t seed = 0;

  // Ablation switches.
  bool trainable_sigma = true;
  bool use_projector = true;
  bool align_loss = true;
  bool sep_loss = true;
  bool replay = true;
  bool freeze_old_centers = false;
  /// Keep projector and center optimizer moments from one session to the next.
  bool persist_moments = true;
  MemoryPolicy memory;
  /// New-session centers: "kmeans++" projects k-means++ seed samples of the
  /// session's training features, "random" draws uniform unit vectors.
  std::string center_init = "kmeans++";
  int replay_per_class = 0;  // 0: max(1, ceil(batch_size / k_total))

  bool cosine_lr = false;
  int eval_every = 0;  // epochs between periodic evaluations; 0 = session end only

  static TrainConfig paper_profile();
  /// pNum 50, 50 epochs, batch 128: minutes on a laptop for d = 128.
  static TrainConfig desk_profile();

  void validate() const;
  ObjectiveWeights objective_weights() const;

  /// Canonical JSON text (sorted keys, every field present).
  std::string to_json() const;
  /// Strict parse: unknown keys are errors; missing keys keep the values of `base`.
  static TrainConfig from_json(const std::string& text, const TrainConfig& base);
  static TrainConfig from_json(const std::string& text);
  /// Applies "key=value" overrides using the JSON field names.
  void apply_override(const std::string& key, const std::string& value);
};

std::string memory_policy_string(const MemoryPolicy& policy);  // "proto" or "exemplar:K"
MemoryPolicy parse_memory_policy(const std::string& text, VarianceMode variance);

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
  std::int64_t step = 0;

  void resize(std::size_t n) {
    first.resize(n, 0.0);
    second.resize(n, 0.0);
  }
};

/// Bias-corrected Adam on a flat parameter block. Increments `moments.step`.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments, double lr,
               const AdamHyper& hyper = {});

template <typename Params, typename Grads>
void adam_step(Eigen::DenseBase<Params>& params, const Eigen::DenseBase<Grads>& grads, AdamMoments& moments,
               double lr, const AdamHyper& hyper = {}) {
  if (params.size() != grads.size()) throw ValidationError("adam_step: shape mismatch");
  moments.resize(static_cast<std::size_t>(params.size()));
  const auto g = grads.derived().eval();
  adam_step(std::span<double>(params.derived().data(), static_cast<std::size_t>(params.size())),
            std::span<const double>(g.data(), static_cast<std::size_t>(g.size())), moments, lr, hyper);
}

// ---------------------------------------------------------------------------
// Engine state

struct EpochRecord {
  int task = 0;   // 0-based
  int epoch = 0;  // 0-based
  int batches = 0;
  LossTerms loss;  // batch means
  std::optional<double> accuracy;  // periodic evaluation, when enabled
};

std::string epoch_record_json(const EpochRecord& record);
EpochRecord epoch_record_from_json(const std::string& line);

struct EngineState {
  TrainConfig config;
  int dim = 0;
  int tasks_done = 0;
  Projector projector;
  ClassCenters centers;
  PrototypeMemory memory;
  /// Prototypes of the most recent session (kept for inspection; memory holds the statistics).
  PrototypeSet last_prototypes;

  AdamMoments w1_moments, b1_moments, w2_moments, b2_moments, center_moments;

  std::vector<SessionReport> reports;
  std::vector<EpochRecord> metrics;
};

EngineState make_engine_state(const TrainConfig& config, int dim);

/// Thrown when a loss term turns non-finite; carries the location and the term values.
class TrainingAbort : public NumericalError {
 public:
  TrainingAbort(int task, int epoch, int batch, const LossTerms& loss);
  int task, epoch, batch;
  LossTerms loss;
  std::string diagnostics() const;
};

struct BatchEvent {
  int task;
  int epoch;
  int batch;
  const LossTerms& loss;
};

struct TrainHooks {
  std::function<void(const BatchEvent&)> on_batch;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const SessionReport&)> on_session;
};

/// Trains session `task` (0-based) on its training split, consolidates it into
/// memory, evaluates on every test split seen so far and returns the report.
SessionReport train_task(const StreamManifest& manifest, int task, EngineState& state, const TrainHooks& hooks = {});

/// Task-id-free evaluation of the current state on test splits 0..sessions-1.
/// `history` supplies the first-session numbers for the forgetting score.
SessionReport evaluate_session(const StreamManifest& manifest, const EngineState& state, int sessions);

struct RunOptions {
  TrainHooks hooks;
  /// When set, the checkpoint is rewritten after every session.
  std::optional<std::filesystem::path> checkpoint_path;
  /// Stop after this many sessions in total (for resumable runs).
  std::optional<int> stop_after;
};

/// Trains every remaining task of the manifest, starting from `state`.
std::vector<SessionReport> run_stream(const StreamManifest& manifest, EngineState& state, const RunOptions& options = {});
EngineState run_stream(const StreamManifest& manifest, const TrainConfig& config, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints: "UCCK" | u32 version | u32 sections | {u32 name_len, name, u64 size, bytes}...

inline constexpr char kCheckpointMagic[4] = {'U', 'C', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const EngineState& state);
EngineState load_checkpoint(const std::filesystem::path& path);

}  // namespace ucil
