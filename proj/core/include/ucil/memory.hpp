#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "ucil/classifier.hpp"
#include "ucil/common.hpp"
#include "ucil/proto_model.hpp"

namespace ucil {

enum class VarianceMode { Diagonal, Scalar };

inline constexpr double kVarianceFloor = 1e-6;

/// Frozen statistics of one prototype after its task finished.
struct ProtoStat {
  Vector mean;  // d
  Vector var;   // d entries (Diagonal) or a single entry (Scalar)
  std::int64_t count = 0;
  double purity = 0.0;
  int class_id = 0;  // global center index
  int task_id = 0;

  double variance(Eigen::Index j) const { return var.size() == 1 ? var[0] : var[j]; }
};

/// A raw stored feature, used only by the exemplar baseline.
struct Exemplar {
  Vector feature;
  int class_id = 0;
  int task_id = 0;
};

/// How a finished task is remembered.
struct MemoryPolicy {
  enum class Kind { Prototypes, Exemplars };
  Kind kind = Kind::Prototypes;
  VarianceMode variance = VarianceMode::Diagonal;
  int exemplars_per_class = 0;  // Kind::Exemplars only
};

class PrototypeMemory {
 public:
  void add(std::vector<ProtoStat> stats);
  void add(std::vector<Exemplar> exemplars);

  const std::vector<ProtoStat>& stats() const { return stats_; }
  const std::vector<Exemplar>& exemplars() const { return exemplars_; }
  bool empty() const { return stats_.empty() && exemplars_.empty(); }

  /// Sorted distinct class ids present in memory.
  std::vector<int> classes() const;
  int num_classes() const { return static_cast<int>(classes().size()); }

  /// Prototype indices grouped by class id.
  std::map<int, std::vector<std::size_t>> by_class() const;

  /// Floats held: mean + variance + (count, purity) per prototype, d per exemplar.
  std::size_t stored_floats() const;
  /// stored_floats / dim / classes: memory expressed in raw-feature units per class.
  double exemplar_equivalents_per_class(Eigen::Index dim) const;

 private:
  std::vector<ProtoStat> stats_;
  std::vector<Exemplar> exemplars_;
};

struct ConsolidationInput {
  const Matrix& features;  // task training features, unit rows
  const PrototypeSet& protos;
  const Projector& projector;
  const ClassCenters& centers;
  CenterRange task_classes;  // centers of the finished task
  int task_id = 0;
  VarianceMode variance = VarianceMode::Diagonal;
};

/// Hard-assigns every feature to its most probable prototype and its
/// predicted class (over the task's centers), then summarizes each non-empty
/// prototype. Majority ties go to the lower class id.
std::vector<ProtoStat> consolidate_task(const ConsolidationInput& in);

/// Up to `per_class` random training features for each predicted class.
std::vector<Exemplar> select_exemplars(const Matrix& features, const Projector& projector,
                                       const ClassCenters& centers, CenterRange task_classes, int task_id,
                                       int per_class, std::uint64_t seed);

struct ReplaySet {
  Matrix features;  // unit rows
  std::vector<int> labels;
  /// Classes whose prototypes all had zero weight and were drawn uniformly.
  std::vector<int> uniform_fallback;

  Eigen::Index size() const { return features.rows(); }
};

/// Draws exactly `per_class` unit-norm features for every stored class.
/// Prototype w of class y is picked with probability proportional to
/// count_w * purity_w, then z ~ N(mean_w, diag(var_w)) is renormalized.
ReplaySet sample_old(const PrototypeMemory& memory, int per_class, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Overlap-reduction losses on precomputed logits (n x k_total, temperature included)

/// Mean negative log-likelihood of `labels` under the softmax over all centers.
double old_loss(const Matrix& logits, const std::vector<int>& labels);
Matrix old_loss_logit_grad(const Matrix& logits, const std::vector<int>& labels);

/// Mean negative log of the softmax mass that falls on `current`.
double sep_loss(const Matrix& logits, CenterRange current);
Matrix sep_loss_logit_grad(const Matrix& logits, CenterRange current);

/// Convenience forms that run the head. old_loss on an empty set and
/// sep_loss without old centers contribute 0.
double old_loss(const ReplaySet& replay, const Projector& projector, const ClassCenters& centers);
double sep_loss(const Matrix& features, const Projector& projector, const ClassCenters& centers);

inline double reduct_loss(double old_term, double sep_term, double lambda_old) {
  return lambda_old * old_term + sep_term;
}

/// Per-old-class replay count for one step: max(1, ceil(batch / k_total)).
int replay_per_class(std::size_t batch_size, Eigen::Index total_classes);

}  // namespace ucil
