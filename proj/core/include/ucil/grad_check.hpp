#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ucil/objective.hpp"

namespace ucil {

/// Shape of the random instances used for gradient checking.
struct GradCheckSizes {
  int samples = 6;        // n <= 8
  int prototypes = 5;     // r <= 6
  int classes = 3;        // current-session centers, k <= 4
  int old_classes = 2;    // centers of earlier sessions (0 disables L_old / L_sep)
  int dim = 8;            // d <= 16
  int hidden = 6;
  int proj_dim = 4;
  int replay = 4;         // replayed samples
  bool use_projector = true;
};

struct GradCheckOptions {
  GradCheckSizes sizes;
  ObjectiveWeights weights;
  double tolerance = 1e-4;
  double step = 1e-4;
  int instances = 20;
  std::uint64_t seed = 0;
  /// Fault injection: called on the analytic gradients before comparison.
  std::function<void(ObjectiveGrads&)> tamper;
};

struct GroupError {
  std::string name;  // "mu", "log_sigma", "projector.w1", ..., "centers"
  double max_relative = 0.0;
  double max_absolute = 0.0;
  std::size_t entries = 0;
};

struct GradCheckReport {
  bool passed = true;
  double tolerance = 0.0;
  int instances = 0;
  std::vector<GroupError> groups;
  std::vector<std::string> failing;  // group names over tolerance

  std::string summary() const;
};

/// Elementwise |a - f| / max(|a|, |f|, floor). grad_check uses
/// floor = kGradCheckFloor * max(1, largest |analytic| entry of the group), so
/// entries that are zero up to cancellation are judged against the group scale.
inline constexpr double kGradCheckFloor = 1e-6;
double relative_error(double analytic, double numeric, double floor = kGradCheckFloor);

/// Compares objective_with_grads against central finite differences of
/// evaluate_objective on seeded random instances, per parameter group.
GradCheckReport grad_check(const GradCheckOptions& options);

}  // namespace ucil
