#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ucil/common.hpp"

namespace ucil {

/// Minimum-cost perfect matching on a square cost matrix (O(k^3) shortest
/// augmenting paths with potentials). Returns assignment[row] = column.
std::vector<int> hungarian(const Matrix& cost);

struct ClusteringResult {
  double accuracy = 0.0;
  /// Predicted cluster id -> true label, for every predicted id in [0, k_total).
  std::vector<std::int64_t> mapping;
  /// Rows: predicted cluster, columns: dense true-label index (see label_ids).
  Eigen::MatrixXi confusion;
  /// Dense column index -> original label value.
  std::vector<std::uint32_t> label_ids;
};

/// Builds the contingency table (padded square), matches clusters to labels
/// with hungarian on negated counts, and reports matched / n.
ClusteringResult clustering_accuracy(const std::vector<int>& predictions, const std::vector<std::uint32_t>& labels,
                                     int total_clusters);

/// Accuracy of `predictions` on a subset of samples under a fixed mapping.
double mapped_accuracy(const std::vector<int>& predictions, const std::vector<std::uint32_t>& labels,
                       const std::vector<std::int64_t>& mapping);

enum class MappingMode { Global, Restricted };

struct SessionReport {
  int session = 0;            // 1-based
  int total_classes = 0;
  int prototypes = 0;         // pNum used in this session
  double accuracy = 0.0;      // overall discovery accuracy on all test splits seen so far
  std::vector<double> task_accuracy;  // per original task, global mapping
  /// Accuracy on the first task's classes computed with a mapping fitted on those samples only.
  double first_task_restricted = 0.0;
  std::optional<double> forgetting;
  std::optional<double> forgetting_restricted;
  std::vector<std::int64_t> mapping;
  Eigen::MatrixXi confusion;
};

/// first-session accuracy on the first task's classes minus the same measure
/// after the last session. Not clamped: negative values are backward transfer.
double forgetting_score(double first_session_accuracy, double final_accuracy);

/// Uses reports.front() and reports.back(); needs at least two sessions.
double forgetting_score(const std::vector<SessionReport>& reports, MappingMode mode = MappingMode::Global);

/// Machine-readable one-line JSON record with fixed field names
/// (session, acc_overall, acc_task_i, forgetting, ...).
std::string report_json(const SessionReport& report);
SessionReport report_from_json(const std::string& line);

}  // namespace ucil
