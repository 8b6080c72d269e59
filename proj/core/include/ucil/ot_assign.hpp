#pragma once

#include "ucil/common.hpp"

namespace ucil {

/// Balanced soft assignment of n samples to r prototypes.
struct AssignmentPlan {
  Matrix plan;  // r x n, entries >= 0, column sums exactly 1/n
  double epsilon = 0.0;
  int iterations = 0;

  Eigen::Index prototypes() const { return plan.rows(); }
  Eigen::Index samples() const { return plan.cols(); }
};

/// Entropic OT between uniform prototype mass (1/r) and uniform sample mass
/// (1/n) with kernel exp(log_posterior / epsilon), solved by log-domain
/// Sinkhorn-Knopp. Each iteration rescales rows then columns, so the returned
/// plan is column-exact and row-balanced up to the iteration budget.
AssignmentPlan sinkhorn_balanced(const Matrix& log_posterior, double epsilon, int iterations);

/// n x r matrix n * plan^T: row i is the target distribution of sample i.
Matrix to_per_sample_targets(const AssignmentPlan& plan);

/// max_w |row_sum_w - 1/r| / (1/r)
double row_marginal_error(const AssignmentPlan& plan);
/// max_i |col_sum_i - 1/n| / (1/n)
double column_marginal_error(const AssignmentPlan& plan);

/// -sum Q log Q, with 0 log 0 = 0.
double plan_entropy(const Matrix& plan);

}  // namespace ucil
