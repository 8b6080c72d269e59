#include "ucil/ot_assign.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace ucil {

namespace {

// log(sum_j exp(x_j)) over a strided range, two passes for stability.
template <typename Expr>
double log_sum_exp(const Expr& x) {
  const double peak = x.maxCoeff();
  if (!std::isfinite(peak)) return peak;
  double acc = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) acc += std::exp(x(j) - peak);
  return peak + std::log(acc);
}

}  // namespace

AssignmentPlan sinkhorn_balanced(const Matrix& log_posterior, double epsilon, int iterations) {
  if (!(epsilon > 0.0)) throw ValidationError("sinkhorn: epsilon must be > 0");
  if (iterations < 1) throw ValidationError("sinkhorn: iterations must be >= 1");
  const Eigen::Index r = log_posterior.rows();
  const Eigen::Index n = log_posterior.cols();
  if (r < 1 || n < 1) throw ValidationError("sinkhorn: empty cost matrix");
  if (!log_posterior.allFinite()) throw ValidationError("sinkhorn: non-finite log-posterior");

  const Matrix kernel = log_posterior / epsilon;
  const double log_row_mass = -std::log(static_cast<double>(r));
  const double log_col_mass = -std::log(static_cast<double>(n));
  Vector row_scale = Vector::Zero(r);
  Vector col_scale = Vector::Zero(n);

  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index w = 0; w < r; ++w)
      row_scale[w] = log_row_mass - log_sum_exp(kernel.row(w).transpose() + col_scale);
    for (Eigen::Index i = 0; i < n; ++i)
      col_scale[i] = log_col_mass - log_sum_exp(kernel.col(i) + row_scale);
  }

  AssignmentPlan out;
  out.epsilon = epsilon;
  out.iterations = iterations;
  out.plan.resize(r, n);
  for (Eigen::Index w = 0; w < r; ++w)
    for (Eigen::Index i = 0; i < n; ++i) out.plan(w, i) = std::exp(kernel(w, i) + row_scale[w] + col_scale[i]);

  // Remove the rounding left by the last column step.
  const double target = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sum = out.plan.col(i).sum();
    if (!(sum > 0.0) || !std::isfinite(sum))
      throw NumericalError("sinkhorn: column " + std::to_string(i) + " has mass " + std::to_string(sum));
    out.plan.col(i) *= target / sum;
  }
  if (!out.plan.allFinite()) throw NumericalError("sinkhorn: non-finite plan");
  return out;
}

Matrix to_per_sample_targets(const AssignmentPlan& plan) {
  Matrix targets = plan.plan.transpose() * static_cast<double>(plan.samples());
  // Exact row normalization; the plan's columns already hold 1/n up to rounding.
  for (Eigen::Index i = 0; i < targets.rows(); ++i) targets.row(i) /= targets.row(i).sum();
  return targets;
}

double row_marginal_error(const AssignmentPlan& plan) {
  const double target = 1.0 / static_cast<double>(plan.prototypes());
  return ((plan.plan.rowwise().sum().array() - target).abs() / target).maxCoeff();
}

double column_marginal_error(const AssignmentPlan& plan) {
  const double target = 1.0 / static_cast<double>(plan.samples());
  return ((plan.plan.colwise().sum().array() - target).abs() / target).maxCoeff();
}

double plan_entropy(const Matrix& plan) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < plan.size(); ++i) {
    const double q = plan.data()[i];
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

}  // namespace ucil
