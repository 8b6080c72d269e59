#pragma once

#include <cstdint>

#include "ucil/common.hpp"

namespace ucil {

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kSigmaMax = 10.0;
inline constexpr double kSigmaInit = 0.1;

/// Fine-grained isotropic Gaussians on the unit sphere. Mixture weights are
/// uniform during training and therefore not stored.
struct PrototypeSet {
  Matrix means;      // r x d, unit rows
  Vector log_sigma;  // r

  Eigen::Index size() const { return means.rows(); }
  Eigen::Index dim() const { return means.cols(); }
  double sigma(Eigen::Index w) const;

  /// Re-projects means onto the sphere and clamps sigma into [kSigmaMin, kSigmaMax].
  void project();
};

/// Means are r distinct rows of `init_batch` when it has at least r rows,
/// otherwise uniform random unit vectors. sigma = kSigmaInit.
PrototypeSet init_prototypes(int count, int dim, std::uint64_t seed, const Matrix* init_batch = nullptr);

/// Logits s(w,i) = 2 (z_i . mu_w - 1) / sigma_w^2, r x n.
Matrix proto_logits(const Matrix& features, const PrototypeSet& protos);

/// Column-wise log-softmax of proto_logits: log p(w | z_i), r x n.
Matrix log_posterior(const Matrix& features, const PrototypeSet& protos);

/// Cross-entropy -(1/n) sum_i sum_w targets(i,w) log_post(w,i).
/// `targets` is n x r with rows summing to one.
double proto_loss(const Matrix& targets, const Matrix& log_post);

struct ProtoGrads {
  Matrix means;      // r x d
  Vector log_sigma;  // r
};

/// Analytic gradient of proto_loss through the posterior, with the targets
/// held constant.
ProtoGrads proto_grads(const Matrix& features, const PrototypeSet& protos, const Matrix& targets);

/// Same, reusing an already computed log-posterior.
ProtoGrads proto_grads(const Matrix& features, const PrototypeSet& protos, const Matrix& targets,
                       const Matrix& log_post);

/// argmax_w p(w | z_i) for each row of `features`; ties resolve to the lower index.
std::vector<int> hard_assign(const Matrix& features, const PrototypeSet& protos);

}  // namespace ucil
