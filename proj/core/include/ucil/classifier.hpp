#pragma once

#include <cstdint>
#include <vector>

#include "ucil/common.hpp"

namespace ucil {

/// Two-layer MLP d -> hidden -> out with a GELU between the layers. With
/// `identity` set the projector is bypassed (g(z) = z) and has no parameters.
struct Projector {
  Matrix w1;  // hidden x d
  Vector b1;
  Matrix w2;  // out x hidden
  Vector b2;
  bool identity = false;
  Eigen::Index in_dim = 0;

  Eigen::Index out_dim() const { return identity ? in_dim : w2.rows(); }
  Eigen::Index hidden_dim() const { return identity ? 0 : w1.rows(); }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, seeded.
Projector init_projector(int in_dim, int hidden, int out_dim, std::uint64_t seed);
Projector identity_projector(int dim);

struct ProjectorGrads {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

/// Everything the backward pass needs from one forward pass.
struct ProjectorCache {
  Matrix pre;      // n x hidden, first affine output
  Matrix hidden;   // n x hidden, after GELU
  Vector norms;    // n, norm of the raw output
  Matrix embed;    // n x out, unit rows
};

ProjectorCache projector_forward(const Matrix& features, const Projector& projector);

double gelu(double x);
double gelu_derivative(double x);

/// Half-open range of center rows.
struct CenterRange {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
  bool contains(Eigen::Index c) const { return c >= begin && c < end; }
};

/// Class centers for every class discovered so far, grouped by session.
struct ClassCenters {
  Matrix centers;                         // k_total x m
  std::vector<Eigen::Index> task_offsets{0};  // boundaries, size = sessions + 1
  double temperature = 0.1;

  Eigen::Index size() const { return centers.rows(); }
  int sessions() const { return static_cast<int>(task_offsets.size()) - 1; }
  CenterRange task_range(int session) const;
  CenterRange all() const { return {0, size()}; }
  CenterRange old_range() const;  // everything before the newest session

  /// Appends `count` random unit centers for a new session.
  CenterRange add_session(int count, Eigen::Index dim, std::uint64_t seed);
  /// Appends the given rows (normalized) as a new session.
  CenterRange add_session(const Matrix& rows);
  void project();
};

/// Greedy k-means++ seeding on unit rows with cosine distance. The first pick
/// is uniform; each next pick is the best of max(8, 2 + ln(count)) candidates drawn
/// proportionally to (1 - max cosine to the picks so far), judged by the
/// summed distance that remains. Returns `count` distinct row indices.
std::vector<Eigen::Index> kmeanspp_seeds(const Matrix& rows, int count, std::uint64_t seed);

/// Forward pass of the whole head on one block of features.
struct HeadForward {
  ProjectorCache projection;
  Vector center_norms;        // k_total
  Matrix unit_centers;        // k_total x m
  Matrix logits;              // n x k_total, cosine / temperature
};

HeadForward head_forward(const Matrix& features, const Projector& projector, const ClassCenters& centers);

struct HeadGrads {
  ProjectorGrads projector;
  Matrix centers;  // k_total x m
};

/// Backpropagates dL/dlogits (n x k_total) to the projector parameters and centers.
HeadGrads head_backward(const Matrix& features, const HeadForward& forward, const Matrix& dlogits,
                        const Projector& projector, const ClassCenters& centers);

/// Row softmax of logits restricted to `range`; n x range.size().
Matrix softmax_columns(const Matrix& logits, CenterRange range);

/// p(y | z) over the centers in `range`.
Matrix class_posterior(const Matrix& features, const Projector& projector, const ClassCenters& centers,
                       CenterRange range);

/// argmax over all centers; the task-free prediction used for evaluation.
std::vector<int> predict_classes(const Matrix& features, const Projector& projector,
                                 const ClassCenters& centers);
std::vector<int> predict_classes(const Matrix& features, const Projector& projector,
                                 const ClassCenters& centers, CenterRange range);

// ---------------------------------------------------------------------------
// Granularity alignment

inline constexpr double kLogFloor = 1e-12;

struct JointTable {
  Matrix joint;        // r x k, sums to 1
  Vector proto_mass;   // p(w), r
  Vector class_mass;   // p(y), k
};

/// J = W^T Y / n for per-sample targets W (n x r) and class posteriors Y (n x k).
JointTable joint_table(const Matrix& proto_targets, const Matrix& class_probs);

/// H(Y|W) - lambda_ga H(Y).
double align_loss(const JointTable& table, double lambda_ga);

/// dL_align / dJ, r x k.
Matrix align_loss_joint_grad(const JointTable& table, double lambda_ga);

/// dL_align / dlogits for the logits that produced `class_probs` by softmax
/// (the temperature is already inside the logits). W gets no gradient.
Matrix align_logit_grad(const Matrix& proto_targets, const Matrix& class_probs, const JointTable& table,
                        double lambda_ga);

double conditional_entropy(const JointTable& table);  // H(Y|W)
double class_entropy(const JointTable& table);        // H(Y)
double mutual_information(const JointTable& table);   // I(W;Y)

struct ClassGivenProto {
  Matrix probs;             // r x k, rows sum to 1
  std::vector<bool> empty;  // p(w) < kLogFloor, row returned uniform
};
ClassGivenProto class_given_proto(const JointTable& table);

}  // namespace ucil
