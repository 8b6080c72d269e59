#include "ucil/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <random>
#include <string>

namespace ucil {

namespace {

double safe_log(double x) { return std::log(std::max(x, kLogFloor)); }

// d/dx [x * safe_log(x)]
double xlogx_grad(double x) { return safe_log(x) + (x >= kLogFloor ? 1.0 : 0.0); }

double xlogx(double x) { return x > 0.0 ? x * safe_log(x) : 0.0; }

}  // namespace

Projector init_projector(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
  if (in_dim < 1 || hidden < 1 || out_dim < 1) throw ValidationError("projector dimensions must be positive");
  std::mt19937_64 rng(mix_seed(seed, 0x70726f6a));
  auto fill = [&rng](auto& m, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  Projector p;
  p.in_dim = in_dim;
  p.w1.resize(hidden, in_dim);
  p.b1.resize(hidden);
  p.w2.resize(out_dim, hidden);
  p.b2.resize(out_dim);
  fill(p.w1, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  fill(p.b1, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  fill(p.w2, 1.0 / std::sqrt(static_cast<double>(hidden)));
  fill(p.b2, 1.0 / std::sqrt(static_cast<double>(hidden)));
  return p;
}

Projector identity_projector(int dim) {
  Projector p;
  p.identity = true;
  p.in_dim = dim;
  return p;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

ProjectorCache projector_forward(const Matrix& features, const Projector& projector) {
  if (features.cols() != projector.in_dim)
    throw ValidationError("projector expects dim " + std::to_string(projector.in_dim) + ", got " +
                          std::to_string(features.cols()));
  ProjectorCache cache;
  Matrix raw;
  if (projector.identity) {
    raw = features;
  } else {
    cache.pre = features * projector.w1.transpose();
    cache.pre.rowwise() += projector.b1.transpose();
    cache.hidden = cache.pre.unaryExpr([](double x) { return gelu(x); });
    raw = cache.hidden * projector.w2.transpose();
    raw.rowwise() += projector.b2.transpose();
  }
  cache.norms = raw.rowwise().norm();
  if ((cache.norms.array() <= 0.0).any()) throw NumericalError("projector produced a zero vector");
  cache.embed = raw.array().colwise() / cache.norms.array();
  return cache;
}

// ---------------------------------------------------------------------------

CenterRange ClassCenters::task_range(int session) const {
  if (session < 0 || session >= sessions()) throw ValidationError("no session " + std::to_string(session));
  return {task_offsets[static_cast<std::size_t>(session)], task_offsets[static_cast<std::size_t>(session) + 1]};
}

CenterRange ClassCenters::old_range() const {
  if (sessions() == 0) return {0, 0};
  return {0, task_offsets[task_offsets.size() - 2]};
}

CenterRange ClassCenters::add_session(int count, Eigen::Index dim, std::uint64_t seed) {
  if (count < 1) throw ValidationError("a session needs at least one class");
  if (size() > 0 && centers.cols() != dim) throw ValidationError("center dimension mismatch");
  std::mt19937_64 rng(mix_seed(seed, 0x63656e74));
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index begin = size();
  Matrix grown(begin + count, dim);
  if (begin > 0) grown.topRows(begin) = centers;
  for (Eigen::Index c = begin; c < begin + count; ++c) {
    for (Eigen::Index j = 0; j < dim; ++j) grown(c, j) = normal(rng);
    grown.row(c).normalize();
  }
  centers = std::move(grown);
  task_offsets.push_back(size());
  return {begin, size()};
}

CenterRange ClassCenters::add_session(const Matrix& rows) {
  if (rows.rows() < 1) throw ValidationError("a session needs at least one class");
  if (size() > 0 && centers.cols() != rows.cols()) throw ValidationError("center dimension mismatch");
  const Eigen::Index begin = size();
  Matrix grown(begin + rows.rows(), rows.cols());
  if (begin > 0) grown.topRows(begin) = centers;
  grown.bottomRows(rows.rows()) = rows.rowwise().normalized();
  centers = std::move(grown);
  task_offsets.push_back(size());
  return {begin, size()};
}

std::vector<Eigen::Index> kmeanspp_seeds(const Matrix& rows, int count, std::uint64_t seed) {
  const Eigen::Index n = rows.rows();
  if (count < 1 || n < count) throw ValidationError("kmeanspp_seeds: need at least `count` rows");
  std::mt19937_64 rng(mix_seed(seed, 0x6b6d7070));
  const int trials = std::max(8, 2 + static_cast<int>(std::log(static_cast<double>(count))));
  auto distance_to = [&](Eigen::Index c) -> Vector {
    return (1.0 - (rows * rows.row(c).transpose()).array()).max(0.0).matrix();
  };

  std::vector<Eigen::Index> picks{static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n))};
  Vector dist = distance_to(picks.back());
  while (static_cast<int>(picks.size()) < count) {
    const double total = dist.sum();
    if (!(total > 0.0)) {
      // Fewer distinct rows than centers: take the first unused rows.
      for (Eigen::Index i = 0; static_cast<int>(picks.size()) < count; ++i)
        if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
      break;
    }
    // Greedy variant: draw a few D^2 candidates, keep the one that lowers the potential most.
    Eigen::Index best = -1;
    double best_potential = std::numeric_limits<double>::infinity();
    Vector best_dist;
    for (int trial = 0; trial < trials; ++trial) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      Eigen::Index cand = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= dist[i];
        if (u < 0.0) {
          cand = i;
          break;
        }
      }
      Vector merged = dist.cwiseMin(distance_to(cand));
      const double potential = merged.sum();
      if (potential < best_potential) {
        best_potential = potential;
        best = cand;
        best_dist = std::move(merged);
      }
    }
    picks.push_back(best);
    dist = std::move(best_dist);
  }
  return picks;
}

void ClassCenters::project() {
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double norm = centers.row(c).norm();
    if (norm > 0.0) centers.row(c) /= norm;
  }
}

HeadForward head_forward(const Matrix& features, const Projector& projector, const ClassCenters& centers) {
  if (centers.size() == 0) throw ValidationError("no class centers");
  if (centers.centers.cols() != projector.out_dim())
    throw ValidationError("center dim " + std::to_string(centers.centers.cols()) + " vs projector output " +
                          std::to_string(projector.out_dim()));
  HeadForward out;
  out.projection = projector_forward(features, projector);
  out.center_norms = centers.centers.rowwise().norm();
  out.unit_centers = centers.centers.array().colwise() / out.center_norms.array();
  out.logits = out.projection.embed * out.unit_centers.transpose() / centers.temperature;
  return out;
}

HeadGrads head_backward(const Matrix& features, const HeadForward& fwd, const Matrix& dlogits,
                        const Projector& projector, const ClassCenters& centers) {
  const double inv_tau = 1.0 / centers.temperature;
  const Matrix& embed = fwd.projection.embed;
  const Matrix d_embed = dlogits * fwd.unit_centers * inv_tau;        // n x m
  const Matrix d_unit_centers = dlogits.transpose() * embed * inv_tau;  // k x m

  HeadGrads grads;
  // Backprop through x / |x|: (d - u (u . d)) / |x|
  grads.centers = d_unit_centers;
  for (Eigen::Index c = 0; c < grads.centers.rows(); ++c) {
    const double along = fwd.unit_centers.row(c).dot(d_unit_centers.row(c));
    grads.centers.row(c) = (d_unit_centers.row(c) - along * fwd.unit_centers.row(c)) / fwd.center_norms[c];
  }
  if (projector.identity) return grads;

  Matrix d_raw = d_embed;
  for (Eigen::Index i = 0; i < d_raw.rows(); ++i) {
    const double along = embed.row(i).dot(d_embed.row(i));
    d_raw.row(i) = (d_embed.row(i) - along * embed.row(i)) / fwd.projection.norms[i];
  }
  grads.projector.w2 = d_raw.transpose() * fwd.projection.hidden;
  grads.projector.b2 = d_raw.colwise().sum().transpose();
  Matrix d_pre = d_raw * projector.w2;
  d_pre.array() *= fwd.projection.pre.unaryExpr([](double x) { return gelu_derivative(x); }).array();
  grads.projector.w1 = d_pre.transpose() * features;
  grads.projector.b1 = d_pre.colwise().sum().transpose();
  return grads;
}

Matrix softmax_columns(const Matrix& logits, CenterRange range) {
  if (range.size() < 1) throw ValidationError("softmax over an empty center subset");
  if (range.begin < 0 || range.end > logits.cols()) throw ValidationError("center subset out of range");
  Matrix probs = logits.middleCols(range.begin, range.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double peak = probs.row(i).maxCoeff();
    probs.row(i) = (probs.row(i).array() - peak).exp();
    probs.row(i) /= probs.row(i).sum();
  }
  return probs;
}

Matrix class_posterior(const Matrix& features, const Projector& projector, const ClassCenters& centers,
                       CenterRange range) {
  return softmax_columns(head_forward(features, projector, centers).logits, range);
}

std::vector<int> predict_classes(const Matrix& features, const Projector& projector,
                                 const ClassCenters& centers) {
  return predict_classes(features, projector, centers, centers.all());
}

std::vector<int> predict_classes(const Matrix& features, const Projector& projector,
                                 const ClassCenters& centers, CenterRange range) {
  if (range.size() < 1) throw ValidationError("prediction over an empty center subset");
  const Matrix logits = head_forward(features, projector, centers).logits;
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).segment(range.begin, range.size()).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(range.begin + best);
  }
  return out;
}

// ---------------------------------------------------------------------------

JointTable joint_table(const Matrix& proto_targets, const Matrix& class_probs) {
  if (proto_targets.rows() != class_probs.rows())
    throw ValidationError("joint_table: W has " + std::to_string(proto_targets.rows()) + " rows, Y has " +
                          std::to_string(class_probs.rows()));
  if (proto_targets.rows() == 0) throw ValidationError("joint_table: empty batch");
  JointTable t;
  t.joint = proto_targets.transpose() * class_probs / static_cast<double>(proto_targets.rows());
  t.proto_mass = t.joint.rowwise().sum();
  t.class_mass = t.joint.colwise().sum().transpose();
  return t;
}

double conditional_entropy(const JointTable& t) {
  double h = 0.0;
  for (Eigen::Index w = 0; w < t.joint.rows(); ++w)
    for (Eigen::Index y = 0; y < t.joint.cols(); ++y)
      h -= xlogx(t.joint(w, y)) - t.joint(w, y) * safe_log(t.proto_mass[w]);
  return h;
}

double class_entropy(const JointTable& t) {
  double h = 0.0;
  for (Eigen::Index y = 0; y < t.class_mass.size(); ++y) h -= xlogx(t.class_mass[y]);
  return h;
}

double mutual_information(const JointTable& t) { return class_entropy(t) - conditional_entropy(t); }

double align_loss(const JointTable& t, double lambda_ga) {
  return conditional_entropy(t) - lambda_ga * class_entropy(t);
}

Matrix align_loss_joint_grad(const JointTable& t, double lambda_ga) {
  Matrix grad(t.joint.rows(), t.joint.cols());
  for (Eigen::Index w = 0; w < grad.rows(); ++w) {
    const double pw = t.proto_mass[w];
    const double proto_term = safe_log(pw) + (pw >= kLogFloor ? 1.0 : 0.0);
    for (Eigen::Index y = 0; y < grad.cols(); ++y)
      grad(w, y) = -xlogx_grad(t.joint(w, y)) + proto_term + lambda_ga * xlogx_grad(t.class_mass[y]);
  }
  return grad;
}

Matrix align_logit_grad(const Matrix& proto_targets, const Matrix& class_probs, const JointTable& t,
                        double lambda_ga) {
  const Matrix d_joint = align_loss_joint_grad(t, lambda_ga);
  const Matrix d_probs = proto_targets * d_joint / static_cast<double>(proto_targets.rows());  // n x k
  // Softmax backward: y * (dy - <y, dy>)
  Matrix d_logits = class_probs.cwiseProduct(d_probs);
  const Vector inner = d_logits.rowwise().sum();
  for (Eigen::Index i = 0; i < d_logits.rows(); ++i) d_logits.row(i) -= inner[i] * class_probs.row(i);
  return d_logits;
}

ClassGivenProto class_given_proto(const JointTable& t) {
  ClassGivenProto out;
  out.probs.resize(t.joint.rows(), t.joint.cols());
  out.empty.assign(static_cast<std::size_t>(t.joint.rows()), false);
  for (Eigen::Index w = 0; w < t.joint.rows(); ++w) {
    const double pw = t.joint.row(w).sum();
    if (pw < kLogFloor) {
      out.probs.row(w).setConstant(1.0 / static_cast<double>(t.joint.cols()));
      out.empty[static_cast<std::size_t>(w)] = true;
    } else {
      out.probs.row(w) = t.joint.row(w) / pw;
    }
  }
  return out;
}

}  // namespace ucil
