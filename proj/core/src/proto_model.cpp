#include "ucil/proto_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace ucil {

namespace {

void check_shapes(const Matrix& features, const PrototypeSet& protos) {
  if (features.cols() != protos.dim())
    throw ValidationError("prototype dim " + std::to_string(protos.dim()) + " vs feature dim " +
                          std::to_string(features.cols()));
  if (protos.size() < 1) throw ValidationError("empty prototype set");
}

}  // namespace

double PrototypeSet::sigma(Eigen::Index w) const { return std::exp(log_sigma[w]); }

void PrototypeSet::project() {
  for (Eigen::Index w = 0; w < means.rows(); ++w) {
    const double norm = means.row(w).norm();
    if (norm > 0.0) means.row(w) /= norm;
  }
  log_sigma = log_sigma.cwiseMax(std::log(kSigmaMin)).cwiseMin(std::log(kSigmaMax));
}

PrototypeSet init_prototypes(int count, int dim, std::uint64_t seed, const Matrix* init_batch) {
  if (count < 1 || dim < 2) throw ValidationError("init_prototypes: need r >= 1 and d >= 2");
  PrototypeSet protos;
  protos.means.resize(count, dim);
  protos.log_sigma = Vector::Constant(count, std::log(kSigmaInit));
  std::mt19937_64 rng(mix_seed(seed, 0x70726f74));

  if (init_batch != nullptr && init_batch->rows() >= count) {
    if (init_batch->cols() != dim) throw ValidationError("init_prototypes: init batch has wrong dim");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(init_batch->rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    for (int w = 0; w < count; ++w) {
      const auto remaining = order.size() - static_cast<std::size_t>(w);
      const auto pick = static_cast<std::size_t>(w) + static_cast<std::size_t>(rng() % remaining);
      std::swap(order[static_cast<std::size_t>(w)], order[pick]);
      protos.means.row(w) = init_batch->row(order[static_cast<std::size_t>(w)]);
    }
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int w = 0; w < count; ++w)
      for (int j = 0; j < dim; ++j) protos.means(w, j) = normal(rng);
  }
  protos.project();
  return protos;
}

Matrix proto_logits(const Matrix& features, const PrototypeSet& protos) {
  check_shapes(features, protos);
  Matrix logits = protos.means * features.transpose();  // r x n
  for (Eigen::Index w = 0; w < logits.rows(); ++w) {
    const double inv_var = std::exp(-2.0 * protos.log_sigma[w]);
    logits.row(w) = (2.0 * inv_var) * (logits.row(w).array() - 1.0);
  }
  return logits;
}

Matrix log_posterior(const Matrix& features, const PrototypeSet& protos) {
  Matrix logits = proto_logits(features, protos);
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const double peak = logits.col(i).maxCoeff();
    const double lse = peak + std::log((logits.col(i).array() - peak).exp().sum());
    logits.col(i).array() -= lse;
  }
  return logits;
}

double proto_loss(const Matrix& targets, const Matrix& log_post) {
  if (targets.rows() != log_post.cols() || targets.cols() != log_post.rows())
    throw ValidationError("proto_loss: targets must be n x r for an r x n log-posterior");
  if (targets.rows() == 0) throw ValidationError("proto_loss: empty batch");
  const double total = (targets.array() * log_post.transpose().array()).sum();
  return -total / static_cast<double>(targets.rows());
}

ProtoGrads proto_grads(const Matrix& features, const PrototypeSet& protos, const Matrix& targets) {
  return proto_grads(features, protos, targets, log_posterior(features, protos));
}

ProtoGrads proto_grads(const Matrix& features, const PrototypeSet& protos, const Matrix& targets,
                       const Matrix& log_post) {
  check_shapes(features, protos);
  const Eigen::Index r = protos.size();
  const Eigen::Index n = features.rows();
  if (targets.rows() != n || targets.cols() != r)
    throw ValidationError("proto_grads: targets must be n x r");

  // dL/ds = (p * sum_w t - t) / n, laid out r x n.
  const Vector target_mass = targets.rowwise().sum();
  Matrix dlogits = log_post.array().exp().matrix();
  for (Eigen::Index i = 0; i < n; ++i) dlogits.col(i) *= target_mass[i];
  dlogits -= targets.transpose();
  dlogits /= static_cast<double>(n);

  const Matrix logits = proto_logits(features, protos);
  ProtoGrads grads;
  grads.means = dlogits * features;  // r x d
  grads.log_sigma.resize(r);
  for (Eigen::Index w = 0; w < r; ++w) {
    const double inv_var = std::exp(-2.0 * protos.log_sigma[w]);
    grads.means.row(w) *= 2.0 * inv_var;
    // ds/dlog_sigma = -2 s
    grads.log_sigma[w] = -2.0 * dlogits.row(w).dot(logits.row(w));
  }
  return grads;
}

std::vector<int> hard_assign(const Matrix& features, const PrototypeSet& protos) {
  const Matrix logits = proto_logits(features, protos);
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Eigen::Index best = 0;
    logits.col(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace ucil
