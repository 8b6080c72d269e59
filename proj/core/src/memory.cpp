#include "ucil/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <string>

namespace ucil {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double row_log_sum_exp(const Matrix& logits, Eigen::Index i, CenterRange range) {
  const auto seg = logits.row(i).segment(range.begin, range.size());
  const double peak = seg.maxCoeff();
  return peak + std::log((seg.array() - peak).exp().sum());
}

}  // namespace

void PrototypeMemory::add(std::vector<ProtoStat> stats) {
  for (auto& s : stats) {
    if (s.count <= 0) continue;
    if (s.purity < 0.0 || s.purity > 1.0) throw ValidationError("purity outside [0, 1]");
    stats_.push_back(std::move(s));
  }
}

void PrototypeMemory::add(std::vector<Exemplar> exemplars) {
  for (auto& e : exemplars) exemplars_.push_back(std::move(e));
}

std::vector<int> PrototypeMemory::classes() const {
  std::set<int> ids;
  for (const auto& s : stats_) ids.insert(s.class_id);
  for (const auto& e : exemplars_) ids.insert(e.class_id);
  return {ids.begin(), ids.end()};
}

std::map<int, std::vector<std::size_t>> PrototypeMemory::by_class() const {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < stats_.size(); ++i) out[stats_[i].class_id].push_back(i);
  return out;
}

std::size_t PrototypeMemory::stored_floats() const {
  std::size_t total = 0;
  for (const auto& s : stats_) total += static_cast<std::size_t>(s.mean.size() + s.var.size()) + 2;
  for (const auto& e : exemplars_) total += static_cast<std::size_t>(e.feature.size());
  return total;
}

double PrototypeMemory::exemplar_equivalents_per_class(Eigen::Index dim) const {
  const int k = num_classes();
  if (k == 0 || dim <= 0) return 0.0;
  return static_cast<double>(stored_floats()) / static_cast<double>(dim) / static_cast<double>(k);
}

// ---------------------------------------------------------------------------

std::vector<ProtoStat> consolidate_task(const ConsolidationInput& in) {
  const Matrix& z = in.features;
  if (z.rows() == 0) throw ValidationError("consolidate_task: task has no features");
  const auto proto_of = hard_assign(z, in.protos);
  const auto class_of = predict_classes(z, in.projector, in.centers, in.task_classes);
  const Eigen::Index r = in.protos.size();
  const Eigen::Index d = z.cols();

  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(r));
  for (Eigen::Index i = 0; i < z.rows(); ++i) members[static_cast<std::size_t>(proto_of[static_cast<std::size_t>(i)])].push_back(i);

  std::vector<ProtoStat> out;
  for (Eigen::Index w = 0; w < r; ++w) {
    const auto& idx = members[static_cast<std::size_t>(w)];
    if (idx.empty()) continue;
    ProtoStat s;
    s.count = static_cast<std::int64_t>(idx.size());
    s.task_id = in.task_id;
    s.mean = Vector::Zero(d);
    for (auto i : idx) s.mean += z.row(i).transpose();
    s.mean /= static_cast<double>(idx.size());
    Vector var = Vector::Zero(d);
    for (auto i : idx) var.array() += (z.row(i).transpose() - s.mean).array().square();
    var /= static_cast<double>(idx.size());
    var = var.cwiseMax(kVarianceFloor);
    if (in.variance == VarianceMode::Scalar)
      s.var = Vector::Constant(1, var.mean());
    else
      s.var = std::move(var);

    std::map<int, std::int64_t> votes;
    for (auto i : idx) ++votes[class_of[static_cast<std::size_t>(i)]];
    std::int64_t best = -1;
    for (const auto& [cls, n] : votes)  // ascending class id, so strict > keeps the lower id on ties
      if (n > best) {
        best = n;
        s.class_id = cls;
      }
    s.purity = static_cast<double>(best) / static_cast<double>(idx.size());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Exemplar> select_exemplars(const Matrix& features, const Projector& projector,
                                       const ClassCenters& centers, CenterRange task_classes, int task_id,
                                       int per_class, std::uint64_t seed) {
  if (features.rows() == 0) throw ValidationError("select_exemplars: task has no features");
  if (per_class < 1) throw ValidationError("select_exemplars: per-class budget must be >= 1");
  const auto class_of = predict_classes(features, projector, centers, task_classes);
  std::map<int, std::vector<Eigen::Index>> pools;
  for (Eigen::Index i = 0; i < features.rows(); ++i) pools[class_of[static_cast<std::size_t>(i)]].push_back(i);

  std::mt19937_64 rng(mix_seed(seed, 0x6578656d));
  std::vector<Exemplar> out;
  for (auto& [cls, pool] : pools) {
    const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(per_class));
    for (std::size_t j = 0; j < take; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng() % (pool.size() - j));
      std::swap(pool[j], pool[pick]);
      out.push_back({features.row(pool[j]).transpose(), cls, task_id});
    }
  }
  return out;
}

ReplaySet sample_old(const PrototypeMemory& memory, int per_class, std::uint64_t seed) {
  if (memory.empty()) throw ValidationError("sample_old: memory is empty");
  if (per_class < 1) throw ValidationError("sample_old: per-class count must be >= 1");
  const auto classes = memory.classes();
  const Eigen::Index dim =
      memory.stats().empty() ? memory.exemplars().front().feature.size() : memory.stats().front().mean.size();

  ReplaySet out;
  out.features.resize(static_cast<Eigen::Index>(classes.size()) * per_class, dim);
  out.labels.reserve(static_cast<std::size_t>(out.features.rows()));
  std::mt19937_64 rng(mix_seed(seed, 0x7265706c));
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto grouped = memory.by_class();
  std::map<int, std::vector<std::size_t>> exemplar_pools;
  for (std::size_t i = 0; i < memory.exemplars().size(); ++i)
    exemplar_pools[memory.exemplars()[i].class_id].push_back(i);

  Eigen::Index row = 0;
  Vector z(dim);
  for (int cls : classes) {
    auto it = grouped.find(cls);
    if (it == grouped.end()) {
      const auto& pool = exemplar_pools.at(cls);
      for (int s = 0; s < per_class; ++s, ++row) {
        out.features.row(row) = memory.exemplars()[pool[rng() % pool.size()]].feature.transpose();
        out.labels.push_back(cls);
      }
      continue;
    }
    const auto& members = it->second;
    std::vector<double> cumulative(members.size());
    double total = 0.0;
    for (std::size_t j = 0; j < members.size(); ++j) {
      const auto& st = memory.stats()[members[j]];
      total += static_cast<double>(st.count) * st.purity;
      cumulative[j] = total;
    }
    const bool uniform = !(total > 0.0);
    if (uniform) out.uniform_fallback.push_back(cls);

    for (int s = 0; s < per_class; ++s, ++row) {
      std::size_t pick;
      if (uniform) {
        pick = static_cast<std::size_t>(rng() % members.size());
      } else {
        const double u = uniform01(rng) * total;
        pick = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
        pick = std::min(pick, members.size() - 1);
      }
      const auto& st = memory.stats()[members[pick]];
      for (Eigen::Index j = 0; j < dim; ++j) z[j] = st.mean[j] + std::sqrt(st.variance(j)) * normal(rng);
      const double norm = z.norm();
      out.features.row(row) = (norm > 0.0 ? Vector(z / norm) : st.mean.normalized()).transpose();
      out.labels.push_back(cls);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

double old_loss(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
    throw ValidationError("old_loss: label count mismatch");
  if (labels.empty()) return 0.0;
  const CenterRange all{0, logits.cols()};
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw ValidationError("old_loss: label " + std::to_string(y) + " has no center");
    total += row_log_sum_exp(logits, i, all) - logits(i, y);
  }
  return total / static_cast<double>(labels.size());
}

Matrix old_loss_logit_grad(const Matrix& logits, const std::vector<int>& labels) {
  Matrix grad = Matrix::Zero(logits.rows(), logits.cols());
  if (labels.empty()) return grad;
  grad = softmax_columns(logits, {0, logits.cols()});
  for (Eigen::Index i = 0; i < logits.rows(); ++i) grad(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  return grad / static_cast<double>(labels.size());
}

double sep_loss(const Matrix& logits, CenterRange current) {
  if (logits.rows() == 0 || current.size() == logits.cols()) return 0.0;
  const CenterRange all{0, logits.cols()};
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    total += row_log_sum_exp(logits, i, all) - row_log_sum_exp(logits, i, current);
  return total / static_cast<double>(logits.rows());
}

Matrix sep_loss_logit_grad(const Matrix& logits, CenterRange current) {
  Matrix grad = Matrix::Zero(logits.rows(), logits.cols());
  if (logits.rows() == 0 || current.size() == logits.cols()) return grad;
  grad = softmax_columns(logits, {0, logits.cols()});
  grad.middleCols(current.begin, current.size()) -= softmax_columns(logits, current);
  return grad / static_cast<double>(logits.rows());
}

double old_loss(const ReplaySet& replay, const Projector& projector, const ClassCenters& centers) {
  if (replay.size() == 0) return 0.0;
  return old_loss(head_forward(replay.features, projector, centers).logits, replay.labels);
}

double sep_loss(const Matrix& features, const Projector& projector, const ClassCenters& centers) {
  if (centers.old_range().size() == 0) return 0.0;
  const auto current = centers.task_range(centers.sessions() - 1);
  return sep_loss(head_forward(features, projector, centers).logits, current);
}

int replay_per_class(std::size_t batch_size, Eigen::Index total_classes) {
  if (total_classes <= 0) return 1;
  const auto k = static_cast<std::size_t>(total_classes);
  return static_cast<int>(std::max<std::size_t>(1, (batch_size + k - 1) / k));
}

}  // namespace ucil
