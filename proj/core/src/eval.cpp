#include "ucil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "json.hpp"

namespace ucil {

using nlohmann::json;

std::vector<int> hungarian(const Matrix& cost) {
  if (cost.rows() != cost.cols())
    throw ValidationError("hungarian: cost matrix must be square, got " + std::to_string(cost.rows()) + "x" +
                          std::to_string(cost.cols()));
  if (!cost.allFinite()) throw ValidationError("hungarian: non-finite cost");
  const int k = static_cast<int>(cost.rows());
  if (k == 0) return {};

  // 1-based potentials formulation; column 0 is a virtual source.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(k + 1, 0.0);
  std::vector<int> match(k + 1, 0), way(k + 1, 0);
  for (int row = 1; row <= k; ++row) {
    match[0] = row;
    int col0 = 0;
    std::vector<double> minv(k + 1, inf);
    std::vector<char> used(k + 1, 0);
    do {
      used[col0] = 1;
      const int r0 = match[col0];
      double delta = inf;
      int col1 = 0;
      for (int c = 1; c <= k; ++c) {
        if (used[c]) continue;
        const double cur = cost(r0 - 1, c - 1) - u[r0] - v[c];
        if (cur < minv[c]) {
          minv[c] = cur;
          way[c] = col0;
        }
        if (minv[c] < delta) {
          delta = minv[c];
          col1 = c;
        }
      }
      for (int c = 0; c <= k; ++c) {
        if (used[c]) {
          u[match[c]] += delta;
          v[c] -= delta;
        } else {
          minv[c] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const int col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(k));
  for (int c = 1; c <= k; ++c) assignment[static_cast<std::size_t>(match[c] - 1)] = c - 1;
  return assignment;
}

ClusteringResult clustering_accuracy(const std::vector<int>& predictions, const std::vector<std::uint32_t>& labels,
                                     int total_clusters) {
  if (predictions.size() != labels.size()) throw ValidationError("clustering_accuracy: length mismatch");
  if (predictions.empty()) throw ValidationError("clustering_accuracy: no samples");
  if (total_clusters < 1) throw ValidationError("clustering_accuracy: total_clusters must be >= 1");
  for (int p : predictions)
    if (p < 0 || p >= total_clusters)
      throw ValidationError("clustering_accuracy: prediction " + std::to_string(p) + " outside [0, " +
                            std::to_string(total_clusters) + ")");

  ClusteringResult res;
  std::map<std::uint32_t, int> dense;
  for (auto y : labels) dense.emplace(y, 0);
  for (auto& [label, idx] : dense) {
    idx = static_cast<int>(res.label_ids.size());
    res.label_ids.push_back(label);
  }
  const int size = std::max(total_clusters, static_cast<int>(res.label_ids.size()));
  res.confusion = Eigen::MatrixXi::Zero(size, size);
  for (std::size_t i = 0; i < labels.size(); ++i) ++res.confusion(predictions[i], dense.at(labels[i]));

  const Matrix cost = -res.confusion.cast<double>();
  const auto assignment = hungarian(Matrix(cost));
  std::int64_t matched = 0;
  res.mapping.assign(static_cast<std::size_t>(total_clusters), -1);
  for (int p = 0; p < size; ++p) {
    const int col = assignment[static_cast<std::size_t>(p)];
    matched += res.confusion(p, col);
    if (p < total_clusters && col < static_cast<int>(res.label_ids.size()))
      res.mapping[static_cast<std::size_t>(p)] = res.label_ids[static_cast<std::size_t>(col)];
  }
  res.accuracy = static_cast<double>(matched) / static_cast<double>(labels.size());
  return res;
}

double mapped_accuracy(const std::vector<int>& predictions, const std::vector<std::uint32_t>& labels,
                       const std::vector<std::int64_t>& mapping) {
  if (predictions.size() != labels.size()) throw ValidationError("mapped_accuracy: length mismatch");
  if (predictions.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = static_cast<std::size_t>(predictions[i]);
    if (p < mapping.size() && mapping[p] == static_cast<std::int64_t>(labels[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double forgetting_score(double first_session_accuracy, double final_accuracy) {
  return first_session_accuracy - final_accuracy;
}

double forgetting_score(const std::vector<SessionReport>& reports, MappingMode mode) {
  if (reports.size() < 2) throw ValidationError("forgetting_score: needs at least two evaluated sessions");
  const auto& first = reports.front();
  const auto& last = reports.back();
  if (first.task_accuracy.empty() || last.task_accuracy.empty())
    throw ValidationError("forgetting_score: missing per-task accuracy");
  if (mode == MappingMode::Restricted)
    return forgetting_score(first.first_task_restricted, last.first_task_restricted);
  return forgetting_score(first.task_accuracy.front(), last.task_accuracy.front());
}

std::string report_json(const SessionReport& r) {
  json doc;
  doc["session"] = r.session;
  doc["total_classes"] = r.total_classes;
  doc["pnum"] = r.prototypes;
  doc["acc_overall"] = r.accuracy;
  for (std::size_t t = 0; t < r.task_accuracy.size(); ++t)
    doc["acc_task_" + std::to_string(t + 1)] = r.task_accuracy[t];
  doc["acc_task_1_restricted"] = r.first_task_restricted;
  doc["forgetting"] = r.forgetting ? json(*r.forgetting) : json(nullptr);
  doc["forgetting_restricted"] = r.forgetting_restricted ? json(*r.forgetting_restricted) : json(nullptr);
  doc["mapping"] = r.mapping;
  json confusion = json::array();
  for (Eigen::Index i = 0; i < r.confusion.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < r.confusion.cols(); ++j) row.push_back(r.confusion(i, j));
    confusion.push_back(std::move(row));
  }
  doc["confusion"] = std::move(confusion);
  return doc.dump();
}

SessionReport report_from_json(const std::string& line) {
  SessionReport r;
  try {
    const auto doc = json::parse(line);
    r.session = doc.at("session").get<int>();
    r.total_classes = doc.at("total_classes").get<int>();
    r.prototypes = doc.at("pnum").get<int>();
    r.accuracy = doc.at("acc_overall").get<double>();
    for (int t = 1; doc.contains("acc_task_" + std::to_string(t)); ++t)
      r.task_accuracy.push_back(doc.at("acc_task_" + std::to_string(t)).get<double>());
    r.first_task_restricted = doc.at("acc_task_1_restricted").get<double>();
    if (!doc.at("forgetting").is_null()) r.forgetting = doc.at("forgetting").get<double>();
    if (!doc.at("forgetting_restricted").is_null())
      r.forgetting_restricted = doc.at("forgetting_restricted").get<double>();
    r.mapping = doc.at("mapping").get<std::vector<std::int64_t>>();
    const auto& conf = doc.at("confusion");
    const auto rows = static_cast<Eigen::Index>(conf.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(conf[0].size()) : 0;
    r.confusion = Eigen::MatrixXi::Zero(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) r.confusion(i, j) = conf[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<int>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadSection, std::string("bad session report: ") + e.what());
  }
  return r;
}

}  // namespace ucil
