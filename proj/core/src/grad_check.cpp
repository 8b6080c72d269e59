#include "ucil/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ucil/ot_assign.hpp"

namespace ucil {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

std::string GradCheckReport::summary() const {
  std::ostringstream out;
  out << (passed ? "PASS" : "FAIL") << " tolerance=" << tolerance << " instances=" << instances << '\n';
  for (const auto& g : groups)
    out << "  " << g.name << ": max_rel=" << g.max_relative << " max_abs=" << g.max_absolute
        << " entries=" << g.entries << '\n';
  if (!failing.empty()) {
    out << "  failing:";
    for (const auto& f : failing) out << ' ' << f;
    out << '\n';
  }
  return out.str();
}

namespace {

Matrix random_unit_rows(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m.rowwise().normalized();
}

struct Instance {
  Matrix features;
  Matrix targets;
  ReplaySet replay;
  PrototypeSet protos;
  Projector projector;
  ClassCenters centers;
  CenterRange current;
};

Instance make_instance(const GradCheckSizes& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Instance in;
  in.features = random_unit_rows(rng, s.samples, s.dim);
  in.protos.means = random_unit_rows(rng, s.prototypes, s.dim);
  std::uniform_real_distribution<double> log_sigma(std::log(0.3), std::log(0.8));
  in.protos.log_sigma.resize(s.prototypes);
  for (auto& v : in.protos.log_sigma) v = log_sigma(rng);

  in.projector = s.use_projector ? init_projector(s.dim, s.hidden, s.proj_dim, rng())
                                 : identity_projector(s.dim);
  const Eigen::Index m = in.projector.out_dim();
  in.centers.temperature = 0.1;
  in.centers.centers.resize(0, m);
  if (s.old_classes > 0) in.centers.add_session(s.old_classes, m, rng());
  in.current = in.centers.add_session(s.classes, m, rng());

  // Constant targets, produced the same way training produces them.
  const Matrix log_post = log_posterior(in.features, in.protos);
  in.targets = to_per_sample_targets(sinkhorn_balanced(log_post, 0.5, 3));

  if (s.old_classes > 0 && s.replay > 0) {
    in.replay.features = random_unit_rows(rng, s.replay, s.dim);
    for (int i = 0; i < s.replay; ++i) in.replay.labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(s.old_classes)));
  }
  return in;
}

template <typename Param, typename Grad, typename LossFn>
void compare_group(GroupError& group, Param& param, const Grad& analytic, double h, LossFn&& loss) {
  const double floor = kGradCheckFloor * std::max(1.0, analytic.size() > 0 ? analytic.cwiseAbs().maxCoeff() : 0.0);
  for (Eigen::Index j = 0; j < param.size(); ++j) {
    double& x = param.data()[j];
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.data()[j];
    group.max_relative = std::max(group.max_relative, relative_error(a, numeric, floor));
    group.max_absolute = std::max(group.max_absolute, std::abs(a - numeric));
    ++group.entries;
  }
}

}  // namespace

GradCheckReport grad_check(const GradCheckOptions& options) {
  const auto& s = options.sizes;
  if (s.samples < 1 || s.prototypes < 1 || s.classes < 1 || s.dim < 2 || s.old_classes < 0 || s.replay < 0)
    throw ValidationError("grad_check: bad instance sizes");

  std::vector<GroupError> groups{{"mu"}, {"log_sigma"}, {"projector.w1"}, {"projector.b1"},
                                 {"projector.w2"}, {"projector.b2"}, {"centers"}};
  for (int k = 0; k < options.instances; ++k) {
    Instance in = make_instance(s, mix_seed(options.seed, static_cast<std::uint64_t>(k)));
    const ObjectiveBatch batch{in.features, in.targets, &in.replay, in.current};
    ObjectiveResult result = objective_with_grads(in.protos, in.projector, in.centers, batch, options.weights);
    if (options.tamper) options.tamper(result.grads);
    auto loss = [&] { return evaluate_objective(in.protos, in.projector, in.centers, batch, options.weights).total; };

    const double h = options.step;
    compare_group(groups[0], in.protos.means, result.grads.protos.means, h, loss);
    compare_group(groups[1], in.protos.log_sigma, result.grads.protos.log_sigma, h, loss);
    if (!in.projector.identity) {
      compare_group(groups[2], in.projector.w1, result.grads.head.projector.w1, h, loss);
      compare_group(groups[3], in.projector.b1, result.grads.head.projector.b1, h, loss);
      compare_group(groups[4], in.projector.w2, result.grads.head.projector.w2, h, loss);
      compare_group(groups[5], in.projector.b2, result.grads.head.projector.b2, h, loss);
    }
    compare_group(groups[6], in.centers.centers, result.grads.head.centers, h, loss);
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.instances = options.instances;
  for (auto& g : groups) {
    if (g.entries == 0) continue;
    if (g.max_relative > options.tolerance) {
      report.passed = false;
      report.failing.push_back(g.name);
    }
    report.groups.push_back(std::move(g));
  }
  return report;
}

}  // namespace ucil
