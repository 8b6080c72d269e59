#include "ucil/objective.hpp"

#include <cmath>

namespace ucil {

namespace {

HeadGrads zero_head_grads(const Projector& projector, const ClassCenters& centers) {
  HeadGrads g;
  g.centers = Matrix::Zero(centers.centers.rows(), centers.centers.cols());
  if (!projector.identity) {
    g.projector.w1 = Matrix::Zero(projector.w1.rows(), projector.w1.cols());
    g.projector.b1 = Vector::Zero(projector.b1.size());
    g.projector.w2 = Matrix::Zero(projector.w2.rows(), projector.w2.cols());
    g.projector.b2 = Vector::Zero(projector.b2.size());
  }
  return g;
}

struct Evaluation {
  LossTerms loss;
  Matrix log_post;
  Matrix stacked;   // current rows then replay rows
  HeadForward head;
  Matrix dlogits;   // only filled when gradients are requested
  bool head_used = false;
};

Evaluation run(const PrototypeSet& protos, const Projector& projector, const ClassCenters& centers,
               const ObjectiveBatch& batch, const ObjectiveWeights& w, bool want_grads) {
  const Eigen::Index n = batch.features.rows();
  if (n == 0) throw ValidationError("objective: empty batch");
  if (batch.targets.rows() != n || batch.targets.cols() != protos.size())
    throw ValidationError("objective: targets must be n x r");
  if (batch.current.size() < 1 || batch.current.end > centers.size())
    throw ValidationError("objective: bad current center range");

  Evaluation ev;
  if (w.proto) {
    ev.log_post = log_posterior(batch.features, protos);
    ev.loss.proto = proto_loss(batch.targets, ev.log_post);
  }

  const bool has_replay = w.old && batch.replay != nullptr && batch.replay->size() > 0;
  const bool has_old_centers = batch.current.begin > 0 || batch.current.end < centers.size();
  const bool sep_on = w.sep && has_old_centers;
  ev.head_used = w.align || sep_on || has_replay;
  if (ev.head_used) {
    const Eigen::Index m = has_replay ? batch.replay->size() : 0;
    ev.stacked.resize(n + m, batch.features.cols());
    ev.stacked.topRows(n) = batch.features;
    if (m > 0) ev.stacked.bottomRows(m) = batch.replay->features;
    ev.head = head_forward(ev.stacked, projector, centers);
    const Matrix current_logits = ev.head.logits.topRows(n);
    if (want_grads) ev.dlogits = Matrix::Zero(ev.head.logits.rows(), ev.head.logits.cols());

    if (w.align) {
      const Matrix probs = softmax_columns(current_logits, batch.current);
      const JointTable table = joint_table(batch.targets, probs);
      ev.loss.align = align_loss(table, w.lambda_ga);
      if (want_grads)
        ev.dlogits.block(0, batch.current.begin, n, batch.current.size()) +=
            align_logit_grad(batch.targets, probs, table, w.lambda_ga);
    }
    if (sep_on) {
      ev.loss.sep = sep_loss(current_logits, batch.current);
      if (want_grads) ev.dlogits.topRows(n) += sep_loss_logit_grad(current_logits, batch.current);
    }
    if (has_replay) {
      const Matrix replay_logits = ev.head.logits.bottomRows(m);
      ev.loss.old = old_loss(replay_logits, batch.replay->labels);
      if (want_grads) ev.dlogits.bottomRows(m) += w.lambda_old * old_loss_logit_grad(replay_logits, batch.replay->labels);
    }
  }
  ev.loss.reduct = reduct_loss(ev.loss.old, ev.loss.sep, w.lambda_old);
  ev.loss.total = ev.loss.proto + ev.loss.align + ev.loss.reduct;
  return ev;
}

}  // namespace

bool LossTerms::finite() const {
  return std::isfinite(proto) && std::isfinite(align) && std::isfinite(old) && std::isfinite(sep) &&
         std::isfinite(total);
}

LossTerms evaluate_objective(const PrototypeSet& protos, const Projector& projector, const ClassCenters& centers,
                             const ObjectiveBatch& batch, const ObjectiveWeights& weights) {
  return run(protos, projector, centers, batch, weights, false).loss;
}

ObjectiveResult objective_with_grads(const PrototypeSet& protos, const Projector& projector,
                                     const ClassCenters& centers, const ObjectiveBatch& batch,
                                     const ObjectiveWeights& weights) {
  Evaluation ev = run(protos, projector, centers, batch, weights, true);
  ObjectiveResult out;
  out.loss = ev.loss;
  if (weights.proto) {
    out.grads.protos = proto_grads(batch.features, protos, batch.targets, ev.log_post);
  } else {
    out.grads.protos.means = Matrix::Zero(protos.means.rows(), protos.means.cols());
    out.grads.protos.log_sigma = Vector::Zero(protos.log_sigma.size());
  }
  out.grads.head = ev.head_used ? head_backward(ev.stacked, ev.head, ev.dlogits, projector, centers)
                                : zero_head_grads(projector, centers);
  return out;
}

}  // namespace ucil
