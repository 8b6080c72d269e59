#pragma once

#include "ucil/classifier.hpp"
#include "ucil/common.hpp"
#include "ucil/memory.hpp"
#include "ucil/proto_model.hpp"

namespace ucil {

/// Which terms of L = L_proto + L_align + lambda_old L_old + L_sep are on.
struct ObjectiveWeights {
  double lambda_ga = 4.0;
  double lambda_old = 10.0;
  bool proto = true;
  bool align = true;
  bool old = true;
  bool sep = true;
};

struct LossTerms {
  double proto = 0.0;
  double align = 0.0;
  double old = 0.0;    // unweighted
  double sep = 0.0;
  double reduct = 0.0;  // lambda_old * old + sep
  double total = 0.0;   // proto + align + reduct

  bool finite() const;
};

/// One mini-batch worth of inputs. `targets` (n x r) are the balanced
/// assignments and are treated as constants.
struct ObjectiveBatch {
  const Matrix& features;
  const Matrix& targets;
  const ReplaySet* replay = nullptr;  // null or empty: L_old is skipped
  CenterRange current;                // this session's centers
};

struct ObjectiveGrads {
  ProtoGrads protos;
  HeadGrads head;
};

struct ObjectiveResult {
  LossTerms loss;
  ObjectiveGrads grads;
};

/// Loss value only.
LossTerms evaluate_objective(const PrototypeSet& protos, const Projector& projector, const ClassCenters& centers,
                             const ObjectiveBatch& batch, const ObjectiveWeights& weights);

/// Loss and analytic gradients for every trainable group. The current batch
/// and the replay set go through the head in a single stacked forward pass.
ObjectiveResult objective_with_grads(const PrototypeSet& protos, const Projector& projector,
                                     const ClassCenters& centers, const ObjectiveBatch& batch,
                                     const ObjectiveWeights& weights);

}  // namespace ucil
