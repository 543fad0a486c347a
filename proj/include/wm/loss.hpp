#pragma once

#include <unordered_set>
#include <vector>

#include "wm/network.hpp"
#include "wm/tensor.hpp"

namespace wm {

// Per-sample loss terms as graph scalars.
template <class S>
struct LossTerms {
  Tensor<S> extraction;   // mean |w_hat - w|
  Tensor<S> fidelity;     // mean |marked - cover|
  Tensor<S> correlation;  // Gram feature correlation distance
  Tensor<S> penalty;      // contraction penalty of the invariance layer
};

// Reported batch-level values (plain numbers, no graph).
struct LossBreakdown {
  double extraction = 0;
  double fidelity = 0;
  double correlation = 0;
  double penalty = 0;
  double lambda = 0;
  double total = 0;  // (extraction + fidelity + correlation) + lambda * penalty
};

// Correlation distance between feature statistics of the feature image and
// of the marked image: half the sum over both feature stages of the mean
// absolute difference of their Gram matrices.
template <class S>
Tensor<S> gram_correlation(const FuseOut<S>& f) {
  auto d1 = mean_abs(gram(f.f1_wf), gram(f.f1_m));
  auto d2 = mean_abs(gram(f.f2_wf), gram(f.f2_m));
  return scale(add(d1, d2), S(0.5));
}

// Contraction penalty of the invariance layer: with unit activations
// h = tanh(w^T x + b), the squared Frobenius norm of the per-pixel Jacobian
// dh/dx collapses to sum_j (1 - h_j^2)^2 * sum_i w_ij^2. Averaged over
// pixels so the regularization weight stays size-independent.
template <class S>
Tensor<S> contraction_penalty(const Tensor<S>& weight, const Tensor<S>& h) {
  auto unit = square(affine(square(h), S(-1), S(1)));  // (1 - h^2)^2
  auto wcol = col_sums(square(weight));                // per-unit input energy
  long pixels = h.numel() / h.shape().back();
  return scale(sum(mul_channels(unit, wcol)), S(1) / static_cast<S>(pixels));
}

template <class S>
LossTerms<S> sample_loss(const Checkpoint<S>& ck, const PipelineOut<S>& out,
                         const Tensor<S>& w, const Tensor<S>& cover) {
  LossTerms<S> t;
  t.extraction = mean_abs(out.w_hat, w);
  t.fidelity = mean_abs(out.fused.marked, cover);
  t.correlation = gram_correlation(out.fused);
  t.penalty = contraction_penalty(ck.inv.weight, out.t);
  return t;
}

inline double structural_risk(double empirical, double penalty, double lambda) {
  return empirical + lambda * penalty;
}

// Batch-mean report. The empirical risk is the mean over the batch of
// extraction + fidelity + correlation; the total adds lambda * penalty.
template <class S>
LossBreakdown empirical_risk(const std::vector<LossTerms<S>>& batch, S lambda) {
  if (batch.empty()) throw ShapeError("empirical_risk: empty batch");
  LossBreakdown b;
  for (const auto& t : batch) {
    b.extraction += t.extraction.item();
    b.fidelity += t.fidelity.item();
    b.correlation += t.correlation.item();
    b.penalty += t.penalty.item();
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  b.extraction *= inv_b;
  b.fidelity *= inv_b;
  b.correlation *= inv_b;
  b.penalty *= inv_b;
  b.lambda = static_cast<double>(lambda);
  b.total = structural_risk(b.extraction + b.fidelity + b.correlation, b.penalty,
                            static_cast<double>(lambda));
  return b;
}

inline double structural_risk(double empirical, double penalty, double lambda) {
  return empirical + lambda * penalty;
}

// Leaf set of the embedder networks (encoder + fuser), the only parameters
// the fidelity and correlation terms update.
template <class S>
std::unordered_set<const void*> embedder_leaves(const std::vector<Param<S>>& params) {
  std::unordered_set<const void*> set;
  for (const auto& p : params)
    if (p.group == kGroupEncoder || p.group == kGroupFuser)
      set.insert(p.tensor.impl().get());
  return set;
}

// Gradient routing policy: the extraction term updates every network and the
// weighted penalty differentiates ordinarily (reaching the invariance weights
// directly and everything upstream through h), while fidelity and correlation
// update only the embedder. `batch_scale` seeds each pass (1/B for batch
// means). Parameter grads accumulate additively; callers zero them between
// optimizer steps.
template <class S>
void route_gradients(const LossTerms<S>& t, S lambda, S batch_scale,
                     const std::unordered_set<const void*>& embedder) {
  backward(add(t.extraction, scale(t.penalty, lambda)), batch_scale);
  backward(add(t.fidelity, t.correlation), batch_scale, &embedder);
}

}  // namespace wm
