#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cal/attention_net.hpp"
#include "cal/tensor.hpp"

namespace cal {

// Counterfactual attention learning: replace the learned attention maps A
// with imagined ones and use the drop in the prediction as a measure of (and
// training signal for) attention quality. Everything here is train-time
// machinery; evaluation never touches this module.

enum class CounterfactualKind { Random, Uniform, Reversed, Shuffle };

CounterfactualKind parse_counterfactual_kind(const std::string& name);
std::string to_string(CounterfactualKind kind);

struct CounterfactualStrategy {
  CounterfactualKind kind = CounterfactualKind::Random;
  double lo = 0.0;  // Random bounds
  double hi = 2.0;
  std::uint64_t seed = 0;  // fully determines the draw for a given input
};

// Draw counterfactual attention maps of the same shape as `a`:
//   Random   - every value uniform in [lo, hi)
//   Uniform  - per-sample constant equal to mean(a) over heads and locations
//   Reversed - per-sample max(a) minus a
//   Shuffle  - a uniformly drawn permutation of the batch dimension
// The result never carries gradients: the intervention severs the link from
// the features to the attention model.
Tensor generate_counterfactual(const Tensor& a, const CounterfactualStrategy& strategy);

// Prediction under the intervention do(A = a_bar): the factual pooling,
// normalization and classifier re-run with a_bar in place of A, sharing
// parameters. a_bar must be detached; gradients reach the classifier and,
// through the features, the backbone, but never the attention head.
Tensor counterfactual_predict(const AttentionModel& model, const Tensor& features,
                              const Tensor& a_bar);

// Factual minus counterfactual logits (a one-sample estimate of the effect).
Tensor compute_effect(const Tensor& y_factual, const Tensor& y_counterfactual);

// lambda_effect * CE(effect, labels) + CE(y_factual, labels).
// lambda_effect = 0 recovers the baseline objective exactly.
Tensor cal_loss(const Tensor& effect, const Tensor& y_factual, const std::vector<int>& labels,
                double lambda_effect);

// Rival regularizers used for comparisons.

// Zero each value with probability p and scale survivors by 1/(1-p).
// Train-time only; evaluation runs the unmodified pipeline.
Tensor attention_dropout(const Tensor& a, double p, std::uint64_t seed);

// Mean over (sample, head) of sum_i p_i log p_i with p the per-map
// distribution; minimizing it maximizes attention entropy. Maps summing to
// zero contribute zero; cells at exactly zero pass no gradient.
Tensor entropy_regularizer(const Tensor& a);

// Scale every head's H x W map to unit L2 norm; zero maps are unchanged.
Tensor attention_l2_normalize(const Tensor& a);

}  // namespace cal
