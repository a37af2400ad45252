#pragma once

#include <array>
#include <span>
#include <vector>

#include "cal/attention_net.hpp"
#include "cal/synthdata.hpp"
#include "cal/tensor.hpp"

namespace cal {

// Evaluation-side metrics. This header (and everything it pulls in) has no
// dependency on the counterfactual module: inference runs the plain
// attention pipeline.

// Top-1 accuracy of the factual logits over a nonempty test set.
double evaluate_classification(const AttentionModel& model,
                               const std::vector<SyntheticSample>& test);

// Max over heads for one sample of an [N,M,H,W] attention tensor.
std::vector<double> max_over_heads(const Tensor& attention, std::size_t sample);

// Tight pixel rectangle (half-open, x0,y0,x1,y1) covering the cells whose
// value is >= threshold_fraction * max, after nearest-neighbor upsampling of
// the fh x fw cell grid to image_size. All-zero maps give {0,0,0,0}.
std::array<int, 4> attention_high_score_rect(std::span<const double> cells, std::size_t fh,
                                             std::size_t fw, int image_size,
                                             double threshold_fraction);

// Mean IoU between the high-score attention rectangle and the ground-truth
// object box. Heads are aggregated by max; an all-zero attention map scores
// 0 for its sample.
double attention_miou(const Tensor& attention, const std::vector<std::array<int, 4>>& bboxes,
                      int image_size, double threshold_fraction);
double attention_miou(const AttentionModel& model, const std::vector<SyntheticSample>& samples,
                      double threshold_fraction = 0.5);

struct RetrievalMetrics {
  std::vector<double> cmc;  // cmc[k] = P(correct match within top k+1)
  double map_score = 0.0;
};

// Single-query protocol: Euclidean ranking of the gallery per query, ties
// broken by gallery index. Every query identity must occur in the gallery.
RetrievalMetrics evaluate_retrieval(const Tensor& query_embeddings,
                                    const std::vector<int>& query_ids,
                                    const Tensor& gallery_embeddings,
                                    const std::vector<int>& gallery_ids);
RetrievalMetrics evaluate_retrieval(const AttentionModel& model,
                                    const std::vector<SyntheticSample>& query,
                                    const std::vector<SyntheticSample>& gallery);

// Stack sample images [begin,end) into a [N,3,S,S] batch tensor.
Tensor stack_images(const std::vector<SyntheticSample>& samples, std::size_t begin,
                    std::size_t end);

// Embeddings (global representations) for a whole sample list, batched.
Tensor compute_embeddings(const AttentionModel& model,
                          const std::vector<SyntheticSample>& samples);

}  // namespace cal
