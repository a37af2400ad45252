#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cal/tensor.hpp"

namespace cal {

// Multi-head soft attention classifier: a small strided conv backbone
// produces feature maps X, a 1x1 conv head followed by ReLU produces M
// nonnegative attention maps A, attention pooling summarizes each head,
// and the concatenated, L2-normalized representation feeds a linear
// classifier.
struct AttentionModelConfig {
  int in_channels = 3;
  int depth = 4;      // stride-2 conv blocks; input size must divide 2^depth
  int num_heads = 32; // M
  int num_classes = 20;
  std::uint64_t init_seed = 0;
};

struct AttentionModel {
  int in_channels = 3;
  int depth = 4;
  int num_heads = 32;
  int num_classes = 20;
  int feature_channels = 64;  // C of the final block

  std::vector<Tensor> conv_weights;  // [C_out, C_in, 3, 3] per block
  std::vector<Tensor> conv_biases;
  Tensor attn_weight;  // [M, C, 1, 1]
  Tensor attn_bias;
  Tensor cls_weight;  // [M*C, K]
  Tensor cls_bias;

  // Parameters drawn uniformly from [-s, s] with s = 1/sqrt(fan_in).
  static AttentionModel init(const AttentionModelConfig& config);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void zero_grads();
};

// Output channels of backbone block `index` (3 -> 16 -> 32 -> 64 -> 64 ...).
int backbone_channels(int index);

// Backbone: depth blocks of 3x3 stride-2 pad-1 conv + ReLU.
// images [N,in_channels,S,S] -> features [N,C,S/2^depth,S/2^depth].
Tensor extract_features(const AttentionModel& model, const Tensor& images);

// Attention head: A = relu(conv1x1(X)), [N,M,H,W], nonnegative.
Tensor compute_attention(const AttentionModel& model, const Tensor& features);

// Concatenate per-head summaries [N,M,C] into [N,M*C] and L2-normalize each
// row; all-zero rows are left as zeros.
Tensor global_representation(const Tensor& parts);

// Linear classifier on the global representation: [N,M*C] -> [N,K].
Tensor classify(const AttentionModel& model, const Tensor& representation);

struct ForwardResult {
  Tensor features;        // X  [N,C,H,W]
  Tensor attention;       // A  [N,M,H,W]
  Tensor parts;           // h_i stacked [N,M,C]
  Tensor representation;  // h  [N,M*C], unit rows
  Tensor logits;          // Y  [N,K]
};

ForwardResult forward(const AttentionModel& model, const Tensor& images);

// Checkpoint: magic "CALM", version, model dimensions, then named parameter
// tensors in the flat tensor format.
void save_checkpoint(const AttentionModel& model, const std::string& path);
AttentionModel load_checkpoint(const std::string& path);

}  // namespace cal
