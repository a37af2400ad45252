#pragma once

#include <vector>

#include "cal/tensor.hpp"

namespace cal {

// Differentiable primitives. Inputs are NCHW row-major unless stated
// otherwise; every op validates shapes and names the offending dimensions
// on mismatch.

// Cross-correlation of input [N,C,H,W] with weight [K,C,kh,kw] plus bias [K].
// Output [N,K,H',W'] with H' = (H + 2*padding - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);

// Elementwise max(0, x). The subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x);

// Per-channel spatial mean: [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);

// Hadamard product. Shapes must match, or b may be [N,1,H,W] against an
// a of [N,C,H,W]; the single channel is broadcast across all C channels.
Tensor elementwise_mul(const Tensor& a, const Tensor& b);

// Affine map x[N,D] * w[D,K] + b[K] -> [N,K].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
// Gradient of logits is (softmax - onehot) / N.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Soft attention pooling: x [N,C,H,W] weighted by a [N,M,H,W], spatially
// averaged per head -> [N,M,C]. Equivalent to global_avg_pool of
// elementwise_mul(x, a_m) for each head m.
Tensor attention_pool(const Tensor& x, const Tensor& a);

// Scale each row of x [N,D] to unit L2 norm; all-zero rows stay zero.
Tensor l2_normalize_rows(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape new_shape);

}  // namespace cal
