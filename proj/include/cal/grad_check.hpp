#pragma once

#include <functional>

#include "cal/tensor.hpp"

namespace cal {

// Central-difference verification of reverse-mode gradients.
//
// `f` must map a tensor to a scalar tensor and be deterministic; it is
// rejected if two baseline evaluations differ. Returns the maximum over
// coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps = 1e-5);

}  // namespace cal
