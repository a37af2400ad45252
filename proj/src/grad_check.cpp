#include "cal/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace cal {

double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps) {
  if (eps <= 0.0) throw std::invalid_argument("check_gradients: eps must be positive");

  std::vector<double> base(x.values().begin(), x.values().end());

  auto eval = [&](const std::vector<double>& point) {
    NoGradGuard no_grad;
    Tensor arg(x.shape(), point);
    Tensor out = f(arg);
    return out.scalar_value();
  };

  const double y0 = eval(base);
  const double y1 = eval(base);
  if (std::memcmp(&y0, &y1, sizeof(double)) != 0) {
    throw std::invalid_argument(
        "check_gradients: function is not deterministic (two baseline evaluations differ)");
  }

  Tensor leaf(x.shape(), base, /*requires_grad=*/true);
  Tensor y = f(leaf);
  if (y.size() != 1) {
    throw std::invalid_argument("check_gradients: function must return a scalar");
  }
  leaf.zero_grad();
  backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (leaf.has_grad()) {
    analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }

  double max_rel = 0.0;
  std::vector<double> point = base;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + eps;
    const double up = eval(point);
    point[i] = saved - eps;
    const double down = eval(point);
    point[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace cal
