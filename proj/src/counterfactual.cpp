#include "cal/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cal/ops.hpp"
#include "cal/rng.hpp"

namespace cal {

CounterfactualKind parse_counterfactual_kind(const std::string& name) {
  if (name == "random") return CounterfactualKind::Random;
  if (name == "uniform") return CounterfactualKind::Uniform;
  if (name == "reversed") return CounterfactualKind::Reversed;
  if (name == "shuffle") return CounterfactualKind::Shuffle;
  throw std::invalid_argument("unknown counterfactual strategy \"" + name +
                              "\" (expected random|uniform|reversed|shuffle)");
}

std::string to_string(CounterfactualKind kind) {
  switch (kind) {
    case CounterfactualKind::Random: return "random";
    case CounterfactualKind::Uniform: return "uniform";
    case CounterfactualKind::Reversed: return "reversed";
    case CounterfactualKind::Shuffle: return "shuffle";
  }
  return "?";
}

Tensor generate_counterfactual(const Tensor& a, const CounterfactualStrategy& strategy) {
  if (a.rank() != 4) {
    throw std::invalid_argument("generate_counterfactual: attention must be rank 4 [N,M,H,W]");
  }
  const std::size_t n = a.dim(0);
  const std::size_t per = a.dim(1) * a.dim(2) * a.dim(3);
  auto av = a.values();
  std::vector<double> out(a.size());

  switch (strategy.kind) {
    case CounterfactualKind::Random: {
      if (!(strategy.lo < strategy.hi)) {
        throw std::invalid_argument("generate_counterfactual: Random bounds require lo < hi");
      }
      Rng rng(derive_seed(strategy.seed, 0x72616e64ULL));
      for (double& v : out) v = rng.uniform(strategy.lo, strategy.hi);
      break;
    }
    case CounterfactualKind::Uniform: {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const double* base = av.data() + i * per;
        for (std::size_t j = 0; j < per; ++j) acc += base[j];
        const double mean = acc / static_cast<double>(per);
        std::fill(out.begin() + i * per, out.begin() + (i + 1) * per, mean);
      }
      break;
    }
    case CounterfactualKind::Reversed: {
      for (std::size_t i = 0; i < n; ++i) {
        const double* base = av.data() + i * per;
        double vmax = base[0];
        for (std::size_t j = 1; j < per; ++j) vmax = std::max(vmax, base[j]);
        double* dst = out.data() + i * per;
        for (std::size_t j = 0; j < per; ++j) dst[j] = vmax - base[j];
      }
      break;
    }
    case CounterfactualKind::Shuffle: {
      if (n < 2) {
        throw std::invalid_argument(
            "generate_counterfactual: Shuffle needs a batch of N >= 2 samples (no nontrivial "
            "permutation exists for N = " +
            std::to_string(n) + ")");
      }
      Rng rng(derive_seed(strategy.seed, 0x73687566ULL));
      const auto perm = rng.permutation(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double* src = av.data() + perm[i] * per;
        std::copy(src, src + per, out.begin() + i * per);
      }
      break;
    }
  }
  // Plain tensor: no producer, no requires_grad. do(A = a_bar) cuts X -> A.
  return Tensor(a.shape(), std::move(out));
}

Tensor counterfactual_predict(const AttentionModel& model, const Tensor& features,
                              const Tensor& a_bar) {
  if (a_bar.tracks_grad()) {
    throw std::invalid_argument(
        "counterfactual_predict: a_bar must be detached (counterfactual attention is a "
        "constant under the intervention)");
  }
  Tensor parts = attention_pool(features, a_bar);
  return classify(model, global_representation(parts));
}

Tensor compute_effect(const Tensor& y_factual, const Tensor& y_counterfactual) {
  if (y_factual.shape() != y_counterfactual.shape()) {
    throw std::invalid_argument("compute_effect: logit shapes differ (" +
                                shape_to_string(y_factual.shape()) + " vs " +
                                shape_to_string(y_counterfactual.shape()) + ")");
  }
  return sub(y_factual, y_counterfactual);
}

Tensor cal_loss(const Tensor& effect, const Tensor& y_factual, const std::vector<int>& labels,
                double lambda_effect) {
  if (lambda_effect < 0.0) {
    throw std::invalid_argument("cal_loss: lambda_effect must be >= 0, got " +
                                std::to_string(lambda_effect));
  }
  Tensor effect_term = scale(softmax_cross_entropy(effect, labels), lambda_effect);
  return add(effect_term, softmax_cross_entropy(y_factual, labels));
}

Tensor attention_dropout(const Tensor& a, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("attention_dropout: p must be in [0,1), got " + std::to_string(p));
  }
  Rng rng(derive_seed(seed, 0x64726f70ULL));
  const double keep_scale = 1.0 / (1.0 - p);
  auto av = a.values();
  std::vector<double> mask(a.size());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = av[i] * mask[i];
  }
  return make_op("attention_dropout", a.shape(), std::move(out), {a},
                 [mask = std::move(mask)]() -> detail::BackwardFn {
                   return [mask](const std::vector<double>& g) {
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
                     return std::vector<std::vector<double>>{std::move(gx)};
                   };
                 });
}

Tensor entropy_regularizer(const Tensor& a) {
  if (a.rank() != 4) {
    throw std::invalid_argument("entropy_regularizer: attention must be rank 4 [N,M,H,W]");
  }
  const std::size_t maps = a.dim(0) * a.dim(1);
  const std::size_t per = a.dim(2) * a.dim(3);
  auto av = a.values();

  std::vector<double> sums(maps, 0.0);
  double total = 0.0;
  for (std::size_t m = 0; m < maps; ++m) {
    const double* base = av.data() + m * per;
    double s = 0.0;
    for (std::size_t j = 0; j < per; ++j) s += base[j];
    sums[m] = s;
    if (s <= 0.0) continue;  // empty map: no distribution, contributes 0
    double plogp = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      if (base[j] > 0.0) {
        const double p = base[j] / s;
        plogp += p * std::log(p);
      }
    }
    total += plogp;
  }
  total /= static_cast<double>(maps);

  return make_op("entropy_regularizer", Shape{1}, {total}, {a},
                 [a, sums = std::move(sums), maps, per]() -> detail::BackwardFn {
                   return [a, sums, maps, per](const std::vector<double>& g) {
                     auto av = a.values();
                     const double scale = g[0] / static_cast<double>(maps);
                     std::vector<double> gx(a.size(), 0.0);
                     for (std::size_t m = 0; m < maps; ++m) {
                       const double s = sums[m];
                       if (s <= 0.0) continue;
                       const double* base = av.data() + m * per;
                       double plogp = 0.0;
                       for (std::size_t j = 0; j < per; ++j) {
                         if (base[j] > 0.0) {
                           const double p = base[j] / s;
                           plogp += p * std::log(p);
                         }
                       }
                       // d/da_i sum_j p_j log p_j = (log p_i - sum_j p_j log p_j) / s;
                       // cells at a_i = 0 keep a zero subgradient.
                       for (std::size_t j = 0; j < per; ++j) {
                         if (base[j] > 0.0) {
                           const double p = base[j] / s;
                           gx[m * per + j] = scale * (std::log(p) - plogp) / s;
                         }
                       }
                     }
                     return std::vector<std::vector<double>>{std::move(gx)};
                   };
                 });
}

Tensor attention_l2_normalize(const Tensor& a) {
  if (a.rank() != 4) {
    throw std::invalid_argument("attention_l2_normalize: attention must be rank 4 [N,M,H,W]");
  }
  const Shape original = a.shape();
  Tensor rows = reshape(a, {a.dim(0) * a.dim(1), a.dim(2) * a.dim(3)});
  return reshape(l2_normalize_rows(rows), original);
}

}  // namespace cal
