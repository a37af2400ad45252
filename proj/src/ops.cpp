#include "cal/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gemm.hpp"

namespace cal {

namespace {

#ifdef CAL_FINITE_CHECKS
void scan_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
    }
  }
}
#define CAL_SCAN_FINITE(op, values) scan_finite(op, values)
#else
#define CAL_SCAN_FINITE(op, values) (void)0
#endif

void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

struct ConvDims {
  std::size_t n, c, h, w;      // input
  std::size_t k, kh, kw;       // kernel
  std::size_t oh, ow;          // output
  std::size_t stride, pad;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return oh * ow; }
};

// Unfold one sample into a (C*kh*kw) x (OH*OW) patch matrix, zero padded.
void im2col(const double* x, const ConvDims& d, double* col) {
  const std::size_t J = d.cols();
  for (std::size_t c = 0; c < d.c; ++c) {
    const double* xc = x + c * d.h * d.w;
    for (std::size_t u = 0; u < d.kh; ++u) {
      for (std::size_t v = 0; v < d.kw; ++v) {
        double* row = col + ((c * d.kh + u) * d.kw + v) * J;
        for (std::size_t oh = 0; oh < d.oh; ++oh) {
          const long ih = static_cast<long>(oh * d.stride + u) - static_cast<long>(d.pad);
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            for (std::size_t ow = 0; ow < d.ow; ++ow) row[oh * d.ow + ow] = 0.0;
            continue;
          }
          const double* xr = xc + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.ow; ++ow) {
            const long iw = static_cast<long>(ow * d.stride + v) - static_cast<long>(d.pad);
            row[oh * d.ow + ow] =
                (iw < 0 || iw >= static_cast<long>(d.w)) ? 0.0 : xr[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Scatter-add the patch-matrix gradient back onto one input sample.
void col2im_add(const double* col, const ConvDims& d, double* gx) {
  const std::size_t J = d.cols();
  for (std::size_t c = 0; c < d.c; ++c) {
    double* gc = gx + c * d.h * d.w;
    for (std::size_t u = 0; u < d.kh; ++u) {
      for (std::size_t v = 0; v < d.kw; ++v) {
        const double* row = col + ((c * d.kh + u) * d.kw + v) * J;
        for (std::size_t oh = 0; oh < d.oh; ++oh) {
          const long ih = static_cast<long>(oh * d.stride + u) - static_cast<long>(d.pad);
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          double* gr = gc + static_cast<std::size_t>(ih) * d.w;
          for (std::size_t ow = 0; ow < d.ow; ++ow) {
            const long iw = static_cast<long>(ow * d.stride + v) - static_cast<long>(d.pad);
            if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
            gr[static_cast<std::size_t>(iw)] += row[oh * d.ow + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  require(input.rank() == 4, "conv2d: input must be rank 4 [N,C,H,W], got " +
                                 shape_to_string(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be rank 4 [K,C,kh,kw], got " +
                                  shape_to_string(weight.shape()));
  require(bias.rank() == 1, "conv2d: bias must be rank 1, got " + shape_to_string(bias.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1, got " + std::to_string(stride));
  require(padding >= 0, "conv2d: padding must be >= 0, got " + std::to_string(padding));

  ConvDims d;
  d.n = input.dim(0);
  d.c = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.k = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = static_cast<std::size_t>(stride);
  d.pad = static_cast<std::size_t>(padding);

  require(weight.dim(1) == d.c, "conv2d: input channels (" + std::to_string(d.c) +
                                    ") do not match weight channels (" +
                                    std::to_string(weight.dim(1)) + ")");
  require(bias.dim(0) == d.k, "conv2d: bias size (" + std::to_string(bias.dim(0)) +
                                  ") does not match output channels (" + std::to_string(d.k) + ")");
  require(d.h + 2 * d.pad >= d.kh && d.w + 2 * d.pad >= d.kw,
          "conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
              " does not fit padded input " + std::to_string(d.h + 2 * d.pad) + "x" +
              std::to_string(d.w + 2 * d.pad));

  d.oh = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
  d.ow = (d.w + 2 * d.pad - d.kw) / d.stride + 1;

  const std::size_t R = d.rows();
  const std::size_t J = d.cols();
  const double* x = input.values().data();
  const double* w = weight.values().data();
  const double* b = bias.values().data();

  std::vector<double> out(d.n * d.k * J);
  std::vector<double> col(R * J);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x + n * d.c * d.h * d.w, d, col.data());
    double* on = out.data() + n * d.k * J;
    for (std::size_t k = 0; k < d.k; ++k) {
      double* ok = on + k * J;
      for (std::size_t j = 0; j < J; ++j) ok[j] = b[k];
    }
    detail::gemm_nn(d.k, J, R, w, col.data(), on);
  }
  CAL_SCAN_FINITE("conv2d", out);

  return make_op("conv2d", Shape{d.n, d.k, d.oh, d.ow}, std::move(out), {input, weight, bias},
                 [input, weight, d]() -> detail::BackwardFn {
                   return [input, weight, d](const std::vector<double>& g) {
                     const std::size_t R = d.rows();
                     const std::size_t J = d.cols();
                     const double* x = input.values().data();
                     const double* w = weight.values().data();
                     std::vector<double> gx(input.size(), 0.0);
                     std::vector<double> gw(weight.size(), 0.0);
                     std::vector<double> gb(d.k, 0.0);
                     std::vector<double> col(R * J);
                     std::vector<double> gcol(R * J);
                     for (std::size_t n = 0; n < d.n; ++n) {
                       const double* gn = g.data() + n * d.k * J;
                       im2col(x + n * d.c * d.h * d.w, d, col.data());
                       detail::gemm_nt(d.k, R, J, gn, col.data(), gw.data());
                       std::fill(gcol.begin(), gcol.end(), 0.0);
                       detail::gemm_tn(R, J, d.k, w, gn, gcol.data());
                       col2im_add(gcol.data(), d, gx.data() + n * d.c * d.h * d.w);
                       for (std::size_t k = 0; k < d.k; ++k) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < J; ++j) acc += gn[k * J + j];
                         gb[k] += acc;
                       }
                     }
                     return std::vector<std::vector<double>>{std::move(gx), std::move(gw),
                                                             std::move(gb)};
                   };
                 });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  CAL_SCAN_FINITE("relu", out);
  return make_op("relu", x.shape(), std::move(out), {x}, [x]() -> detail::BackwardFn {
    return [x](const std::vector<double>& g) {
      auto xv = x.values();
      std::vector<double> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
      return std::vector<std::vector<double>>{std::move(gx)};
    };
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool: input must be rank 4 [N,C,H,W], got " +
                             shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  auto xv = x.values();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = xv.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc * inv;
  }
  CAL_SCAN_FINITE("global_avg_pool", out);
  return make_op("global_avg_pool", Shape{n, c}, std::move(out), {x},
                 [n, c, hw, inv]() -> detail::BackwardFn {
                   return [n, c, hw, inv](const std::vector<double>& g) {
                     std::vector<double> gx(n * c * hw);
                     for (std::size_t i = 0; i < n * c; ++i) {
                       const double v = g[i] * inv;
                       double* p = gx.data() + i * hw;
                       for (std::size_t j = 0; j < hw; ++j) p[j] = v;
                     }
                     return std::vector<std::vector<double>>{std::move(gx)};
                   };
                 });
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool channel_broadcast = !same && a.rank() == 4 && b.rank() == 4 && b.dim(1) == 1 &&
                                 a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                                 a.dim(3) == b.dim(3);
  require(same || channel_broadcast,
          "elementwise_mul: shapes " + shape_to_string(a.shape()) + " and " +
              shape_to_string(b.shape()) + " are neither equal nor channel-broadcastable");

  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(a.size());
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    for (std::size_t in = 0; in < n; ++in) {
      const double* bp = bv.data() + in * hw;
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* ap = av.data() + (in * c + ic) * hw;
        double* op = out.data() + (in * c + ic) * hw;
        for (std::size_t j = 0; j < hw; ++j) op[j] = ap[j] * bp[j];
      }
    }
  }
  CAL_SCAN_FINITE("elementwise_mul", out);
  return make_op("elementwise_mul", a.shape(), std::move(out), {a, b},
                 [a, b, same]() -> detail::BackwardFn {
                   return [a, b, same](const std::vector<double>& g) {
                     auto av = a.values();
                     auto bv = b.values();
                     std::vector<double> ga(a.size(), 0.0);
                     std::vector<double> gb(b.size(), 0.0);
                     if (same) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] = g[i] * bv[i];
                         gb[i] = g[i] * av[i];
                       }
                     } else {
                       const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
                       for (std::size_t in = 0; in < n; ++in) {
                         const double* bp = bv.data() + in * hw;
                         double* gbp = gb.data() + in * hw;
                         for (std::size_t ic = 0; ic < c; ++ic) {
                           const std::size_t base = (in * c + ic) * hw;
                           for (std::size_t j = 0; j < hw; ++j) {
                             ga[base + j] = g[base + j] * bp[j];
                             gbp[j] += g[base + j] * av[base + j];
                           }
                         }
                       }
                     }
                     return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
                   };
                 });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 2, "linear: input must be rank 2 [N,D], got " + shape_to_string(x.shape()));
  require(weight.rank() == 2,
          "linear: weight must be rank 2 [D,K], got " + shape_to_string(weight.shape()));
  require(bias.rank() == 1, "linear: bias must be rank 1, got " + shape_to_string(bias.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(1);
  require(weight.dim(0) == d, "linear: input width (" + std::to_string(d) +
                                  ") does not match weight rows (" + std::to_string(weight.dim(0)) +
                                  ")");
  require(bias.dim(0) == k, "linear: bias size (" + std::to_string(bias.dim(0)) +
                                ") does not match weight columns (" + std::to_string(k) + ")");

  auto bv = bias.values();
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = bv[j];
  }
  detail::gemm_nn(n, k, d, x.values().data(), weight.values().data(), out.data());
  CAL_SCAN_FINITE("linear", out);
  return make_op("linear", Shape{n, k}, std::move(out), {x, weight, bias},
                 [x, weight, n, d, k]() -> detail::BackwardFn {
                   return [x, weight, n, d, k](const std::vector<double>& g) {
                     std::vector<double> gx(n * d, 0.0);
                     std::vector<double> gw(d * k, 0.0);
                     std::vector<double> gb(k, 0.0);
                     detail::gemm_nt(n, d, k, g.data(), weight.values().data(), gx.data());
                     detail::gemm_tn(d, k, n, x.values().data(), g.data(), gw.data());
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
                     }
                     return std::vector<std::vector<double>>{std::move(gx), std::move(gw),
                                                             std::move(gb)};
                   };
                 });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2, "softmax_cross_entropy: logits must be rank 2 [N,K], got " +
                                  shape_to_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  require(k >= 2, "softmax_cross_entropy: need at least 2 classes, got " + std::to_string(k));
  require(labels.size() == n, "softmax_cross_entropy: batch size (" + std::to_string(n) +
                                  ") does not match label count (" + std::to_string(labels.size()) +
                                  ")");
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            "softmax_cross_entropy: label " + std::to_string(labels[i]) + " at index " +
                std::to_string(i) + " is outside [0," + std::to_string(k) + ")");
  }

  auto lv = logits.values();
  std::vector<double> probs(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - m);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    loss -= row[labels[i]] - m - std::log(z);
  }
  loss /= static_cast<double>(n);
  CAL_SCAN_FINITE("softmax_cross_entropy", std::vector<double>{loss});

  return make_op("softmax_cross_entropy", Shape{1}, {loss}, {logits},
                 [probs = std::move(probs), labels, n, k]() -> detail::BackwardFn {
                   return [probs, labels, n, k](const std::vector<double>& g) {
                     const double s = g[0] / static_cast<double>(n);
                     std::vector<double> gl(n * k);
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t j = 0; j < k; ++j) gl[i * k + j] = s * probs[i * k + j];
                       gl[i * k + static_cast<std::size_t>(labels[i])] -= s;
                     }
                     return std::vector<std::vector<double>>{std::move(gl)};
                   };
                 });
}

Tensor attention_pool(const Tensor& x, const Tensor& a) {
  require(x.rank() == 4, "attention_pool: features must be rank 4 [N,C,H,W], got " +
                             shape_to_string(x.shape()));
  require(a.rank() == 4, "attention_pool: attention must be rank 4 [N,M,H,W], got " +
                             shape_to_string(a.shape()));
  require(x.dim(0) == a.dim(0), "attention_pool: batch sizes differ (" +
                                    std::to_string(x.dim(0)) + " vs " + std::to_string(a.dim(0)) +
                                    ")");
  require(x.dim(2) == a.dim(2) && x.dim(3) == a.dim(3),
          "attention_pool: spatial sizes differ (" + std::to_string(x.dim(2)) + "x" +
              std::to_string(x.dim(3)) + " vs " + std::to_string(a.dim(2)) + "x" +
              std::to_string(a.dim(3)) + ")");

  const std::size_t n = x.dim(0), c = x.dim(1), m = a.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> out(n * m * c, 0.0);
  for (std::size_t in = 0; in < n; ++in) {
    detail::gemm_nt(m, c, hw, a.values().data() + in * m * hw, x.values().data() + in * c * hw,
                    out.data() + in * m * c);
  }
  for (double& v : out) v *= inv;
  CAL_SCAN_FINITE("attention_pool", out);

  return make_op("attention_pool", Shape{n, m, c}, std::move(out), {x, a},
                 [x, a, n, c, m, hw, inv]() -> detail::BackwardFn {
                   return [x, a, n, c, m, hw, inv](const std::vector<double>& g) {
                     // Rescale once so the per-sample GEMMs stay plain products.
                     std::vector<double> gs(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gs[i] = g[i] * inv;
                     std::vector<double> gx(x.size(), 0.0);
                     std::vector<double> ga(a.size(), 0.0);
                     for (std::size_t in = 0; in < n; ++in) {
                       const double* gn = gs.data() + in * m * c;
                       // gx[c,hw] += sum_m g[m,c] * a[m,hw]
                       detail::gemm_tn(c, hw, m, gn, a.values().data() + in * m * hw,
                                       gx.data() + in * c * hw);
                       // ga[m,hw] += sum_c g[m,c] * x[c,hw]
                       detail::gemm_nn(m, hw, c, gn, x.values().data() + in * c * hw,
                                       ga.data() + in * m * hw);
                     }
                     return std::vector<std::vector<double>>{std::move(gx), std::move(ga)};
                   };
                 });
}

Tensor l2_normalize_rows(const Tensor& x) {
  require(x.rank() == 2,
          "l2_normalize_rows: input must be rank 2 [N,D], got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(n * d);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += row[j] * row[j];
    const double r = std::sqrt(acc);
    norms[i] = r;
    double* orow = out.data() + i * d;
    if (r == 0.0) {
      for (std::size_t j = 0; j < d; ++j) orow[j] = 0.0;
    } else {
      for (std::size_t j = 0; j < d; ++j) orow[j] = row[j] / r;
    }
  }
  CAL_SCAN_FINITE("l2_normalize_rows", out);
  return make_op("l2_normalize_rows", x.shape(), std::move(out), {x},
                 [x, norms = std::move(norms), n, d]() -> detail::BackwardFn {
                   return [x, norms, n, d](const std::vector<double>& g) {
                     auto xv = x.values();
                     std::vector<double> gx(n * d, 0.0);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double r = norms[i];
                       if (r == 0.0) continue;  // zero rows pass no gradient
                       const double* row = xv.data() + i * d;
                       const double* grow = g.data() + i * d;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < d; ++j) dot += row[j] * grow[j];
                       const double r3 = r * r * r;
                       for (std::size_t j = 0; j < d; ++j) {
                         gx[i * d + j] = grow[j] / r - row[j] * dot / r3;
                       }
                     }
                     return std::vector<std::vector<double>>{std::move(gx)};
                   };
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shapes " + shape_to_string(a.shape()) + " and " +
                                      shape_to_string(b.shape()) + " differ");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  CAL_SCAN_FINITE("add", out);
  return make_op("add", a.shape(), std::move(out), {a, b}, []() -> detail::BackwardFn {
    return [](const std::vector<double>& g) { return std::vector<std::vector<double>>{g, g}; };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shapes " + shape_to_string(a.shape()) + " and " +
                                      shape_to_string(b.shape()) + " differ");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  CAL_SCAN_FINITE("sub", out);
  return make_op("sub", a.shape(), std::move(out), {a, b}, []() -> detail::BackwardFn {
    return [](const std::vector<double>& g) {
      std::vector<double> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
      return std::vector<std::vector<double>>{g, std::move(gb)};
    };
  });
}

Tensor scale(const Tensor& x, double factor) {
  auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  CAL_SCAN_FINITE("scale", out);
  return make_op("scale", x.shape(), std::move(out), {x}, [factor]() -> detail::BackwardFn {
    return [factor](const std::vector<double>& g) {
      std::vector<double> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
      return std::vector<std::vector<double>>{std::move(gx)};
    };
  });
}

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  return make_op("sum", Shape{1}, {acc}, {x}, [n = x.size()]() -> detail::BackwardFn {
    return [n](const std::vector<double>& g) {
      return std::vector<std::vector<double>>{std::vector<double>(n, g[0])};
    };
  });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  require(shape_numel(new_shape) == x.size(),
          "reshape: cannot view " + shape_to_string(x.shape()) + " as " +
              shape_to_string(new_shape) + " (element counts differ)");
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(new_shape), std::move(out), {x}, []() -> detail::BackwardFn {
    return [](const std::vector<double>& g) { return std::vector<std::vector<double>>{g}; };
  });
}

}  // namespace cal
