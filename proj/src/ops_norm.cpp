#include <cmath>
#include <vector>

#include "op_util.hpp"
#include "sapool/ops.hpp"

namespace sapool::ops {

template <typename T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormState<T>& state, bool train) {
  using detail::require;
  require(x.value().rank() == 4, "batchnorm2d", "input must be [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  require(gamma.numel() == c && beta.numel() == c, "batchnorm2d",
          "affine parameters must have " + std::to_string(c) + " elements");
  require(state.running_mean.numel() == c && state.running_var.numel() == c, "batchnorm2d",
          "running stats must have " + std::to_string(c) + " elements");
  const std::size_t n = b * hw;
  if (n == 0) throw DimensionError("batchnorm2d: channel has zero elements in " + shape_str(x.shape()));

  Tensor<T> xhat(x.shape());
  std::vector<T> invstd(c);
  const T* xs = x.value().ptr();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const T* p = xs + (i * c + ch) * hw;
        s += detail::lane_reduce<T>(hw, [p](std::size_t k) { return p[k]; });
      }
      mu = s / static_cast<double>(n);
      const T m0 = static_cast<T>(mu);
      double ss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const T* p = xs + (i * c + ch) * hw;
        ss += detail::lane_reduce<T>(hw, [p, m0](std::size_t k) { return (p[k] - m0) * (p[k] - m0); });
      }
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      const double m = state.momentum;
      state.running_mean[ch] = static_cast<T>((1.0 - m) * state.running_mean[ch] + m * mu);
      state.running_var[ch] = static_cast<T>((1.0 - m) * state.running_var[ch] + m * unbiased);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + state.eps));
    invstd[ch] = is;
    const T mut = static_cast<T>(mu);
    for (std::size_t i = 0; i < b; ++i) {
      const T* p = xs + (i * c + ch) * hw;
      T* q = xhat.ptr() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) q[k] = (p[k] - mut) * is;
    }
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T gm = gamma.value()[ch], bt = beta.value()[ch];
      const T* q = xhat.ptr() + (i * c + ch) * hw;
      T* o = out.ptr() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) o[k] = gm * q[k] + bt;
    }

  Var<T> result = detail::make_output(tape, "batchnorm2d", std::move(out), {&x, &gamma, &beta});
  tape.record("batchnorm2d", result,
              [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), train, b, c, hw,
               n](const Tensor<T>& g) {
                auto X = x;
                auto G = gamma;
                auto Bt = beta;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (std::size_t i = 0; i < b; ++i) {
                    const T* gp = g.ptr() + (i * c + ch) * hw;
                    const T* xp = xhat.ptr() + (i * c + ch) * hw;
                    sum_g += detail::lane_reduce<T>(hw, [gp](std::size_t k) { return gp[k]; });
                    sum_gx += detail::lane_reduce<T>(hw, [gp, xp](std::size_t k) { return gp[k] * xp[k]; });
                  }
                  if (G.requires_grad()) G.mutable_grad()[ch] += static_cast<T>(sum_gx);
                  if (Bt.requires_grad()) Bt.mutable_grad()[ch] += static_cast<T>(sum_g);
                  if (!X.requires_grad()) continue;
                  auto& gx = X.mutable_grad();
                  const T scale = G.value()[ch] * invstd[ch];
                  if (train) {
                    const T mean_g = static_cast<T>(sum_g / static_cast<double>(n));
                    const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(n));
                    for (std::size_t i = 0; i < b; ++i) {
                      const std::size_t off = (i * c + ch) * hw;
                      for (std::size_t k = 0; k < hw; ++k)
                        gx[off + k] += scale * (g[off + k] - mean_g - xhat[off + k] * mean_gx);
                    }
                  } else {
                    for (std::size_t i = 0; i < b; ++i) {
                      const std::size_t off = (i * c + ch) * hw;
                      for (std::size_t k = 0; k < hw; ++k) gx[off + k] += scale * g[off + k];
                    }
                  }
                }
              });
  return result;
}

template <typename T>
Var<T> layernorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 double eps) {
  using detail::require;
  require(x.value().rank() >= 1 && x.shape().back() >= 1, "layernorm",
          "needs a non-empty last axis, got " + shape_str(x.shape()));
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  require(gamma.numel() == c && beta.numel() == c, "layernorm",
          "affine parameters must have " + std::to_string(c) + " elements");
  Tensor<T> xhat(x.shape());
  std::vector<T> invstd(rows);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.value().ptr() + r * c;
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += p[j];
    const double mu = s / static_cast<double>(c);
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += (p[j] - mu) * (p[j] - mu);
    const T is = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(c) + eps));
    invstd[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (p[j] - static_cast<T>(mu)) * is;
      xhat[r * c + j] = xh;
      out[r * c + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  Var<T> result = detail::make_output(tape, "layernorm", std::move(out), {&x, &gamma, &beta});
  tape.record("layernorm", result,
              [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), rows,
               c](const Tensor<T>& g) {
                auto X = x;
                auto G = gamma;
                auto Bt = beta;
                if (G.requires_grad() || Bt.requires_grad()) {
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j) {
                      if (G.requires_grad()) G.mutable_grad()[j] += g[r * c + j] * xhat[r * c + j];
                      if (Bt.requires_grad()) Bt.mutable_grad()[j] += g[r * c + j];
                    }
                }
                if (!X.requires_grad()) return;
                auto& gx = X.mutable_grad();
                std::vector<T> dxh(c);
                for (std::size_t r = 0; r < rows; ++r) {
                  double s1 = 0.0, s2 = 0.0;
                  for (std::size_t j = 0; j < c; ++j) {
                    dxh[j] = g[r * c + j] * G.value()[j];
                    s1 += dxh[j];
                    s2 += static_cast<double>(dxh[j]) * xhat[r * c + j];
                  }
                  const T m1 = static_cast<T>(s1 / static_cast<double>(c));
                  const T m2 = static_cast<T>(s2 / static_cast<double>(c));
                  for (std::size_t j = 0; j < c; ++j)
                    gx[r * c + j] += invstd[r] * (dxh[j] - m1 - xhat[r * c + j] * m2);
                }
              });
  return result;
}

template Var<float> batchnorm2d<float>(Tape<float>&, const Var<float>&, const Var<float>&,
                                       const Var<float>&, BatchNormState<float>&, bool);
template Var<double> batchnorm2d<double>(Tape<double>&, const Var<double>&, const Var<double>&,
                                         const Var<double>&, BatchNormState<double>&, bool);
template Var<float> layernorm<float>(Tape<float>&, const Var<float>&, const Var<float>&,
                                     const Var<float>&, double);
template Var<double> layernorm<double>(Tape<double>&, const Var<double>&, const Var<double>&,
                                       const Var<double>&, double);

}  // namespace sapool::ops
