#include <algorithm>
#include <cmath>
#include <vector>

#include "op_util.hpp"
#include "sapool/ops.hpp"

namespace sapool::ops {
namespace {

struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps half_pixel_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[d] = lo;
    t.hi[d] = std::min(lo + 1, in - 1);
    t.frac[d] = src - static_cast<double>(lo);
  }
  return t;
}

void require_windows(const Shape& s, std::size_t stride, std::string_view op) {
  detail::require(s.size() == 4, op, "input must be [B,C,H,W], got " + shape_str(s));
  detail::require(stride >= 1, op, "stride must be >= 1");
  detail::require(s[2] % stride == 0 && s[3] % stride == 0, op,
                  "spatial extent " + shape_str(s) + " not divisible by stride " +
                      std::to_string(stride));
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.value().rank() == 4, "bilinear_upsample",
                  "input must be [B,C,h,w], got " + shape_str(x.shape()));
  const std::size_t bc = x.shape()[0] * x.shape()[1], ih = x.shape()[2], iw = x.shape()[3];
  detail::require(ih >= 1 && iw >= 1 && out_h >= ih && out_w >= iw, "bilinear_upsample",
                  "target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                      " smaller than source " + shape_str(x.shape()));
  const Taps ty = half_pixel_taps(ih, out_h);
  const Taps tx = half_pixel_taps(iw, out_w);
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], out_h, out_w});
  for (std::size_t p = 0; p < bc; ++p) {
    const T* src = x.value().ptr() + p * ih * iw;
    T* dst = out.ptr() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const T ly = static_cast<T>(ty.frac[y]);
      const T* r0 = src + ty.lo[y] * iw;
      const T* r1 = src + ty.hi[y] * iw;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const T lx = static_cast<T>(tx.frac[xx]);
        const std::size_t c0 = tx.lo[xx], c1 = tx.hi[xx];
        const T top = (T(1) - lx) * r0[c0] + lx * r0[c1];
        const T bot = (T(1) - lx) * r1[c0] + lx * r1[c1];
        dst[y * out_w + xx] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  Var<T> result = detail::make_output(tape, "bilinear_upsample", std::move(out), {&x});
  tape.record("bilinear_upsample", result, [x, ty, tx, bc, ih, iw, out_h, out_w](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (std::size_t p = 0; p < bc; ++p) {
      T* dst = gx.ptr() + p * ih * iw;
      const T* src = g.ptr() + p * out_h * out_w;
      for (std::size_t y = 0; y < out_h; ++y) {
        const T ly = static_cast<T>(ty.frac[y]);
        T* r0 = dst + ty.lo[y] * iw;
        T* r1 = dst + ty.hi[y] * iw;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const T lx = static_cast<T>(tx.frac[xx]);
          const T v = src[y * out_w + xx];
          const std::size_t c0 = tx.lo[xx], c1 = tx.hi[xx];
          r0[c0] += (T(1) - ly) * (T(1) - lx) * v;
          r0[c1] += (T(1) - ly) * lx * v;
          r1[c0] += ly * (T(1) - lx) * v;
          r1[c1] += ly * lx * v;
        }
      }
    }
  });
  return result;
}

template <typename T>
Var<T> weighted_pool(Tape<T>& tape, const Var<T>& x, const Var<T>& pi, std::size_t s) {
  require_windows(x.shape(), s, "weighted_pool");
  detail::require(pi.shape() == x.shape(), "weighted_pool",
                  "weight map " + shape_str(pi.shape()) + " vs input " + shape_str(x.shape()));
  if (tape.debug()) {
    for (T v : pi.value().data()) {
      if (!(v > T(0))) {
        throw ContractError("weighted_pool: non-positive pooling weight " + std::to_string(v) +
                            (tape.scope_path().empty() ? "" : " in layer " + tape.scope_path()));
      }
    }
  }
  const std::size_t bc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h / s, ow = w / s;
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], oh, ow});
  std::vector<T> denom(bc * oh * ow);
  const T* xs = x.value().ptr();
  const T* ps = pi.value().ptr();
  for (std::size_t p = 0; p < bc; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T den = T(0);
        for (std::size_t u = 0; u < s; ++u) {
          const std::size_t row = (p * h + i * s + u) * w + j * s;
          for (std::size_t v = 0; v < s; ++v) den += ps[row + v];
        }
        // Normalizing each weight first makes s = 1 and constant π exact.
        T acc = T(0);
        for (std::size_t u = 0; u < s; ++u) {
          const std::size_t row = (p * h + i * s + u) * w + j * s;
          for (std::size_t v = 0; v < s; ++v) acc += (ps[row + v] / den) * xs[row + v];
        }
        const std::size_t o = (p * oh + i) * ow + j;
        denom[o] = den;
        out[o] = acc;
      }
    }
  }
  Var<T> result = detail::make_output(tape, "weighted_pool", std::move(out), {&x, &pi});
  Node<T>* self = result.node();
  tape.record("weighted_pool", result,
              [x, pi, self, denom = std::move(denom), s, bc, h, w, oh, ow](const Tensor<T>& g) {
                auto X = x;
                auto P = pi;
                T* gx = X.requires_grad() ? X.mutable_grad().ptr() : nullptr;
                T* gp = P.requires_grad() ? P.mutable_grad().ptr() : nullptr;
                const T* xs = X.value().ptr();
                const T* ps = P.value().ptr();
                for (std::size_t p = 0; p < bc; ++p)
                  for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                      const std::size_t o = (p * oh + i) * ow + j;
                      const T gs = g[o] / denom[o];
                      const T val = self->value[o];
                      for (std::size_t u = 0; u < s; ++u) {
                        const std::size_t row = (p * h + i * s + u) * w + j * s;
                        for (std::size_t v = 0; v < s; ++v) {
                          if (gx) gx[row + v] += gs * ps[row + v];
                          if (gp) gp[row + v] += gs * (xs[row + v] - val);
                        }
                      }
                    }
              });
  return result;
}

template <typename T>
Var<T> avg_pool2d(Tape<T>& tape, const Var<T>& x, std::size_t s) {
  require_windows(x.shape(), s, "avg_pool2d");
  const std::size_t bc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h / s, ow = w / s;
  const T inv = T(1) / static_cast<T>(s * s);
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], oh, ow});
  const T* xs = x.value().ptr();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T acc = T(0);
        for (std::size_t u = 0; u < s; ++u)
          for (std::size_t v = 0; v < s; ++v) acc += xs[(p * h + i * s + u) * w + j * s + v];
        out[(p * oh + i) * ow + j] = acc * inv;
      }
  Var<T> result = detail::make_output(tape, "avg_pool2d", std::move(out), {&x});
  tape.record("avg_pool2d", result, [x, s, bc, h, w, oh, ow, inv](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (std::size_t p = 0; p < bc; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const T v0 = g[(p * oh + i) * ow + j] * inv;
          for (std::size_t u = 0; u < s; ++u)
            for (std::size_t v = 0; v < s; ++v) gx[(p * h + i * s + u) * w + j * s + v] += v0;
        }
  });
  return result;
}

template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, std::size_t s) {
  require_windows(x.shape(), s, "max_pool2d");
  const std::size_t bc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h / s, ow = w / s;
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], oh, ow});
  std::vector<std::size_t> arg(out.numel());
  const T* xs = x.value().ptr();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (p * h + i * s) * w + j * s;
        for (std::size_t u = 0; u < s; ++u)
          for (std::size_t v = 0; v < s; ++v) {
            const std::size_t idx = (p * h + i * s + u) * w + j * s + v;
            if (xs[idx] > xs[best] || xs[idx] != xs[idx]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        arg[o] = best;
        out[o] = xs[best];
      }
  Var<T> result = detail::make_output(tape, "max_pool2d", std::move(out), {&x});
  tape.record("max_pool2d", result, [x, arg = std::move(arg)](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
  });
  return result;
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
  detail::require(x.value().rank() == 4, "global_avg_pool",
                  "input must be [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  detail::require(hw > 0, "global_avg_pool", "empty spatial extent");
  const T inv = T(1) / static_cast<T>(hw);
  Tensor<T> out(Shape{b, c});
  for (std::size_t p = 0; p < b * c; ++p) {
    T acc = T(0);
    const T* src = x.value().ptr() + p * hw;
    for (std::size_t k = 0; k < hw; ++k) acc += src[k];
    out[p] = acc * inv;
  }
  Var<T> result = detail::make_output(tape, "global_avg_pool", std::move(out), {&x});
  tape.record("global_avg_pool", result, [x, b, c, hw, inv](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (std::size_t p = 0; p < b * c; ++p) {
      const T v = g[p] * inv;
      for (std::size_t k = 0; k < hw; ++k) gx[p * hw + k] += v;
    }
  });
  return result;
}

#define SAPOOL_INSTANTIATE_POOL(T)                                                              \
  template Var<T> bilinear_upsample<T>(Tape<T>&, const Var<T>&, std::size_t, std::size_t);     \
  template Var<T> weighted_pool<T>(Tape<T>&, const Var<T>&, const Var<T>&, std::size_t);       \
  template Var<T> avg_pool2d<T>(Tape<T>&, const Var<T>&, std::size_t);                         \
  template Var<T> max_pool2d<T>(Tape<T>&, const Var<T>&, std::size_t);                         \
  template Var<T> global_avg_pool<T>(Tape<T>&, const Var<T>&);

SAPOOL_INSTANTIATE_POOL(float)
SAPOOL_INSTANTIATE_POOL(double)

}  // namespace sapool::ops
