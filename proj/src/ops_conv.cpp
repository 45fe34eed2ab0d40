#include <algorithm>
#include <vector>

#include "op_util.hpp"
#include "sapool/ops.hpp"

namespace sapool::ops {

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, cin, h, w;
  std::size_t cout, k, stride, pad, groups;
  std::size_t ho, wo;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t col_rows() const { return cin_g() * k * k; }
  std::size_t pixels() const { return ho * wo; }
  bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose input column ow*stride + kj - pad is in range.
inline void valid_cols(const ConvGeometry& g, std::size_t kj, std::size_t& lo, std::size_t& hi) {
  const long pad = static_cast<long>(g.pad), st = static_cast<long>(g.stride);
  const long off = static_cast<long>(kj) - pad;
  long l = off >= 0 ? 0 : (-off + st - 1) / st;
  long h = (static_cast<long>(g.w) - 1 - off) / st + 1;
  if (static_cast<long>(g.w) - 1 - off < 0) h = 0;
  l = std::min<long>(l, static_cast<long>(g.wo));
  h = std::clamp<long>(h, l, static_cast<long>(g.wo));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

// Unfolds one image group into col rows of leading dimension ld.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col, std::size_t ld) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t kj = 0; kj < g.k; ++kj) {
    std::size_t lo, hi;
    valid_cols(g, kj, lo, hi);
    const long base = static_cast<long>(kj) - pad;
    for (std::size_t c = 0; c < g.cin_g(); ++c) {
      const T* plane = img + c * g.h * g.w;
      for (std::size_t ki = 0; ki < g.k; ++ki) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - pad;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(lo) + base), src + (static_cast<long>(hi) + base),
                      dst + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow)
              dst[ow] = src[static_cast<long>(ow * g.stride) + base];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img, std::size_t ld) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t kj = 0; kj < g.k; ++kj) {
    std::size_t lo, hi;
    valid_cols(g, kj, lo, hi);
    const long base = static_cast<long>(kj) - pad;
    for (std::size_t c = 0; c < g.cin_g(); ++c) {
      T* plane = img + c * g.h * g.w;
      for (std::size_t ki = 0; ki < g.k; ++ki) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = lo; ow < hi; ++ow) dst[static_cast<long>(ow * g.stride) + base] += src[ow];
        }
      }
    }
  }
}

// Images per GEMM; the unfolded buffer stays within L2-sized blocks.
inline std::size_t chunk_images(const ConvGeometry& g) {
  const std::size_t per = std::max<std::size_t>(1, g.col_rows() * g.pixels());
  return std::clamp<std::size_t>((std::size_t{1} << 18) / per, 1, g.batch);
}

}  // namespace

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              Conv2dOptions options) {
  using detail::require;
  require(x.value().rank() == 4, "conv2d", "input must be [B,C,H,W], got " + shape_str(x.shape()));
  require(w.value().rank() == 4 && w.shape()[2] == w.shape()[3], "conv2d",
          "weight must be [Cout,Cin/groups,k,k], got " + shape_str(w.shape()));
  require(options.stride >= 1 && options.groups >= 1, "conv2d", "stride and groups must be >= 1");
  ConvGeometry g{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], w.shape()[0], w.shape()[2],
                 options.stride, options.padding, options.groups, 0, 0};
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0 && w.shape()[1] == g.cin_g(), "conv2d",
          "weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()) +
              " and groups=" + std::to_string(g.groups));
  require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k, "conv2d",
          "kernel " + std::to_string(g.k) + " larger than padded input " + shape_str(x.shape()));
  if (bias.defined()) {
    require(bias.value().rank() == 1 && bias.numel() == g.cout, "conv2d",
            "bias " + shape_str(bias.shape()) + " vs Cout " + std::to_string(g.cout));
  }
  g.ho = conv_out_extent(g.h, g.k, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.k, g.stride, g.pad);

  const std::size_t kcol = g.col_rows(), pix = g.pixels(), cg = g.cout_g();
  const std::size_t chunk = chunk_images(g);
  Tensor<T> out(Shape{g.batch, g.cout, g.ho, g.wo});
  std::vector<T> col(kcol * pix * chunk), tmp(cg * pix * chunk);
  const T* xs = x.value().ptr();
  const T* ws = w.value().ptr();
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0), ld = nb * pix;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      for (std::size_t i = 0; i < nb; ++i)
        im2col(xs + ((b0 + i) * g.cin + grp * g.cin_g()) * g.h * g.w, g, col.data() + i * pix, ld);
      detail::gemm<T>(false, false, cg, ld, kcol, T(1), ws + grp * cg * kcol, kcol, col.data(), ld,
                      T(0), tmp.data(), ld);
      for (std::size_t co = 0; co < cg; ++co) {
        const T bv = bias.defined() ? bias.value()[grp * cg + co] : T(0);
        for (std::size_t i = 0; i < nb; ++i) {
          const T* src = tmp.data() + co * ld + i * pix;
          T* dst = out.ptr() + ((b0 + i) * g.cout + grp * cg + co) * pix;
          for (std::size_t p = 0; p < pix; ++p) dst[p] = src[p] + bv;
        }
      }
    }
  }

  Var<T> result = detail::make_output(tape, "conv2d", std::move(out), {&x, &w, &bias});
  tape.record("conv2d", result, [x, w, bias, g](const Tensor<T>& grad) {
    auto X = x;
    auto W = w;
    auto Bv = bias;
    const std::size_t kcol = g.col_rows(), pix = g.pixels();
    if (Bv.defined() && Bv.requires_grad()) {
      auto& gb = Bv.mutable_grad();
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* src = grad.ptr() + (b * g.cout + co) * pix;
          T acc = T(0);
          for (std::size_t p = 0; p < pix; ++p) acc += src[p];
          gb[co] += acc;
        }
    }
    const bool need_w = W.requires_grad();
    const bool need_x = X.requires_grad();
    if (!need_w && !need_x) return;
    const std::size_t cg = g.cout_g(), chunk = chunk_images(g);
    std::vector<T> col(kcol * pix * chunk), gmat(cg * pix * chunk);
    T* gw = need_w ? W.mutable_grad().ptr() : nullptr;
    T* gx = need_x ? X.mutable_grad().ptr() : nullptr;
    const T* xs = X.value().ptr();
    const T* ws = W.value().ptr();
    for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, g.batch - b0), ld = nb * pix;
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        for (std::size_t co = 0; co < cg; ++co)
          for (std::size_t i = 0; i < nb; ++i)
            std::copy_n(grad.ptr() + ((b0 + i) * g.cout + grp * cg + co) * pix, pix,
                        gmat.data() + co * ld + i * pix);
        if (need_w) {
          for (std::size_t i = 0; i < nb; ++i)
            im2col(xs + ((b0 + i) * g.cin + grp * g.cin_g()) * g.h * g.w, g, col.data() + i * pix,
                   ld);
          detail::gemm<T>(false, true, cg, kcol, ld, T(1), gmat.data(), ld, col.data(), ld, T(1),
                          gw + grp * cg * kcol, kcol);
        }
        if (need_x) {
          detail::gemm<T>(true, false, kcol, ld, cg, T(1), ws + grp * cg * kcol, kcol, gmat.data(),
                          ld, T(0), col.data(), ld);
          for (std::size_t i = 0; i < nb; ++i)
            col2im_add(col.data() + i * pix, g, gx + ((b0 + i) * g.cin + grp * g.cin_g()) * g.h * g.w,
                       ld);
        }
      }
    }
  });
  return result;
}

template Var<float> conv2d<float>(Tape<float>&, const Var<float>&, const Var<float>&,
                                  const Var<float>&, Conv2dOptions);
template Var<double> conv2d<double>(Tape<double>&, const Var<double>&, const Var<double>&,
                                    const Var<double>&, Conv2dOptions);

}  // namespace sapool::ops
