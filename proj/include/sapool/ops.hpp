#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sapool/autograd.hpp"

// Differentiable tensor operations. Every op takes the tape that records it;
// when the tape is not recording, outputs carry no gradient bookkeeping.
namespace sapool::ops {

// --- linear algebra -------------------------------------------------------

// op(a)·op(b) for rank-2 tensors; trans flags select the transposed operand.
template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b, bool trans_a = false,
              bool trans_b = false);

template <typename T>
Var<T> transpose(Tape<T>& tape, const Var<T>& a);

// x[..., N] + bias[N], broadcast over all leading axes.
template <typename T>
Var<T> add_row_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias);

// --- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, double factor);

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x);
template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x);
template <typename T>
Var<T> exp(Tape<T>& tape, const Var<T>& x);

// --- reductions -----------------------------------------------------------

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);
template <typename T>
Var<T> mean(Tape<T>& tape, const Var<T>& x);

// Softmax over the last axis, max-subtracted.
template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x);

// Mean negative log-likelihood of integer labels under softmax(logits[B,K]).
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels);

// --- shape ----------------------------------------------------------------

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape);

// [B,C,h,w] -> [B,h*w,C], tokens in row-major order over the (h,w) grid.
template <typename T>
Var<T> nchw_to_tokens(Tape<T>& tape, const Var<T>& x);
// [B,N,C] -> [B,C,h,w] with N == h*w.
template <typename T>
Var<T> tokens_to_nchw(Tape<T>& tape, const Var<T>& tokens, std::size_t h, std::size_t w);

// --- convolution ------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// Cross-correlation. x[B,Cin,H,W], w[Cout,Cin/groups,k,k], bias[Cout] or undefined.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              Conv2dOptions options);

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

// --- normalization ----------------------------------------------------------

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

// Train mode normalizes with biased batch variance and folds the unbiased
// estimate into the running stats; eval mode applies the running stats.
template <typename T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormState<T>& state, bool train);

// Normalizes each row of x[..., C] over its last axis.
template <typename T>
Var<T> layernorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 double eps = 1e-5);

// --- resampling and pooling -------------------------------------------------

// Half-pixel centers: src = (dst + 0.5) * in / out - 0.5, clamped at the edges.
template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& x, std::size_t out_h, std::size_t out_w);

// Per s×s window: sum(pi * x) / sum(pi). Kernel = stride = s, no padding.
template <typename T>
Var<T> weighted_pool(Tape<T>& tape, const Var<T>& x, const Var<T>& pi, std::size_t s);

template <typename T>
Var<T> avg_pool2d(Tape<T>& tape, const Var<T>& x, std::size_t s);
template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, std::size_t s);
// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x);

// --- attention ----------------------------------------------------------------

// tokens[B,N,D] (or [N,D]) + table[:N].
template <typename T>
Var<T> add_positional(Tape<T>& tape, const Var<T>& tokens, const Var<T>& table);

// Packed multi-head scaled dot-product attention on q,k,v[B,N,D] (or [N,D]).
// Head j uses columns [j*D/heads, (j+1)*D/heads). If probs is given it
// receives the attention weights [B,heads,N,N].
template <typename T>
Var<T> multi_head_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            std::size_t heads, Tensor<T>* probs = nullptr);

}  // namespace sapool::ops
