#include <algorithm>
#include <cmath>
#include <limits>

#include "op_util.hpp"
#include "sapool/ops.hpp"

namespace sapool::ops {

using detail::make_output;
using detail::require;

template <typename T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul",
          "expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  require(ka == kb, "matmul",
          "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out(Shape{m, n});
  const std::size_t lda = a.shape()[1];
  const std::size_t ldb = b.shape()[1];
  detail::gemm<T>(trans_a, trans_b, m, n, ka, T(1), a.value().ptr(), lda, b.value().ptr(), ldb,
                  T(0), out.ptr(), n);
  Var<T> result = make_output(tape, "matmul", std::move(out), {&a, &b});
  tape.record("matmul", result, [a, b, trans_a, trans_b, m, n, ka, lda, ldb](const Tensor<T>& g) {
    auto A = a;
    auto B = b;
    if (A.requires_grad()) {
      // dA = g·op(B)^T, laid out in A's storage orientation.
      T* ga = A.mutable_grad().ptr();
      if (!trans_a) {
        detail::gemm<T>(false, !trans_b, m, ka, n, T(1), g.ptr(), n, B.value().ptr(), ldb, T(1),
                        ga, lda);
      } else {
        detail::gemm<T>(trans_b, true, ka, m, n, T(1), B.value().ptr(), ldb, g.ptr(), n, T(1), ga,
                        lda);
      }
    }
    if (B.requires_grad()) {
      T* gb = B.mutable_grad().ptr();
      if (!trans_b) {
        detail::gemm<T>(!trans_a, false, ka, n, m, T(1), A.value().ptr(), lda, g.ptr(), n, T(1),
                        gb, ldb);
      } else {
        detail::gemm<T>(true, trans_a, n, ka, m, T(1), g.ptr(), n, A.value().ptr(), lda, T(1), gb,
                        ldb);
      }
    }
  });
  return result;
}

template <typename T>
Var<T> transpose(Tape<T>& tape, const Var<T>& a) {
  require(a.value().rank() == 2, "transpose", "expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out(Shape{c, r});
  const T* src = a.value().ptr();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  Var<T> result = make_output(tape, "transpose", std::move(out), {&a});
  tape.record("transpose", result, [a, r, c](const Tensor<T>& g) {
    auto A = a;
    T* ga = A.mutable_grad().ptr();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return result;
}

template <typename T>
Var<T> add_row_bias(Tape<T>& tape, const Var<T>& x, const Var<T>& bias) {
  require(bias.value().rank() == 1 && x.value().rank() >= 1 && x.shape().back() == bias.numel(),
          "add_row_bias", "bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t n = bias.numel();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
  Var<T> result = make_output(tape, "add_row_bias", std::move(out), {&x, &bias});
  tape.record("add_row_bias", result, [x, bias, rows, n](const Tensor<T>& g) {
    auto X = x;
    auto Bv = bias;
    if (X.requires_grad()) {
      auto& gx = X.mutable_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (Bv.requires_grad()) {
      auto& gb = Bv.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
  return result;
}

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, std::string_view op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(Var<T> v, const Tensor<T>& g, T factor = T(1)) {
  if (!v.requires_grad()) return;
  auto& gv = v.mutable_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) gv[i] += factor * g[i];
}

}  // namespace

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  Var<T> result = make_output(tape, "add", std::move(out), {&a, &b});
  tape.record("add", result, [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
  return result;
}

template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  Var<T> result = make_output(tape, "sub", std::move(out), {&a, &b});
  tape.record("sub", result, [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    accumulate(b, g, T(-1));
  });
  return result;
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  Var<T> result = make_output(tape, "mul", std::move(out), {&a, &b});
  tape.record("mul", result, [a, b](const Tensor<T>& g) {
    auto A = a;
    auto B = b;
    if (A.requires_grad()) {
      auto& ga = A.mutable_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B.value()[i];
    }
    if (B.requires_grad()) {
      auto& gb = B.mutable_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A.value()[i];
    }
  });
  return result;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= f;
  Var<T> result = make_output(tape, "scale", std::move(out), {&a});
  tape.record("scale", result, [a, f](const Tensor<T>& g) { accumulate(a, g, f); });
  return result;
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v < T(0) ? T(0) : v;  // NaN passes through
  Var<T> result = make_output(tape, "relu", std::move(out), {&x});
  tape.record("relu", result, [x](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    const T* xv = X.value().ptr();
    const T* gp = g.ptr();
    T* gxp = gx.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) gxp[i] += xv[i] > T(0) ? gp[i] : T(0);
  });
  return result;
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  detail::sigmoid_inplace(out.ptr(), out.numel());
  Var<T> result = make_output(tape, "sigmoid", std::move(out), {&x});
  Node<T>* self = result.node();
  tape.record("sigmoid", result, [x, self](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    const auto& y = self->value;
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
  return result;
}

template <typename T>
Var<T> exp(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out = x.value();
  detail::exp_inplace(out.ptr(), out.numel());
  Var<T> result = make_output(tape, "exp", std::move(out), {&x});
  Node<T>* self = result.node();
  tape.record("exp", result, [x, self](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    const auto& y = self->value;
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
  });
  return result;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  T acc = T(0);
  for (T v : x.value().data()) acc += v;
  Var<T> result = make_output(tape, "sum", Tensor<T>::scalar(acc), {&x});
  tape.record("sum", result, [x](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (auto& v : gx.data()) v += g[0];
  });
  return result;
}

template <typename T>
Var<T> mean(Tape<T>& tape, const Var<T>& x) {
  require(x.numel() > 0, "mean", "empty input");
  T acc = T(0);
  for (T v : x.value().data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  Var<T> result = make_output(tape, "mean", Tensor<T>::scalar(acc * inv), {&x});
  tape.record("mean", result, [x, inv](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (auto& v : gx.data()) v += g[0] * inv;
  });
  return result;
}

template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x) {
  require(x.value().rank() >= 1 && x.shape().back() > 0, "softmax",
          "needs a non-empty last axis, got " + shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_inplace(out.ptr() + r * n, n);
  Var<T> result = make_output(tape, "softmax", std::move(out), {&x});
  Node<T>* self = result.node();
  tape.record("softmax", result, [x, self, rows, n](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    const auto& y = self->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const T dot = detail::dot(g.ptr() + r * n, y.ptr() + r * n, n);
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return result;
}

template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels) {
  require(logits.value().rank() == 2, "softmax_cross_entropy",
          "logits must be [B,K], got " + shape_str(logits.shape()));
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  require(labels.size() == b, "softmax_cross_entropy",
          "label count " + std::to_string(labels.size()) + " vs batch " + std::to_string(b));
  Tensor<T> probs(Shape{b, k});
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                          " outside [0," + std::to_string(k) + ")");
    }
    const T* row = logits.value().ptr() + i * k;
    T* p = probs.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= z;
    loss += -(row[label] - mx - std::log(z));
  }
  loss /= static_cast<T>(b);
  Var<T> result = make_output(tape, "softmax_cross_entropy", Tensor<T>::scalar(loss), {&logits});
  std::vector<int> lab(labels.begin(), labels.end());
  tape.record("softmax_cross_entropy", result,
              [logits, probs = std::move(probs), lab = std::move(lab), b, k](const Tensor<T>& g) {
                auto L = logits;
                auto& gl = L.mutable_grad();
                const T s = g[0] / static_cast<T>(b);
                for (std::size_t i = 0; i < b; ++i)
                  for (std::size_t j = 0; j < k; ++j) {
                    const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                    gl[i * k + j] += s * (probs[i * k + j] - onehot);
                  }
              });
  return result;
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  Var<T> result = make_output(tape, "reshape", std::move(out), {&x});
  tape.record("reshape", result, [x](const Tensor<T>& g) { accumulate(x, g); });
  return result;
}

template <typename T>
Var<T> nchw_to_tokens(Tape<T>& tape, const Var<T>& x) {
  require(x.value().rank() == 4, "nchw_to_tokens", "expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{b, hw, c});
  const T* src = x.value().ptr();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(i * hw + p) * c + ch] = src[(i * c + ch) * hw + p];
  Var<T> result = make_output(tape, "nchw_to_tokens", std::move(out), {&x});
  tape.record("nchw_to_tokens", result, [x, b, c, hw](const Tensor<T>& g) {
    auto X = x;
    auto& gx = X.mutable_grad();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) gx[(i * c + ch) * hw + p] += g[(i * hw + p) * c + ch];
  });
  return result;
}

template <typename T>
Var<T> tokens_to_nchw(Tape<T>& tape, const Var<T>& tokens, std::size_t h, std::size_t w) {
  require(tokens.value().rank() == 3 && tokens.shape()[1] == h * w, "tokens_to_nchw",
          "token grid " + std::to_string(h) + "x" + std::to_string(w) + " does not match tokens " +
              shape_str(tokens.shape()));
  const std::size_t b = tokens.shape()[0], c = tokens.shape()[2], hw = h * w;
  Tensor<T> out(Shape{b, c, h, w});
  const T* src = tokens.value().ptr();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[(i * c + ch) * hw + p] = src[(i * hw + p) * c + ch];
  Var<T> result = make_output(tape, "tokens_to_nchw", std::move(out), {&tokens});
  tape.record("tokens_to_nchw", result, [tokens, b, c, hw](const Tensor<T>& g) {
    auto X = tokens;
    auto& gx = X.mutable_grad();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(i * hw + p) * c + ch] += g[(i * c + ch) * hw + p];
  });
  return result;
}

template <typename T>
Var<T> add_positional(Tape<T>& tape, const Var<T>& tokens, const Var<T>& table) {
  const auto& ts = tokens.shape();
  require(ts.size() == 2 || ts.size() == 3, "add_positional",
          "tokens must be [N,D] or [B,N,D], got " + shape_str(ts));
  require(table.value().rank() == 2, "add_positional", "table must be [N_max,D]");
  const std::size_t n = ts[ts.size() - 2], d = ts.back();
  if (n > table.shape()[0]) {
    throw ContractError("add_positional: " + std::to_string(n) + " tokens exceed table capacity " +
                        std::to_string(table.shape()[0]));
  }
  require(d == table.shape()[1], "add_positional",
          "token width " + std::to_string(d) + " vs table " + shape_str(table.shape()));
  const std::size_t b = ts.size() == 3 ? ts[0] : 1;
  Tensor<T> out = tokens.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n * d; ++j) out[i * n * d + j] += table.value()[j];
  Var<T> result = make_output(tape, "add_positional", std::move(out), {&tokens, &table});
  tape.record("add_positional", result, [tokens, table, b, n, d](const Tensor<T>& g) {
    accumulate(tokens, g);
    auto P = table;
    if (P.requires_grad()) {
      auto& gp = P.mutable_grad();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n * d; ++j) gp[j] += g[i * n * d + j];
    }
  });
  return result;
}

#define SAPOOL_INSTANTIATE_BASIC(T)                                                            \
  template Var<T> matmul<T>(Tape<T>&, const Var<T>&, const Var<T>&, bool, bool);              \
  template Var<T> transpose<T>(Tape<T>&, const Var<T>&);                                      \
  template Var<T> add_row_bias<T>(Tape<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> add<T>(Tape<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> sub<T>(Tape<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> mul<T>(Tape<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> scale<T>(Tape<T>&, const Var<T>&, double);                                  \
  template Var<T> relu<T>(Tape<T>&, const Var<T>&);                                           \
  template Var<T> sigmoid<T>(Tape<T>&, const Var<T>&);                                        \
  template Var<T> exp<T>(Tape<T>&, const Var<T>&);                                            \
  template Var<T> sum<T>(Tape<T>&, const Var<T>&);                                            \
  template Var<T> mean<T>(Tape<T>&, const Var<T>&);                                           \
  template Var<T> softmax<T>(Tape<T>&, const Var<T>&);                                        \
  template Var<T> softmax_cross_entropy<T>(Tape<T>&, const Var<T>&, std::span<const int>);    \
  template Var<T> reshape<T>(Tape<T>&, const Var<T>&, Shape);                                 \
  template Var<T> nchw_to_tokens<T>(Tape<T>&, const Var<T>&);                                 \
  template Var<T> tokens_to_nchw<T>(Tape<T>&, const Var<T>&, std::size_t, std::size_t);       \
  template Var<T> add_positional<T>(Tape<T>&, const Var<T>&, const Var<T>&);

SAPOOL_INSTANTIATE_BASIC(float)
SAPOOL_INSTANTIATE_BASIC(double)

}  // namespace sapool::ops
