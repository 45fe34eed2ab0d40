#include <algorithm>
#include <cmath>
#include <vector>

#include "op_util.hpp"
#include "sapool/ops.hpp"

namespace sapool::ops {

template <typename T>
Var<T> multi_head_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            std::size_t heads, Tensor<T>* probs) {
  const auto& s = q.shape();
  detail::require(s.size() == 2 || s.size() == 3, "multi_head_attention",
                  "expects [N,D] or [B,N,D], got " + shape_str(s));
  detail::require(k.shape() == s && v.shape() == s, "multi_head_attention",
                  "q/k/v shapes differ: " + shape_str(s) + ", " + shape_str(k.shape()) + ", " +
                      shape_str(v.shape()));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t n = s[s.size() - 2], d = s.back();
  if (heads == 0 || d % heads != 0 || d / heads == 0) {
    throw ContractError("multi_head_attention: width " + std::to_string(d) +
                        " does not split into " + std::to_string(heads) + " non-empty heads");
  }
  if (n == 0) throw ContractError("multi_head_attention: empty token sequence");
  const std::size_t dk = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Tensor<T> out(s);
  std::vector<T> p(batch * heads * n * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * n * d + h * dk;
      T* ph = p.data() + (b * heads + h) * n * n;
      detail::gemm<T>(false, true, n, n, dk, scale, q.value().ptr() + off, d, k.value().ptr() + off,
                      d, T(0), ph, n);
      for (std::size_t r = 0; r < n; ++r) detail::softmax_inplace(ph + r * n, n);
      detail::gemm<T>(false, false, n, dk, n, T(1), ph, n, v.value().ptr() + off, d, T(0),
                      out.ptr() + off, d);
    }
  }
  if (probs) *probs = Tensor<T>(Shape{batch, heads, n, n}, p);

  Var<T> result = detail::make_output(tape, "multi_head_attention", std::move(out), {&q, &k, &v});
  tape.record("multi_head_attention", result,
              [q, k, v, p = std::move(p), batch, heads, n, d, dk, scale](const Tensor<T>& g) {
                auto Q = q;
                auto K = k;
                auto V = v;
                T* gq = Q.requires_grad() ? Q.mutable_grad().ptr() : nullptr;
                T* gk = K.requires_grad() ? K.mutable_grad().ptr() : nullptr;
                T* gv = V.requires_grad() ? V.mutable_grad().ptr() : nullptr;
                std::vector<T> dp(n * n);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = b * n * d + h * dk;
                    const T* ph = p.data() + (b * heads + h) * n * n;
                    const T* go = g.ptr() + off;
                    if (gv) {
                      detail::gemm<T>(true, false, n, dk, n, T(1), ph, n, go, d, T(1), gv + off, d);
                    }
                    if (!gq && !gk) continue;
                    detail::gemm<T>(false, true, n, n, dk, T(1), go, d, V.value().ptr() + off, d,
                                    T(0), dp.data(), n);
                    for (std::size_t r = 0; r < n; ++r) {
                      const T dot = detail::dot(dp.data() + r * n, ph + r * n, n);
                      for (std::size_t c = 0; c < n; ++c)
                        dp[r * n + c] = ph[r * n + c] * (dp[r * n + c] - dot);
                    }
                    if (gq) {
                      detail::gemm<T>(false, false, n, dk, n, scale, dp.data(), n,
                                      K.value().ptr() + off, d, T(1), gq + off, d);
                    }
                    if (gk) {
                      detail::gemm<T>(true, false, n, dk, n, scale, dp.data(), n,
                                      Q.value().ptr() + off, d, T(1), gk + off, d);
                    }
                  }
                }
              });
  return result;
}

template Var<float> multi_head_attention<float>(Tape<float>&, const Var<float>&, const Var<float>&,
                                                const Var<float>&, std::size_t, Tensor<float>*);
template Var<double> multi_head_attention<double>(Tape<double>&, const Var<double>&,
                                                  const Var<double>&, const Var<double>&,
                                                  std::size_t, Tensor<double>*);

}  // namespace sapool::ops
