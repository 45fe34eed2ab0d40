#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "sapool/autograd.hpp"

namespace sapool::detail {

// Row-major C[M,N] = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// Vectorized elementwise exp and logistic, in place.
template <typename T>
void exp_inplace(T* p, std::size_t n);
template <typename T>
void sigmoid_inplace(T* p, std::size_t n);
// Numerically stable softmax of one row, in place.
template <typename T>
void softmax_inplace(T* row, std::size_t n);
// Σ a·b summed in a fixed order that does not depend on pointer alignment.
template <typename T>
T dot(const T* a, const T* b, std::size_t n);

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const Var<T>* v : inputs) {
    if (v && v->defined() && v->requires_grad()) return true;
  }
  return false;
}

// Wraps an op result. In debug mode a non-finite output from finite inputs
// raises a numeric error naming the op and the enclosing layer scope.
template <typename T>
Var<T> make_output(Tape<T>& tape, std::string_view op, Tensor<T> value,
                   std::initializer_list<const Var<T>*> inputs) {
  if (tape.debug() && !value.all_finite()) {
    bool inputs_finite = true;
    for (const Var<T>* v : inputs) {
      if (v && v->defined() && !v->value().all_finite()) inputs_finite = false;
    }
    if (inputs_finite) {
      const std::string scope = tape.scope_path();
      throw NumericError("non-finite output from " + std::string(op) +
                         (scope.empty() ? std::string() : " in layer " + scope));
    }
  }
  const bool rg = tape.recording() && any_requires_grad<T>(inputs);
  return Var<T>(std::move(value), rg);
}

// Reductions over a contiguous run, split across independent lanes so the
// compiler can vectorize without reassociating a single accumulator.
template <typename T, typename F>
double lane_reduce(std::size_t n, F term) {
  constexpr std::size_t L = 16;
  T acc[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t j = 0; j < L; ++j) acc[j] += term(i + j);
  double s = 0.0;
  for (; i < n; ++i) s += static_cast<double>(term(i));
  for (std::size_t j = 0; j < L; ++j) s += static_cast<double>(acc[j]);
  return s;
}

inline void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw DimensionError(std::string(op) + ": " + what);
}

}  // namespace sapool::detail
