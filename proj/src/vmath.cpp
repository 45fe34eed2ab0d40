#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "op_util.hpp"

namespace sapool::detail {
namespace {

// Every element goes through the packet path of an aligned, padded buffer,
// so results never depend on where the caller's data happens to sit.
constexpr std::size_t kChunk = 512;
constexpr std::size_t kPad = 16;

template <typename T, typename F>
void chunked(T* p, std::size_t n, F&& f) {
  alignas(64) T buf[kChunk];
  for (std::size_t s = 0; s < n; s += kChunk) {
    const std::size_t len = std::min(kChunk, n - s);
    const std::size_t padded = (len + kPad - 1) / kPad * kPad;
    std::copy_n(p + s, len, buf);
    std::fill(buf + len, buf + padded, T(0));
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64> a(buf, static_cast<Eigen::Index>(padded));
    f(a, buf, p + s, len);
    std::copy_n(buf, len, p + s);
  }
}

// The packet exp clamps its argument; restore IEEE overflow and NaN.
// Plain loops here vectorize, Eigen's select on arrays does not.
template <typename T>
void fix_exp(T* out, const T* x, std::size_t n) {
  const T hi = std::log(std::numeric_limits<T>::max());
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    out[i] = v > hi ? std::numeric_limits<T>::infinity() : (v != v ? v : out[i]);
  }
}

}  // namespace

template <typename T>
void exp_inplace(T* p, std::size_t n) {
  chunked(p, n, [](auto& a, T* buf, const T* x, std::size_t len) {
    a = a.exp();
    fix_exp(buf, x, len);
  });
}

template <typename T>
void sigmoid_inplace(T* p, std::size_t n) {
  chunked(p, n, [](auto& a, T* buf, const T* x, std::size_t len) {
    // exp(-|v|) never overflows; the sign picks which form to use.
    a = (-a.abs()).exp();
    for (std::size_t i = 0; i < len; ++i) {
      const T e = buf[i], v = x[i], r = T(1) / (T(1) + e);
      buf[i] = v != v ? v : (v >= T(0) ? r : e * r);
    }
  });
}

template <typename T>
void softmax_inplace(T* row, std::size_t n) {
  thread_local std::vector<T, Eigen::aligned_allocator<T>> buf;
  const std::size_t padded = (n + kPad - 1) / kPad * kPad;
  buf.resize(padded);
  std::copy_n(row, n, buf.data());
  // exp(-inf) = 0, so padding drops out of the sum.
  std::fill(buf.data() + n, buf.data() + padded, -std::numeric_limits<T>::infinity());
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64> a(buf.data(), static_cast<Eigen::Index>(padded));
  a -= a.maxCoeff();
  for (std::size_t i = 0; i < n; ++i) row[i] = buf[i];
  a = a.exp();
  fix_exp(buf.data(), row, n);
  a /= a.sum();
  std::copy_n(buf.data(), n, row);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[kPad] = {};
  std::size_t i = 0;
  for (; i + kPad <= n; i += kPad)
    for (std::size_t l = 0; l < kPad; ++l) acc[l] += a[i + l] * b[i + l];
  for (std::size_t l = 0; i + l < n; ++l) acc[l] += a[i + l] * b[i + l];
  for (std::size_t w = kPad / 2; w > 0; w /= 2)
    for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
  return acc[0];
}

template void softmax_inplace<float>(float*, std::size_t);
template void softmax_inplace<double>(double*, std::size_t);
template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void exp_inplace<float>(float*, std::size_t);
template void exp_inplace<double>(double*, std::size_t);
template void sigmoid_inplace<float>(float*, std::size_t);
template void sigmoid_inplace<double>(double*, std::size_t);

}  // namespace sapool::detail
