#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sapool/ops.hpp"
#include "sapool/profile.hpp"
#include "sapool/rng.hpp"

namespace sapool {

enum class Mode { train, eval };

template <typename T>
struct Param {
  std::string name;
  Var<T> var;
};

template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* tensor;
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) = 0;
  virtual void collect_buffers(const std::string& /*prefix*/, std::vector<Buffer<T>>& /*out*/) {}

  std::vector<Param<T>> parameters(const std::string& prefix = "") {
    std::vector<Param<T>> out;
    collect_parameters(prefix, out);
    return out;
  }
  std::vector<Buffer<T>> buffers(const std::string& prefix = "") {
    std::vector<Buffer<T>> out;
    collect_buffers(prefix, out);
    return out;
  }
};

// Weights ~ U(-b, b), b = gain * sqrt(3 / fan_in); biases start at zero.
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, RngState& rng);

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, ops::Conv2dOptions options,
         bool bias, RngState& rng, double gain = 1.4142135623730951);

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  std::size_t kernel() const { return kernel_; }
  const ops::Conv2dOptions& options() const { return options_; }
  Shape output_shape(const Shape& in) const;
  // Multiply-accumulates x2 for one forward pass on `in`.
  std::uint64_t flops(const Shape& in) const;
  // Records this conv as `name`; effective FLOPs look up `name`.weight.
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const;

  Var<T> weight;
  Var<T> bias;  // undefined when constructed without bias

 private:
  std::size_t cin_ = 0, cout_ = 0, kernel_ = 1;
  ops::Conv2dOptions options_{};
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode);
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const;

  Var<T> gamma, beta;
  ops::BatchNormState<T> state;
};

// y = x·W + b with W stored [in, out].
template <typename T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, RngState& rng, double gain = 1.0);

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Var<T> weight, bias;
};

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class BatchNorm2d<float>;
extern template class BatchNorm2d<double>;
extern template class Linear<float>;
extern template class Linear<double>;

}  // namespace sapool
