#include "sapool/nn.hpp"

#include <cmath>

namespace sapool {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, RngState& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  fill_uniform<T>(t.data(), rng, -bound, bound);
  return t;
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel,
                  ops::Conv2dOptions options, bool with_bias, RngState& rng, double gain)
    : cin_(cin), cout_(cout), kernel_(kernel), options_(options) {
  if (options.groups == 0 || cin % options.groups != 0 || cout % options.groups != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(options.groups));
  }
  const std::size_t cin_g = cin / options.groups;
  weight = Var<T>(fan_in_uniform<T>(Shape{cout, cin_g, kernel, kernel}, cin_g * kernel * kernel,
                                    gain, rng),
                  true);
  if (with_bias) bias = Var<T>(Tensor<T>(Shape{cout}), true);
}

template <typename T>
Var<T> Conv2d<T>::forward(Tape<T>& tape, const Var<T>& x) const {
  return ops::conv2d(tape, x, weight, bias, options_);
}

template <typename T>
void Conv2d<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "weight"), weight});
  if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias});
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  return Shape{in[0], cout_, ops::conv_out_extent(in[2], kernel_, options_.stride, options_.padding),
               ops::conv_out_extent(in[3], kernel_, options_.stride, options_.padding)};
}

template <typename T>
std::uint64_t Conv2d<T>::flops(const Shape& in) const {
  const Shape out = output_shape(in);
  const std::uint64_t cin_g = cin_ / options_.groups;
  return 2ull * kernel_ * kernel_ * cin_g * cout_ * out[0] * out[2] * out[3];
}

template <typename T>
Shape Conv2d<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  const Shape out = output_shape(in);
  prof.record(name, options_.groups > 1 ? "dwconv" : "conv", in, out, flops(in), {},
              join_name(name, "weight"));
  return out;
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(Tensor<T>(Shape{channels}, T(1)), true),
      beta(Tensor<T>(Shape{channels}, T(0)), true),
      state(channels) {}

template <typename T>
Var<T> BatchNorm2d<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) {
  return ops::batchnorm2d(tape, x, gamma, beta, state, mode == Mode::train);
}

template <typename T>
void BatchNorm2d<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "gamma"), gamma});
  out.push_back({join_name(prefix, "beta"), beta});
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) {
  out.push_back({join_name(prefix, "running_mean"), &state.running_mean});
  out.push_back({join_name(prefix, "running_var"), &state.running_var});
}

template <typename T>
Shape BatchNorm2d<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  prof.record(name, "batchnorm", in, in, shape_numel(in));
  return in;
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, RngState& rng, double gain)
    : weight(fan_in_uniform<T>(Shape{in, out}, in, gain, rng), true),
      bias(Tensor<T>(Shape{out}), true) {}

template <typename T>
Var<T> Linear<T>::forward(Tape<T>& tape, const Var<T>& x) const {
  return ops::add_row_bias(tape, ops::matmul(tape, x, weight), bias);
}

template <typename T>
void Linear<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "weight"), weight});
  out.push_back({join_name(prefix, "bias"), bias});
}

template Tensor<float> fan_in_uniform<float>(Shape, std::size_t, double, RngState&);
template Tensor<double> fan_in_uniform<double>(Shape, std::size_t, double, RngState&);
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace sapool
