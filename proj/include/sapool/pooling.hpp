#pragma once

#include <memory>
#include <string>
#include <string_view>

#include "sapool/attention.hpp"
#include "sapool/nn.hpp"

namespace sapool {

enum class PoolMethod { sap, lip, strided, avg, max };

std::string_view to_string(PoolMethod m);
PoolMethod parse_pool_method(std::string_view s);  // ConfigError on unknown names

struct SapAblation {
  bool bn1 = true;
  bool bn2 = true;
  bool exp = true;
  bool pe = true;
  bool sigmoid = true;

  bool operator==(const SapAblation&) const = default;
};

struct SapConfig {
  std::size_t patch_size = 2;   // ε_p
  double channel_ratio = 1.0;   // ε_r
  std::size_t num_heads = 2;    // m
  std::size_t stride = 2;       // s
  SapAblation ablation{};
  bool pre_ln = false;
};

// ε_r·C, or ConfigError when it is not a positive integer.
std::size_t sap_embed_dim(double channel_ratio, std::size_t channels, const std::string& layer);

// Common interface: [B,C,H,W] -> [B,C,H/s,W/s].
template <typename T>
class PoolLayer : public Module<T> {
 public:
  virtual PoolMethod method() const = 0;
  virtual std::size_t stride() const = 0;
  virtual Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) = 0;
  virtual Shape profile(Profiler& prof, const std::string& name, const Shape& in) const = 0;
};

template <typename T>
struct SapTrace {
  Var<T> tokens;    // after patch embedding (and PE)
  Var<T> attended;  // after MSA
  Var<T> pi;        // restored weight map
};

template <typename T>
class SelfAttentivePool : public PoolLayer<T> {
 public:
  // Validates the config against a C×H×W input; errors name `layer`.
  SelfAttentivePool(std::size_t channels, std::size_t height, std::size_t width, SapConfig config,
                    RngState& rng, std::string layer = "sap");

  PoolMethod method() const override { return PoolMethod::sap; }
  std::size_t stride() const override { return config_.stride; }
  const SapConfig& config() const { return config_; }
  std::size_t embed_dim() const { return embed_dim_; }

  // [B,C,H,W] -> tokens [B, H·W/ε_p², ε_r·C]
  Var<T> patch_embed(Tape<T>& tape, const Var<T>& x, Mode mode);
  // tokens -> π [B,C,H,W]
  Var<T> restore(Tape<T>& tape, const Var<T>& tokens, Mode mode, std::size_t height,
                 std::size_t width);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode, SapTrace<T>* trace);

  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;

  Conv2d<T> embed;
  BatchNorm2d<T> bn1;
  PositionalEncoding<T> pe;
  MultiHeadSelfAttention<T> msa;
  Conv2d<T> restore_conv;
  BatchNorm2d<T> bn2;

 private:
  void check_spatial(const Shape& in) const;

  SapConfig config_;
  std::size_t channels_;
  std::size_t embed_dim_;
  std::string layer_;
};

// π = exp(G(x)), G a 1×1 conv with bias.
template <typename T>
class LipPool : public PoolLayer<T> {
 public:
  LipPool(std::size_t channels, std::size_t stride, RngState& rng);

  PoolMethod method() const override { return PoolMethod::lip; }
  std::size_t stride() const override { return stride_; }
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;

  Conv2d<T> logit;

 private:
  std::size_t stride_;
};

// 3×3 conv, stride s, padding 1, with bias.
template <typename T>
class StridedConvPool : public PoolLayer<T> {
 public:
  StridedConvPool(std::size_t channels, std::size_t stride, RngState& rng);

  PoolMethod method() const override { return PoolMethod::strided; }
  std::size_t stride() const override { return stride_; }
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;

  Conv2d<T> conv;

 private:
  std::size_t stride_;
};

template <typename T>
class AvgPool : public PoolLayer<T> {
 public:
  explicit AvgPool(std::size_t stride) : stride_(stride) {}

  PoolMethod method() const override { return PoolMethod::avg; }
  std::size_t stride() const override { return stride_; }
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  void collect_parameters(const std::string&, std::vector<Param<T>>&) override {}
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;

 private:
  std::size_t stride_;
};

template <typename T>
class MaxPool : public PoolLayer<T> {
 public:
  explicit MaxPool(std::size_t stride) : stride_(stride) {}

  PoolMethod method() const override { return PoolMethod::max; }
  std::size_t stride() const override { return stride_; }
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  void collect_parameters(const std::string&, std::vector<Param<T>>&) override {}
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;

 private:
  std::size_t stride_;
};

// Builds a pooling layer for a C×H×W input. For sap, `sap.stride` is
// overridden by `stride`.
template <typename T>
std::unique_ptr<PoolLayer<T>> make_pool(PoolMethod method, std::size_t channels,
                                        std::size_t height, std::size_t width, std::size_t stride,
                                        SapConfig sap, RngState& rng, const std::string& layer);

extern template class SelfAttentivePool<float>;
extern template class SelfAttentivePool<double>;
extern template class LipPool<float>;
extern template class LipPool<double>;
extern template class StridedConvPool<float>;
extern template class StridedConvPool<double>;
extern template class AvgPool<float>;
extern template class AvgPool<double>;
extern template class MaxPool<float>;
extern template class MaxPool<double>;

}  // namespace sapool
