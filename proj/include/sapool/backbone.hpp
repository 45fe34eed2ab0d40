#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sapool/pooling.hpp"
#include "sapool/profile.hpp"

namespace sapool {

enum class Arch { tiny_resnet, tiny_mobilenet };
enum class Placement { inner, outer };
enum class BlockKind { basic, inverted };

std::string_view to_string(Arch a);
std::string_view to_string(Placement p);
Arch parse_arch(std::string_view s);
Placement parse_placement(std::string_view s);
// Outer for ResNet-style, inner for MobileNet-style.
Placement default_placement(Arch a);

struct BackboneConfig {
  Arch arch = Arch::tiny_resnet;
  PoolMethod pool = PoolMethod::sap;
  Placement placement = Placement::outer;
  std::size_t s1 = 1;
  double width_mult = 1.0;
  std::size_t in_channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  // Per pooling site, in execution order.
  std::vector<std::size_t> patch_sizes{4, 2, 1, 1};
  std::vector<double> channel_ratios{1.0, 1.0, 0.25, 0.25};
  std::size_t num_heads = 2;
  SapAblation ablation{};
  bool pre_ln = false;
};

struct PoolSite {
  PoolMethod method = PoolMethod::avg;
  std::size_t stride = 2;
  SapConfig sap{};
};

struct StageSpec {
  std::size_t num_blocks = 1;
  std::size_t channels = 16;
  BlockKind kind = BlockKind::basic;
  std::size_t expansion = 1;
  std::optional<PoolSite> pool;
};

struct BackboneLayout {
  std::size_t stem_channels = 16;
  std::optional<PoolSite> stem_pool;
  std::vector<StageSpec> stages;
  Placement placement = Placement::outer;
};

// Channels after a width multiplier: max(1, round(c · mult)).
std::size_t scaled_channels(std::size_t c, double mult);

// tiny-ResNet: stem 3×3/1, stem pool (s1), 3 stages × 2 basic blocks (16/32/64),
// one stride-2 pool per stage. tiny-MobileNet: stem, 4 inverted-residual
// stages (t=6; 16/24/32/64) with pool strides (s1,2,2,2).
BackboneLayout make_layout(const BackboneConfig& config);

struct SiteGeometry {
  std::string id;  // "pool0", "pool1", ...
  int stage = 0;
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t stride = 1;
};

// Walks the layout over the configured input size and validates every
// pooling site. Throws ConfigError naming the offending stage.
std::vector<SiteGeometry> preflight(const BackboneConfig& config);

template <typename T>
class Block : public Module<T> {
 public:
  virtual Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) = 0;
  virtual Shape profile(Profiler& prof, const std::string& name, const Shape& in) const = 0;
  // Dense (non-depthwise) conv weights, eligible for channel pruning.
  virtual void prunable(const std::string& prefix, std::vector<Param<T>>& out) = 0;
};

template <typename T>
class BasicBlock : public Block<T> {
 public:
  BasicBlock(std::size_t cin, std::size_t cout, RngState& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;
  void prunable(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) override;

  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> proj;  // 1×1 shortcut when channels change
  std::optional<BatchNorm2d<T>> proj_bn;
};

template <typename T>
class InvertedResidual : public Block<T> {
 public:
  InvertedResidual(std::size_t cin, std::size_t cout, std::size_t expansion, RngState& rng);
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode) override;
  Shape profile(Profiler& prof, const std::string& name, const Shape& in) const override;
  void prunable(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) override;

  Conv2d<T> expand, depthwise, project;
  BatchNorm2d<T> bn_expand, bn_depthwise, bn_project;
  bool residual = false;
};

template <typename T>
struct ForwardTrace {
  // Input activation of every pooling site, keyed "pool0", "pool1", ...
  std::vector<std::pair<std::string, Var<T>>> pool_inputs;
  // Input shape of every block, keyed "stage1.block0", ...
  std::vector<std::pair<std::string, Shape>> block_inputs;
  // Optional hook applied to the stem output ("stem") and to every block
  // output ("stage1.block0", ...); returns the activation to continue with.
  std::function<Var<T>(const std::string&, const Var<T>&)> intercept;
};

template <typename T>
class Backbone : public Module<T> {
 public:
  Backbone(const BackboneConfig& config, RngState& rng);

  // x[B,in_channels,H,W] -> logits[B,num_classes]
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Mode mode, ForwardTrace<T>* trace = nullptr);

  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) override;
  // Stage-1 dense conv weights (stem and depthwise convs excluded).
  std::vector<Param<T>> prunable_weights();

  NetworkProfile profile(std::size_t batch, std::size_t scalar_bytes,
                         KeepFraction keep = {}) const;

  const BackboneConfig& config() const { return config_; }
  const BackboneLayout& layout() const { return layout_; }
  const std::vector<SiteGeometry>& sites() const { return sites_; }
  std::vector<std::string> pool_site_ids() const;
  Linear<T>& classifier() { return head_; }
  PoolLayer<T>* pool_site(const std::string& id);

 private:
  struct Stage {
    std::vector<std::unique_ptr<Block<T>>> blocks;
    std::unique_ptr<PoolLayer<T>> pool;
    std::string pool_id;
    std::size_t pool_after = 0;  // pool runs after this many blocks
  };

  BackboneConfig config_;
  BackboneLayout layout_;
  std::vector<SiteGeometry> sites_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::unique_ptr<PoolLayer<T>> stem_pool_;
  std::vector<Stage> stages_;
  Linear<T> head_;
};

// Analytic per-layer activation bytes and peak live set, in the same record
// list as the FLOPs profile.
template <typename T>
NetworkProfile activation_memory_profile(const Backbone<T>& net, const Shape& input_shape);

// Analytic FLOPs (one multiply-accumulate = 2). With `keep`, each weighted
// layer's effective count is scaled by the active fraction of its weight.
template <typename T>
NetworkProfile count_flops(const Backbone<T>& net, const Shape& input_shape, KeepFraction keep = {});

extern template class BasicBlock<float>;
extern template class BasicBlock<double>;
extern template class InvertedResidual<float>;
extern template class InvertedResidual<double>;
extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace sapool
