#include "sapool/backbone.hpp"

#include <cmath>

namespace sapool {

std::string_view to_string(Arch a) {
  return a == Arch::tiny_resnet ? "tiny_resnet" : "tiny_mobilenet";
}

std::string_view to_string(Placement p) { return p == Placement::inner ? "inner" : "outer"; }

Arch parse_arch(std::string_view s) {
  if (s == "tiny_resnet") return Arch::tiny_resnet;
  if (s == "tiny_mobilenet") return Arch::tiny_mobilenet;
  throw ConfigError("unknown architecture '" + std::string(s) +
                    "' (expected tiny_resnet or tiny_mobilenet)");
}

Placement parse_placement(std::string_view s) {
  if (s == "inner") return Placement::inner;
  if (s == "outer") return Placement::outer;
  throw ConfigError("unknown placement '" + std::string(s) + "' (expected inner or outer)");
}

Placement default_placement(Arch a) {
  return a == Arch::tiny_resnet ? Placement::outer : Placement::inner;
}

std::size_t scaled_channels(std::size_t c, double mult) {
  const double v = std::round(static_cast<double>(c) * mult);
  return v < 1.0 ? 1 : static_cast<std::size_t>(v);
}

namespace {

SapConfig site_sap(const BackboneConfig& cfg, std::size_t site, std::size_t stride) {
  SapConfig s;
  if (site < cfg.patch_sizes.size()) s.patch_size = cfg.patch_sizes[site];
  if (site < cfg.channel_ratios.size()) s.channel_ratio = cfg.channel_ratios[site];
  s.num_heads = cfg.num_heads;
  s.stride = stride;
  s.ablation = cfg.ablation;
  s.pre_ln = cfg.pre_ln;
  return s;
}

std::string site_id(std::size_t k) { return "pool" + std::to_string(k); }

std::string stage_label(int stage) {
  return stage == 0 ? std::string("stem") : "stage " + std::to_string(stage);
}

}  // namespace

BackboneLayout make_layout(const BackboneConfig& cfg) {
  if (!(cfg.width_mult > 0.0)) throw ConfigError("width multiplier must be positive");
  if (cfg.s1 == 0) throw ConfigError("s1 must be positive");
  BackboneLayout l;
  l.placement = cfg.placement;
  const double w = cfg.width_mult;
  std::size_t site = 0;
  auto pool = [&](std::size_t stride) {
    PoolSite p{cfg.pool, stride, site_sap(cfg, site, stride)};
    ++site;
    return p;
  };
  l.stem_channels = scaled_channels(16, w);
  if (cfg.arch == Arch::tiny_resnet) {
    l.stem_pool = pool(cfg.s1);
    for (std::size_t c : {16, 32, 64}) {
      l.stages.push_back({2, scaled_channels(c, w), BlockKind::basic, 1, pool(2)});
    }
  } else {
    const std::size_t channels[] = {16, 24, 32, 64};
    const std::size_t blocks[] = {1, 2, 2, 2};
    for (int i = 0; i < 4; ++i) {
      l.stages.push_back({blocks[i], scaled_channels(channels[i], w), BlockKind::inverted, 6,
                          pool(i == 0 ? cfg.s1 : 2)});
    }
  }
  return l;
}

std::vector<SiteGeometry> preflight(const BackboneConfig& cfg) {
  if (cfg.in_channels == 0 || cfg.height == 0 || cfg.width == 0 || cfg.num_classes == 0) {
    throw ConfigError("input channels, resolution and class count must be positive");
  }
  const BackboneLayout l = make_layout(cfg);
  std::vector<SiteGeometry> sites;
  std::size_t h = cfg.height, w = cfg.width;
  auto visit = [&](const PoolSite& p, int stage, std::size_t c) {
    SiteGeometry g{site_id(sites.size()), stage, c, h, w, p.stride};
    const std::string where = stage_label(stage) + " (" + g.id + " at " + std::to_string(c) + "x" +
                              std::to_string(h) + "x" + std::to_string(w) + ")";
    if (p.stride == 0 || h % p.stride != 0 || w % p.stride != 0) {
      throw ConfigError(where + ": resolution not divisible by stride " + std::to_string(p.stride));
    }
    if (p.method == PoolMethod::sap) {
      const std::size_t e = p.sap.patch_size;
      if (e == 0 || h % e != 0 || w % e != 0) {
        throw ConfigError(where + ": resolution not divisible by patch size " + std::to_string(e));
      }
      const std::size_t d = sap_embed_dim(p.sap.channel_ratio, c, where);
      if (p.sap.num_heads == 0 || d % p.sap.num_heads != 0) {
        throw ConfigError(where + ": embed dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(p.sap.num_heads) + " heads");
      }
    }
    sites.push_back(g);
    h /= p.stride;
    w /= p.stride;
  };
  if (l.stem_pool) visit(*l.stem_pool, 0, l.stem_channels);
  for (std::size_t i = 0; i < l.stages.size(); ++i) {
    if (l.stages[i].pool) visit(*l.stages[i].pool, static_cast<int>(i + 1), l.stages[i].channels);
  }
  if (cfg.pool == PoolMethod::sap &&
      (cfg.patch_sizes.size() != sites.size() || cfg.channel_ratios.size() != sites.size())) {
    throw ConfigError("sap needs one patch size and one channel ratio per pooling site (" +
                      std::to_string(sites.size()) + " sites, got " +
                      std::to_string(cfg.patch_sizes.size()) + " and " +
                      std::to_string(cfg.channel_ratios.size()) + ")");
  }
  return sites;
}

// --- blocks -------------------------------------------------------------------

template <typename T>
BasicBlock<T>::BasicBlock(std::size_t cin, std::size_t cout, RngState& rng)
    : conv1(cin, cout, 3, {1, 1, 1}, false, rng),
      conv2(cout, cout, 3, {1, 1, 1}, false, rng),
      bn1(cout),
      bn2(cout) {
  if (cin != cout) {
    proj.emplace(cin, cout, 1, ops::Conv2dOptions{}, false, rng);
    proj_bn.emplace(cout);
  }
}

template <typename T>
Var<T> BasicBlock<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) {
  Var<T> h = ops::relu(tape, bn1.forward(tape, conv1.forward(tape, x), mode));
  h = bn2.forward(tape, conv2.forward(tape, h), mode);
  Var<T> skip = proj ? proj_bn->forward(tape, proj->forward(tape, x), mode) : x;
  return ops::relu(tape, ops::add(tape, h, skip));
}

template <typename T>
Shape BasicBlock<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  Shape a = conv1.profile(prof, join_name(name, "conv1"), in);
  prof.hold(in);
  bn1.profile(prof, join_name(name, "bn1"), a);
  prof.record(join_name(name, "relu1"), "relu", a, a, shape_numel(a));
  a = conv2.profile(prof, join_name(name, "conv2"), a);
  bn2.profile(prof, join_name(name, "bn2"), a);
  prof.release();
  Shape skip = in;
  if (proj) {
    prof.hold(a);
    skip = proj->profile(prof, join_name(name, "proj"), in);
    proj_bn->profile(prof, join_name(name, "proj_bn"), skip);
    prof.release();
  }
  prof.record(join_name(name, "add"), "add", a, a, shape_numel(a), {skip});
  prof.record(join_name(name, "relu2"), "relu", a, a, shape_numel(a));
  return a;
}

template <typename T>
void BasicBlock<T>::prunable(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "conv1.weight"), conv1.weight});
  out.push_back({join_name(prefix, "conv2.weight"), conv2.weight});
  if (proj) out.push_back({join_name(prefix, "proj.weight"), proj->weight});
}

template <typename T>
void BasicBlock<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  conv1.collect_parameters(join_name(prefix, "conv1"), out);
  bn1.collect_parameters(join_name(prefix, "bn1"), out);
  conv2.collect_parameters(join_name(prefix, "conv2"), out);
  bn2.collect_parameters(join_name(prefix, "bn2"), out);
  if (proj) {
    proj->collect_parameters(join_name(prefix, "proj"), out);
    proj_bn->collect_parameters(join_name(prefix, "proj_bn"), out);
  }
}

template <typename T>
void BasicBlock<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) {
  bn1.collect_buffers(join_name(prefix, "bn1"), out);
  bn2.collect_buffers(join_name(prefix, "bn2"), out);
  if (proj_bn) proj_bn->collect_buffers(join_name(prefix, "proj_bn"), out);
}

template <typename T>
InvertedResidual<T>::InvertedResidual(std::size_t cin, std::size_t cout, std::size_t expansion,
                                      RngState& rng)
    : expand(cin, cin * expansion, 1, {}, false, rng),
      depthwise(cin * expansion, cin * expansion, 3, {1, 1, cin * expansion}, false, rng),
      project(cin * expansion, cout, 1, {}, false, rng, 1.0),
      bn_expand(cin * expansion),
      bn_depthwise(cin * expansion),
      bn_project(cout),
      residual(cin == cout) {}

template <typename T>
Var<T> InvertedResidual<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) {
  Var<T> h = ops::relu(tape, bn_expand.forward(tape, expand.forward(tape, x), mode));
  h = ops::relu(tape, bn_depthwise.forward(tape, depthwise.forward(tape, h), mode));
  h = bn_project.forward(tape, project.forward(tape, h), mode);
  return residual ? ops::add(tape, h, x) : h;
}

template <typename T>
Shape InvertedResidual<T>::profile(Profiler& prof, const std::string& name,
                                   const Shape& in) const {
  Shape a = expand.profile(prof, join_name(name, "expand"), in);
  if (residual) prof.hold(in);
  bn_expand.profile(prof, join_name(name, "bn_expand"), a);
  prof.record(join_name(name, "relu1"), "relu", a, a, shape_numel(a));
  a = depthwise.profile(prof, join_name(name, "depthwise"), a);
  bn_depthwise.profile(prof, join_name(name, "bn_depthwise"), a);
  prof.record(join_name(name, "relu2"), "relu", a, a, shape_numel(a));
  a = project.profile(prof, join_name(name, "project"), a);
  bn_project.profile(prof, join_name(name, "bn_project"), a);
  if (residual) {
    prof.release();
    prof.record(join_name(name, "add"), "add", a, a, shape_numel(a), {in});
  }
  return a;
}

template <typename T>
void InvertedResidual<T>::prunable(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "expand.weight"), expand.weight});
  out.push_back({join_name(prefix, "project.weight"), project.weight});
}

template <typename T>
void InvertedResidual<T>::collect_parameters(const std::string& prefix,
                                             std::vector<Param<T>>& out) {
  expand.collect_parameters(join_name(prefix, "expand"), out);
  bn_expand.collect_parameters(join_name(prefix, "bn_expand"), out);
  depthwise.collect_parameters(join_name(prefix, "depthwise"), out);
  bn_depthwise.collect_parameters(join_name(prefix, "bn_depthwise"), out);
  project.collect_parameters(join_name(prefix, "project"), out);
  bn_project.collect_parameters(join_name(prefix, "bn_project"), out);
}

template <typename T>
void InvertedResidual<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) {
  bn_expand.collect_buffers(join_name(prefix, "bn_expand"), out);
  bn_depthwise.collect_buffers(join_name(prefix, "bn_depthwise"), out);
  bn_project.collect_buffers(join_name(prefix, "bn_project"), out);
}

// --- backbone -------------------------------------------------------------------

namespace {

std::string block_name(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, RngState& rng)
    : config_(config), layout_(make_layout(config)), sites_(preflight(config)) {
  // Each component draws from its own stream so swapping the pooling method
  // leaves every other initial weight unchanged.
  RngState stem_rng = rng.fork(1);
  stem_conv_ = Conv2d<T>(config_.in_channels, layout_.stem_channels, 3, {1, 1, 1}, false, stem_rng);
  stem_bn_ = BatchNorm2d<T>(layout_.stem_channels);
  std::size_t site = 0;
  auto build_pool = [&](const PoolSite& p) {
    const SiteGeometry& g = sites_[site];
    RngState prng = rng.fork(100 + site);
    ++site;
    return make_pool<T>(p.method, g.channels, g.height, g.width, p.stride, p.sap, prng, g.id);
  };
  if (layout_.stem_pool) stem_pool_ = build_pool(*layout_.stem_pool);
  std::size_t cin = layout_.stem_channels;
  for (std::size_t i = 0; i < layout_.stages.size(); ++i) {
    const StageSpec& spec = layout_.stages[i];
    Stage st;
    for (std::size_t j = 0; j < spec.num_blocks; ++j) {
      RngState brng = rng.fork(1000 + 16 * i + j);
      const std::size_t bin = j == 0 ? cin : spec.channels;
      if (spec.kind == BlockKind::basic) {
        st.blocks.push_back(std::make_unique<BasicBlock<T>>(bin, spec.channels, brng));
      } else {
        st.blocks.push_back(
            std::make_unique<InvertedResidual<T>>(bin, spec.channels, spec.expansion, brng));
      }
    }
    if (spec.pool) {
      st.pool_id = sites_[site].id;
      st.pool = build_pool(*spec.pool);
      st.pool_after = layout_.placement == Placement::inner ? 1 : spec.num_blocks;
    }
    cin = spec.channels;
    stages_.push_back(std::move(st));
  }
  RngState hrng = rng.fork(5000);
  head_ = Linear<T>(cin, config_.num_classes, hrng);
}

template <typename T>
Var<T> Backbone<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode, ForwardTrace<T>* trace) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.height ||
      s[3] != config_.width) {
    throw DimensionError("backbone: expected input [B," + std::to_string(config_.in_channels) +
                         "," + std::to_string(config_.height) + "," +
                         std::to_string(config_.width) + "], got " + shape_str(s));
  }
  auto hook = [&](const std::string& name, Var<T> v) {
    return trace && trace->intercept ? trace->intercept(name, v) : v;
  };
  auto run_pool = [&](PoolLayer<T>& pool, const std::string& id, const Var<T>& v) {
    if (trace) trace->pool_inputs.emplace_back(id, v);
    typename Tape<T>::Scope scope(tape, id);
    return pool.forward(tape, v, mode);
  };

  Var<T> h;
  {
    typename Tape<T>::Scope scope(tape, "stem");
    h = ops::relu(tape, stem_bn_.forward(tape, stem_conv_.forward(tape, x), mode));
  }
  h = hook("stem", h);
  if (stem_pool_) h = run_pool(*stem_pool_, "pool0", h);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    Stage& st = stages_[i];
    for (std::size_t j = 0; j < st.blocks.size(); ++j) {
      const std::string name = block_name(i, j);
      if (trace) trace->block_inputs.emplace_back(name, h.shape());
      {
        typename Tape<T>::Scope scope(tape, name);
        h = st.blocks[j]->forward(tape, h, mode);
      }
      h = hook(name, h);
      if (st.pool && j + 1 == st.pool_after) h = run_pool(*st.pool, st.pool_id, h);
    }
  }
  typename Tape<T>::Scope scope(tape, "head");
  return head_.forward(tape, ops::global_avg_pool(tape, h));
}

template <typename T>
void Backbone<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  stem_conv_.collect_parameters(join_name(prefix, "stem.conv"), out);
  stem_bn_.collect_parameters(join_name(prefix, "stem.bn"), out);
  if (stem_pool_) stem_pool_->collect_parameters(join_name(prefix, "pool0"), out);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j) {
      stages_[i].blocks[j]->collect_parameters(join_name(prefix, block_name(i, j)), out);
    }
    if (stages_[i].pool) stages_[i].pool->collect_parameters(join_name(prefix, stages_[i].pool_id), out);
  }
  head_.collect_parameters(join_name(prefix, "head.fc"), out);
}

template <typename T>
void Backbone<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) {
  stem_bn_.collect_buffers(join_name(prefix, "stem.bn"), out);
  if (stem_pool_) stem_pool_->collect_buffers(join_name(prefix, "pool0"), out);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j) {
      stages_[i].blocks[j]->collect_buffers(join_name(prefix, block_name(i, j)), out);
    }
    if (stages_[i].pool) stages_[i].pool->collect_buffers(join_name(prefix, stages_[i].pool_id), out);
  }
}

template <typename T>
std::vector<Param<T>> Backbone<T>::prunable_weights() {
  std::vector<Param<T>> out;
  if (stages_.empty()) return out;
  for (std::size_t j = 0; j < stages_[0].blocks.size(); ++j) {
    stages_[0].blocks[j]->prunable(block_name(0, j), out);
  }
  return out;
}

template <typename T>
NetworkProfile Backbone<T>::profile(std::size_t batch, std::size_t scalar_bytes,
                                    KeepFraction keep) const {
  Profiler prof(scalar_bytes, std::move(keep));
  Shape s{batch, config_.in_channels, config_.height, config_.width};
  prof.set_stage(0);
  s = stem_conv_.profile(prof, "stem.conv", s);
  stem_bn_.profile(prof, "stem.bn", s);
  prof.record("stem.relu", "relu", s, s, shape_numel(s));
  if (stem_pool_) s = stem_pool_->profile(prof, "pool0", s);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    prof.set_stage(static_cast<int>(i + 1));
    const Stage& st = stages_[i];
    for (std::size_t j = 0; j < st.blocks.size(); ++j) {
      s = st.blocks[j]->profile(prof, block_name(i, j), s);
      if (st.pool && j + 1 == st.pool_after) s = st.pool->profile(prof, st.pool_id, s);
    }
  }
  prof.set_stage(static_cast<int>(stages_.size() + 1));
  const Shape g{s[0], s[1]};
  prof.record("head.gap", "global_avg_pool", s, g, shape_numel(s));
  const Shape logits{s[0], config_.num_classes};
  prof.record("head.fc", "linear", g, logits, 2ull * s[0] * s[1] * config_.num_classes);
  return NetworkProfile{prof.take()};
}

template <typename T>
std::vector<std::string> Backbone<T>::pool_site_ids() const {
  std::vector<std::string> ids;
  for (const auto& g : sites_) ids.push_back(g.id);
  return ids;
}

template <typename T>
PoolLayer<T>* Backbone<T>::pool_site(const std::string& id) {
  if (stem_pool_ && id == "pool0") return stem_pool_.get();
  for (auto& st : stages_)
    if (st.pool && st.pool_id == id) return st.pool.get();
  return nullptr;
}

namespace {

template <typename T>
void check_input(const Backbone<T>& net, const Shape& input_shape, const char* what) {
  const auto& c = net.config();
  if (input_shape.size() != 4 || input_shape[1] != c.in_channels || input_shape[2] != c.height ||
      input_shape[3] != c.width) {
    throw DimensionError(std::string(what) + ": input " + shape_str(input_shape) +
                         " does not match the configured network input");
  }
}

}  // namespace

template <typename T>
NetworkProfile activation_memory_profile(const Backbone<T>& net, const Shape& input_shape) {
  check_input(net, input_shape, "activation_memory_profile");
  return net.profile(input_shape[0], sizeof(T));
}

template <typename T>
NetworkProfile count_flops(const Backbone<T>& net, const Shape& input_shape, KeepFraction keep) {
  check_input(net, input_shape, "count_flops");
  return net.profile(input_shape[0], sizeof(T), std::move(keep));
}

template class BasicBlock<float>;
template class BasicBlock<double>;
template class InvertedResidual<float>;
template class InvertedResidual<double>;
template class Backbone<float>;
template class Backbone<double>;
template NetworkProfile activation_memory_profile<float>(const Backbone<float>&, const Shape&);
template NetworkProfile activation_memory_profile<double>(const Backbone<double>&, const Shape&);
template NetworkProfile count_flops<float>(const Backbone<float>&, const Shape&, KeepFraction);
template NetworkProfile count_flops<double>(const Backbone<double>&, const Shape&, KeepFraction);

}  // namespace sapool
