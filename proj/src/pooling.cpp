#include "sapool/pooling.hpp"

#include <cmath>

namespace sapool {

std::string_view to_string(PoolMethod m) {
  switch (m) {
    case PoolMethod::sap: return "sap";
    case PoolMethod::lip: return "lip";
    case PoolMethod::strided: return "strided";
    case PoolMethod::avg: return "avg";
    case PoolMethod::max: return "max";
  }
  return "?";
}

PoolMethod parse_pool_method(std::string_view s) {
  for (PoolMethod m : {PoolMethod::sap, PoolMethod::lip, PoolMethod::strided, PoolMethod::avg,
                       PoolMethod::max}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown pooling method '" + std::string(s) +
                    "' (expected sap, lip, strided, avg or max)");
}

std::size_t sap_embed_dim(double channel_ratio, std::size_t channels, const std::string& layer) {
  const double d = channel_ratio * static_cast<double>(channels);
  const double r = std::round(d);
  if (!(channel_ratio > 0.0) || r < 1.0 || std::abs(d - r) > 1e-9) {
    throw ConfigError(layer + ": channel ratio " + std::to_string(channel_ratio) + " times " +
                      std::to_string(channels) + " channels is not a positive integer");
  }
  return static_cast<std::size_t>(r);
}

namespace {

std::string hw_str(std::size_t h, std::size_t w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

Shape pooled(const Shape& in, std::size_t s) { return Shape{in[0], in[1], in[2] / s, in[3] / s}; }

}  // namespace

// --- SAP --------------------------------------------------------------------

template <typename T>
SelfAttentivePool<T>::SelfAttentivePool(std::size_t channels, std::size_t height,
                                        std::size_t width, SapConfig config, RngState& rng,
                                        std::string layer)
    : config_(config), channels_(channels), layer_(std::move(layer)) {
  const std::size_t p = config_.patch_size;
  if (p == 0 || config_.stride == 0 || config_.num_heads == 0) {
    throw ConfigError(layer_ + ": patch size, stride and head count must be positive");
  }
  embed_dim_ = sap_embed_dim(config_.channel_ratio, channels, layer_);
  if (embed_dim_ % config_.num_heads != 0) {
    throw ConfigError(layer_ + ": embed dim " + std::to_string(embed_dim_) +
                      " not divisible by " + std::to_string(config_.num_heads) + " heads");
  }
  if (height % p != 0 || width % p != 0) {
    throw ConfigError(layer_ + ": input " + hw_str(height, width) +
                      " not divisible by patch size " + std::to_string(p));
  }
  if (height % config_.stride != 0 || width % config_.stride != 0) {
    throw ConfigError(layer_ + ": input " + hw_str(height, width) + " not divisible by stride " +
                      std::to_string(config_.stride));
  }
  embed = Conv2d<T>(channels, embed_dim_, p, {p, 0, 1}, true, rng);
  bn1 = BatchNorm2d<T>(embed_dim_);
  pe = PositionalEncoding<T>((height / p) * (width / p), embed_dim_, rng);
  msa = MultiHeadSelfAttention<T>(embed_dim_, config_.num_heads, rng, config_.pre_ln);
  restore_conv = Conv2d<T>(embed_dim_, channels, 1, {}, true, rng);
  bn2 = BatchNorm2d<T>(channels);
}

template <typename T>
void SelfAttentivePool<T>::check_spatial(const Shape& in) const {
  if (in.size() != 4 || in[1] != channels_) {
    throw DimensionError(layer_ + ": expected [B," + std::to_string(channels_) + ",H,W], got " +
                         shape_str(in));
  }
  const std::size_t p = config_.patch_size;
  if (in[2] % p != 0 || in[3] % p != 0) {
    throw ConfigError(layer_ + ": input " + shape_str(in) + " not divisible by patch size " +
                      std::to_string(p));
  }
}

template <typename T>
Var<T> SelfAttentivePool<T>::patch_embed(Tape<T>& tape, const Var<T>& x, Mode mode) {
  check_spatial(x.shape());
  typename Tape<T>::Scope scope(tape, "patch_embed");
  Var<T> h = embed.forward(tape, x);
  if (config_.ablation.bn1) h = bn1.forward(tape, h, mode);
  h = ops::relu(tape, h);
  Var<T> tokens = ops::nchw_to_tokens(tape, h);
  if (config_.ablation.pe) tokens = pe.forward(tape, tokens);
  return tokens;
}

template <typename T>
Var<T> SelfAttentivePool<T>::restore(Tape<T>& tape, const Var<T>& tokens, Mode mode,
                                     std::size_t height, std::size_t width) {
  const std::size_t p = config_.patch_size;
  const std::size_t gh = height / p, gw = width / p;
  const Shape& ts = tokens.shape();
  if (ts.size() != 3 || ts[1] != gh * gw || ts[2] != embed_dim_ || height % p || width % p) {
    throw DimensionError(layer_ + ": restore expects tokens [B," + std::to_string(gh * gw) + "," +
                         std::to_string(embed_dim_) + "] for target " + hw_str(height, width) +
                         ", got " + shape_str(ts));
  }
  typename Tape<T>::Scope scope(tape, "restore");
  Var<T> g = ops::tokens_to_nchw(tape, tokens, gh, gw);
  g = ops::bilinear_upsample(tape, g, height, width);
  g = restore_conv.forward(tape, g);
  if (config_.ablation.bn2) g = bn2.forward(tape, g, mode);
  if (config_.ablation.sigmoid) g = ops::sigmoid(tape, g);
  if (config_.ablation.exp) g = ops::exp(tape, g);
  return g;
}

template <typename T>
Var<T> SelfAttentivePool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode) {
  return forward(tape, x, mode, nullptr);
}

template <typename T>
Var<T> SelfAttentivePool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode mode,
                                     SapTrace<T>* trace) {
  Var<T> tokens = patch_embed(tape, x, mode);
  Var<T> attended;
  {
    typename Tape<T>::Scope scope(tape, "msa");
    attended = msa.forward(tape, tokens);
  }
  Var<T> pi = restore(tape, attended, mode, x.shape()[2], x.shape()[3]);
  if (trace) *trace = {tokens, attended, pi};
  typename Tape<T>::Scope scope(tape, "weighted_pool");
  return ops::weighted_pool(tape, x, pi, config_.stride);
}

template <typename T>
void SelfAttentivePool<T>::collect_parameters(const std::string& prefix,
                                              std::vector<Param<T>>& out) {
  embed.collect_parameters(join_name(prefix, "embed"), out);
  bn1.collect_parameters(join_name(prefix, "bn1"), out);
  pe.collect_parameters(join_name(prefix, "pe"), out);
  msa.collect_parameters(join_name(prefix, "msa"), out);
  restore_conv.collect_parameters(join_name(prefix, "restore"), out);
  bn2.collect_parameters(join_name(prefix, "bn2"), out);
}

template <typename T>
void SelfAttentivePool<T>::collect_buffers(const std::string& prefix,
                                           std::vector<Buffer<T>>& out) {
  bn1.collect_buffers(join_name(prefix, "bn1"), out);
  bn2.collect_buffers(join_name(prefix, "bn2"), out);
}

template <typename T>
Shape SelfAttentivePool<T>::profile(Profiler& prof, const std::string& name,
                                    const Shape& in) const {
  check_spatial(in);
  const std::size_t b = in[0], d = embed_dim_, m = config_.num_heads, dk = d / m;
  prof.hold(in);  // x waits for π
  Shape e = embed.profile(prof, join_name(name, "embed"), in);
  if (config_.ablation.bn1) bn1.profile(prof, join_name(name, "bn1"), e);
  prof.record(join_name(name, "relu"), "relu", e, e, shape_numel(e));
  const std::size_t n = e[2] * e[3];
  const Shape tok{b, n, d};
  if (config_.ablation.pe) prof.record(join_name(name, "pe"), "add", tok, tok, shape_numel(tok));

  const std::uint64_t rows = b * n;
  const std::uint64_t proj = 2ull * rows * d * d;
  prof.hold(tok);  // residual
  const std::string a = join_name(name, "msa");
  if (config_.pre_ln) prof.record(join_name(a, "ln"), "layernorm", tok, tok, shape_numel(tok));
  prof.record(join_name(a, "q"), "matmul", tok, tok, proj);
  prof.record(join_name(a, "k"), "matmul", tok, tok, proj, {tok});
  prof.record(join_name(a, "v"), "matmul", tok, tok, proj, {tok, tok});
  const std::uint64_t attn = static_cast<std::uint64_t>(b) * m * (4ull * n * n * dk + n * n);
  prof.record(join_name(a, "attention"), "attention", tok, tok, attn,
              {tok, tok, Shape{b, m, n, n}});
  prof.record(join_name(a, "o"), "matmul", tok, tok, proj);
  if (!config_.pre_ln) prof.record(join_name(a, "ln"), "layernorm", tok, tok, shape_numel(tok));
  prof.release();
  prof.record(join_name(a, "residual"), "add", tok, tok, shape_numel(tok), {tok});

  const Shape grid{b, d, e[2], e[3]};
  const Shape up{b, d, in[2], in[3]};
  prof.record(join_name(name, "upsample"), "upsample", grid, up, shape_numel(up));
  Shape r = restore_conv.profile(prof, join_name(name, "restore"), up);
  if (config_.ablation.bn2) bn2.profile(prof, join_name(name, "bn2"), r);
  if (config_.ablation.sigmoid) prof.record(join_name(name, "sigmoid"), "sigmoid", r, r, shape_numel(r));
  if (config_.ablation.exp) prof.record(join_name(name, "exp"), "exp", r, r, shape_numel(r));
  prof.release();
  const Shape out = pooled(in, config_.stride);
  prof.record(join_name(name, "weighted_pool"), "weighted_pool", in, out,
              3ull * shape_numel(in) + shape_numel(out), {r});
  return out;
}

// --- LIP --------------------------------------------------------------------

template <typename T>
LipPool<T>::LipPool(std::size_t channels, std::size_t stride, RngState& rng)
    : logit(channels, channels, 1, {}, true, rng), stride_(stride) {}

template <typename T>
Var<T> LipPool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode) {
  Var<T> pi = ops::exp(tape, logit.forward(tape, x));
  return ops::weighted_pool(tape, x, pi, stride_);
}

template <typename T>
void LipPool<T>::collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) {
  logit.collect_parameters(join_name(prefix, "logit"), out);
}

template <typename T>
Shape LipPool<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  prof.hold(in);
  Shape g = logit.profile(prof, join_name(name, "logit"), in);
  prof.record(join_name(name, "exp"), "exp", g, g, shape_numel(g));
  prof.release();
  const Shape out = pooled(in, stride_);
  prof.record(join_name(name, "weighted_pool"), "weighted_pool", in, out,
              3ull * shape_numel(in) + shape_numel(out), {g});
  return out;
}

// --- strided conv -------------------------------------------------------------

template <typename T>
StridedConvPool<T>::StridedConvPool(std::size_t channels, std::size_t stride, RngState& rng)
    : conv(channels, channels, 3, {stride, 1, 1}, true, rng), stride_(stride) {}

template <typename T>
Var<T> StridedConvPool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode) {
  return conv.forward(tape, x);
}

template <typename T>
void StridedConvPool<T>::collect_parameters(const std::string& prefix,
                                            std::vector<Param<T>>& out) {
  conv.collect_parameters(join_name(prefix, "conv"), out);
}

template <typename T>
Shape StridedConvPool<T>::profile(Profiler& prof, const std::string& name,
                                  const Shape& in) const {
  return conv.profile(prof, join_name(name, "conv"), in);
}

// --- parameter-free -------------------------------------------------------------

template <typename T>
Var<T> AvgPool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode) {
  return ops::avg_pool2d(tape, x, stride_);
}

template <typename T>
Shape AvgPool<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  const Shape out = pooled(in, stride_);
  prof.record(join_name(name, "avg_pool"), "avg_pool", in, out, shape_numel(in) + shape_numel(out));
  return out;
}

template <typename T>
Var<T> MaxPool<T>::forward(Tape<T>& tape, const Var<T>& x, Mode) {
  return ops::max_pool2d(tape, x, stride_);
}

template <typename T>
Shape MaxPool<T>::profile(Profiler& prof, const std::string& name, const Shape& in) const {
  const Shape out = pooled(in, stride_);
  prof.record(join_name(name, "max_pool"), "max_pool", in, out, shape_numel(in));
  return out;
}

template <typename T>
std::unique_ptr<PoolLayer<T>> make_pool(PoolMethod method, std::size_t channels,
                                        std::size_t height, std::size_t width, std::size_t stride,
                                        SapConfig sap, RngState& rng, const std::string& layer) {
  if (stride == 0) throw ConfigError(layer + ": stride must be positive");
  if (height % stride != 0 || width % stride != 0) {
    throw ConfigError(layer + ": input " + hw_str(height, width) + " not divisible by stride " +
                      std::to_string(stride));
  }
  switch (method) {
    case PoolMethod::sap:
      sap.stride = stride;
      return std::make_unique<SelfAttentivePool<T>>(channels, height, width, sap, rng, layer);
    case PoolMethod::lip: return std::make_unique<LipPool<T>>(channels, stride, rng);
    case PoolMethod::strided: return std::make_unique<StridedConvPool<T>>(channels, stride, rng);
    case PoolMethod::avg: return std::make_unique<AvgPool<T>>(stride);
    case PoolMethod::max: return std::make_unique<MaxPool<T>>(stride);
  }
  throw ConfigError(layer + ": unknown pooling method");
}

template class SelfAttentivePool<float>;
template class SelfAttentivePool<double>;
template class LipPool<float>;
template class LipPool<double>;
template class StridedConvPool<float>;
template class StridedConvPool<double>;
template class AvgPool<float>;
template class AvgPool<double>;
template class MaxPool<float>;
template class MaxPool<double>;
template std::unique_ptr<PoolLayer<float>> make_pool<float>(PoolMethod, std::size_t, std::size_t,
                                                            std::size_t, std::size_t, SapConfig,
                                                            RngState&, const std::string&);
template std::unique_ptr<PoolLayer<double>> make_pool<double>(PoolMethod, std::size_t,
                                                              std::size_t, std::size_t,
                                                              std::size_t, SapConfig, RngState&,
                                                              const std::string&);

}  // namespace sapool
