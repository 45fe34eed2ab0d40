#include "sapool/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sapool/errors.hpp"

namespace sapool {

std::string to_string(RegrowPolicy p) {
  return p == RegrowPolicy::layer_exact ? "layer_exact" : "global";
}

RegrowPolicy parse_regrow_policy(const std::string& s) {
  if (s == "layer_exact") return RegrowPolicy::layer_exact;
  if (s == "global") return RegrowPolicy::global;
  throw ConfigError("unknown regrow policy '" + s + "' (expected layer_exact or global)");
}

double prune_rate(const PruneConfig& cfg, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1) return cfg.rate_start;
  const double t = static_cast<double>(std::min(epoch, epochs - 1)) / static_cast<double>(epochs - 1);
  return cfg.rate_end + 0.5 * (cfg.rate_start - cfg.rate_end) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

void require_conv_weight(const Shape& s, const std::string& what) {
  if (s.size() != 4) throw DimensionError(what + ": expected a [M,N,h,w] weight, got " + shape_str(s));
}

}  // namespace

template <typename T>
double channel_score(const Tensor<T>& weight, std::size_t c) {
  require_conv_weight(weight.shape(), "channel_score");
  const std::size_t m = weight.dim(0), n = weight.dim(1), hw = weight.dim(2) * weight.dim(3);
  if (c >= n) {
    throw DimensionError("channel_score: channel " + std::to_string(c) + " out of range for " +
                         std::to_string(n) + " input channels");
  }
  double s = 0.0;
  for (std::size_t o = 0; o < m; ++o) {
    const T* p = weight.ptr() + (o * n + c) * hw;
    for (std::size_t k = 0; k < hw; ++k) s += static_cast<double>(p[k]) * static_cast<double>(p[k]);
  }
  return s;
}

std::vector<std::size_t> lowest_channels(std::span<const double> scores,
                                         const std::vector<bool>& mask, std::size_t count,
                                         const std::string& layer) {
  std::vector<std::size_t> live;
  for (std::size_t c = 0; c < scores.size(); ++c)
    if (mask[c]) live.push_back(c);
  if (count > live.size()) {
    throw ScheduleError("layer " + layer + ": pruning " + std::to_string(count) +
                        " channels exceeds the " + std::to_string(live.size()) + " unmasked");
  }
  std::stable_sort(live.begin(), live.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  live.resize(count);
  std::sort(live.begin(), live.end());
  return live;
}

std::vector<std::size_t> apportion(std::size_t budget, std::span<const double> weights,
                                   std::span<const std::size_t> caps) {
  const std::size_t n = weights.size();
  std::vector<std::size_t> out(n, 0);
  std::size_t room = 0;
  for (auto c : caps) room += c;
  budget = std::min(budget, room);
  // Repeat so budget freed by capped layers flows to the rest.
  while (budget > 0) {
    std::vector<std::size_t> open;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i] < caps[i]) {
        open.push_back(i);
        total += std::max(0.0, weights[i]);
      }
    }
    std::vector<double> quota(n, 0.0);
    for (auto i : open) {
      quota[i] = total > 0.0 ? static_cast<double>(budget) * std::max(0.0, weights[i]) / total
                             : static_cast<double>(budget) / static_cast<double>(open.size());
    }
    std::size_t given = 0;
    std::vector<std::size_t> share(n, 0);
    for (auto i : open) {
      share[i] = std::min(caps[i] - out[i], static_cast<std::size_t>(std::floor(quota[i])));
      given += share[i];
    }
    std::vector<std::size_t> order = open;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
    });
    for (auto i : order) {
      if (given >= budget) break;
      if (out[i] + share[i] < caps[i]) {
        ++share[i];
        ++given;
      }
    }
    for (std::size_t i = 0; i < n; ++i) out[i] += share[i];
    budget -= given;
  }
  return out;
}

std::size_t PrunedLayer::active() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

template <typename T>
PruneState<T>::PruneState(std::vector<Param<T>> weights, PruneConfig cfg)
    : cfg_(cfg), weights_(std::move(weights)) {
  if (!(cfg_.target_ratio >= 1.0) || !std::isfinite(cfg_.target_ratio)) {
    throw ConfigError("prune target ratio must be a finite value >= 1");
  }
  if (weights_.empty()) throw ConfigError("no prunable layers");
  for (const auto& p : weights_) {
    require_conv_weight(p.var.shape(), p.name);
    PrunedLayer l;
    l.name = p.name;
    l.channels = p.var.shape()[1];
    l.target = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(static_cast<double>(l.channels) / cfg_.target_ratio - 1e-9)));
    l.mask.assign(l.channels, true);
    layers_.push_back(std::move(l));
    accum_.emplace_back(p.var.shape());
  }
}

template <typename T>
std::size_t PruneState<T>::total_active() const {
  std::size_t s = 0;
  for (const auto& l : layers_) s += l.active();
  return s;
}

template <typename T>
std::size_t PruneState<T>::total_target() const {
  std::size_t s = 0;
  for (const auto& l : layers_) s += l.target;
  return s;
}

template <typename T>
void PruneState<T>::accumulate() {
  const T beta = static_cast<T>(cfg_.momentum);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Var<T>& v = weights_[l].var;
    if (!v.has_grad()) continue;
    auto& a = accum_[l];
    const auto& g = v.grad();
    for (std::size_t k = 0; k < a.numel(); ++k) a[k] = beta * a[k] + (T(1) - beta) * g[k];
  }
}

template <typename T>
double PruneState<T>::channel_momentum(std::size_t l, std::size_t c) const {
  const auto& a = accum_[l];
  const std::size_t m = a.dim(0), n = a.dim(1), hw = a.dim(2) * a.dim(3);
  double s = 0.0;
  for (std::size_t o = 0; o < m; ++o) {
    const T* p = a.ptr() + (o * n + c) * hw;
    for (std::size_t k = 0; k < hw; ++k) s += std::abs(static_cast<double>(p[k]));
  }
  return s;
}

template <typename T>
double PruneState<T>::layer_momentum(std::size_t l) const {
  double s = 0.0;
  for (std::size_t c = 0; c < layers_[l].channels; ++c)
    if (layers_[l].mask[c]) s += channel_momentum(l, c);
  return s;
}

template <typename T>
void PruneState<T>::mask_channels(std::size_t l, std::span<const std::size_t> channels) {
  auto& w = weights_[l].var.mutable_value();
  const std::size_t m = w.dim(0), n = w.dim(1), hw = w.dim(2) * w.dim(3);
  for (auto c : channels) {
    layers_[l].mask[c] = false;
    for (std::size_t o = 0; o < m; ++o) std::fill_n(w.ptr() + (o * n + c) * hw, hw, T(0));
  }
}

template <typename T>
void PruneState<T>::prune_step(std::size_t epoch, std::size_t epochs) {
  const double p = prune_rate(cfg_, epoch, epochs);
  const std::size_t nl = layers_.size();
  std::vector<std::size_t> excess(nl), rewire(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    const std::size_t act = layers_[l].active();
    excess[l] = act > layers_[l].target ? act - layers_[l].target : 0;
  }
  if (cfg_.regrow == RegrowPolicy::layer_exact) {
    std::vector<double> importance(nl);
    std::vector<std::size_t> caps(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      importance[l] = layer_momentum(l);
      caps[l] = std::min(layers_[l].target, layers_[l].active());
    }
    const auto budget =
        static_cast<std::size_t>(std::llround(p * static_cast<double>(total_target())));
    rewire = apportion(budget, importance, caps);
  } else {
    for (std::size_t l = 0; l < nl; ++l)
      rewire[l] = static_cast<std::size_t>(std::llround(p * static_cast<double>(layers_[l].target)));
  }
  // Validate every layer before touching any weights.
  std::vector<std::vector<std::size_t>> chosen(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    std::vector<double> scores(layers_[l].channels);
    for (std::size_t c = 0; c < scores.size(); ++c)
      scores[c] = channel_score(weights_[l].var.value(), c);
    chosen[l] = lowest_channels(scores, layers_[l].mask, excess[l] + rewire[l], layers_[l].name);
  }
  pending_budget_ = 0;
  for (std::size_t l = 0; l < nl; ++l) {
    mask_channels(l, chosen[l]);
    layers_[l].last_pruned = chosen[l].size();
    layers_[l].planned_regrow = rewire[l];
    pending_budget_ += chosen[l].size() - excess[l];
  }
}

template <typename T>
void PruneState<T>::regrow_step() {
  const std::size_t nl = layers_.size();
  std::vector<std::size_t> grow(nl, 0);
  if (cfg_.regrow == RegrowPolicy::layer_exact) {
    for (std::size_t l = 0; l < nl; ++l) grow[l] = layers_[l].planned_regrow;
  } else if (pending_budget_ > 0) {
    std::vector<double> importance(nl);
    std::vector<std::size_t> caps(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      importance[l] = layer_momentum(l);
      caps[l] = layers_[l].channels - layers_[l].active();
    }
    grow = apportion(pending_budget_, importance, caps);
  }
  for (std::size_t l = 0; l < nl; ++l) {
    if (grow[l] == 0) continue;
    std::vector<std::size_t> masked;
    for (std::size_t c = 0; c < layers_[l].channels; ++c)
      if (!layers_[l].mask[c]) masked.push_back(c);
    std::vector<double> mom(layers_[l].channels, 0.0);
    for (auto c : masked) mom[c] = channel_momentum(l, c);
    std::stable_sort(masked.begin(), masked.end(),
                     [&](std::size_t a, std::size_t b) { return mom[a] > mom[b]; });
    masked.resize(std::min(grow[l], masked.size()));
    // Weights of masked channels are already zero, so regrowth starts there.
    for (auto c : masked) layers_[l].mask[c] = true;
  }
  for (auto& l : layers_) l.planned_regrow = 0;
  pending_budget_ = 0;
}

template <typename T>
void PruneState<T>::cycle(std::size_t epoch, std::size_t epochs) {
  prune_step(epoch, epochs);
  regrow_step();
}

template <typename T>
void PruneState<T>::apply_mask(Sgd<T>* opt) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Tensor<T>& w = weights_[l].var.mutable_value();
    Tensor<T>* buf = opt ? opt->buffer(weights_[l].name) : nullptr;
    const std::size_t m = w.dim(0), n = w.dim(1), hw = w.dim(2) * w.dim(3);
    for (std::size_t c = 0; c < n; ++c) {
      if (layers_[l].mask[c]) continue;
      for (std::size_t o = 0; o < m; ++o) {
        std::fill_n(w.ptr() + (o * n + c) * hw, hw, T(0));
        if (buf) std::fill_n(buf->ptr() + (o * n + c) * hw, hw, T(0));
      }
    }
  }
}

template <typename T>
double PruneState<T>::keep_fraction(const std::string& weight_name) const {
  for (const auto& l : layers_)
    if (l.name == weight_name) return static_cast<double>(l.active()) / static_cast<double>(l.channels);
  return 1.0;
}

template <typename T>
void PruneState<T>::set_mask(const std::string& weight_name, const std::vector<bool>& mask) {
  for (auto& l : layers_) {
    if (l.name != weight_name) continue;
    if (mask.size() != l.channels) {
      throw FormatError("mask for " + weight_name + " has " + std::to_string(mask.size()) +
                        " entries, expected " + std::to_string(l.channels));
    }
    l.mask = mask;
    return;
  }
  throw FormatError("mask for unknown prunable weight " + weight_name);
}

template <typename T>
TrainReport prune_finetune(Backbone<T>& net, PruneState<T>& state, const Dataset& train_set,
                           const Dataset& test_set, const TrainOptions& options,
                           TrainHooks<T> hooks) {
  const std::size_t epochs = options.optim.epochs;
  auto user_start = hooks.epoch_start;
  auto user_backward = hooks.after_backward;
  auto user_step = hooks.after_step;
  hooks.epoch_start = [&, user_start](std::size_t epoch, Sgd<T>& opt) {
    state.cycle(epoch, epochs);
    state.apply_mask(&opt);
    if (user_start) user_start(epoch, opt);
  };
  hooks.after_backward = [&, user_backward](Sgd<T>& opt) {
    state.accumulate();
    if (user_backward) user_backward(opt);
  };
  hooks.after_step = [&, user_step](Sgd<T>& opt) {
    state.apply_mask(&opt);
    if (user_step) user_step(opt);
  };
  return train(net, train_set, test_set, options, hooks);
}

template double channel_score<float>(const Tensor<float>&, std::size_t);
template double channel_score<double>(const Tensor<double>&, std::size_t);
template class PruneState<float>;
template class PruneState<double>;
template TrainReport prune_finetune<float>(Backbone<float>&, PruneState<float>&, const Dataset&,
                                           const Dataset&, const TrainOptions&, TrainHooks<float>);
template TrainReport prune_finetune<double>(Backbone<double>&, PruneState<double>&, const Dataset&,
                                            const Dataset&, const TrainOptions&,
                                            TrainHooks<double>);

}  // namespace sapool
