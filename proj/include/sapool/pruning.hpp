#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sapool/nn.hpp"
#include "sapool/train.hpp"

namespace sapool {

enum class RegrowPolicy {
  layer_exact,  // regrow budget planned per layer before pruning; every layer lands on its target
  global,       // budget apportioned after pruning; only the total is conserved
};

std::string to_string(RegrowPolicy p);
RegrowPolicy parse_regrow_policy(const std::string& s);

struct PruneConfig {
  double target_ratio = 2.0;  // channels kept per layer = ceil(N / ratio)
  double rate_start = 0.3;    // p_i at the first fine-tune epoch
  double rate_end = 0.0;      // p_i at the last
  double momentum = 0.9;      // decay of the gradient accumulators used for regrowth
  RegrowPolicy regrow = RegrowPolicy::layer_exact;
};

// Cosine decay from rate_start to rate_end over `epochs` epochs.
double prune_rate(const PruneConfig& cfg, std::size_t epoch, std::size_t epochs);

// Squared Frobenius norm of input channel c of a [M,N,h,w] weight.
template <typename T>
double channel_score(const Tensor<T>& weight, std::size_t c);

// The `count` lowest-scoring unmasked channels, ties to the lowest index.
std::vector<std::size_t> lowest_channels(std::span<const double> scores,
                                         const std::vector<bool>& mask, std::size_t count,
                                         const std::string& layer);

// Largest-remainder split of `budget` proportional to `weights`, each share
// capped by `caps`. Zero total weight splits evenly.
std::vector<std::size_t> apportion(std::size_t budget, std::span<const double> weights,
                                   std::span<const std::size_t> caps);

struct PrunedLayer {
  std::string name;
  std::size_t channels = 0;     // N
  std::size_t target = 0;       // ceil(N / ratio)
  std::vector<bool> mask;       // true = channel active
  std::size_t last_pruned = 0;  // by the most recent prune_step
  std::size_t planned_regrow = 0;
  std::size_t active() const;
};

template <typename T>
class PruneState {
 public:
  // `weights` are 4-D conv weights; masks start fully active.
  PruneState(std::vector<Param<T>> weights, PruneConfig cfg);

  const PruneConfig& config() const { return cfg_; }
  const std::vector<PrunedLayer>& layers() const { return layers_; }
  std::vector<PrunedLayer>& layers() { return layers_; }
  const std::vector<Param<T>>& weights() const { return weights_; }
  const Tensor<T>& accumulator(std::size_t layer) const { return accum_[layer]; }
  std::size_t total_active() const;
  std::size_t total_target() const;

  // Folds the current gradients into the accumulators.
  void accumulate();

  // Masks enough channels per layer to reach the target plus p_i of the
  // target for rewiring. Throws ScheduleError if a layer runs out.
  void prune_step(std::size_t epoch, std::size_t epochs);
  // Re-activates channels by accumulator magnitude. Regrown weights are zero.
  void regrow_step();
  // prune_step then regrow_step.
  void cycle(std::size_t epoch, std::size_t epochs);

  // Zeroes masked channels in the weights and, if given, the optimizer's
  // momentum buffers.
  void apply_mask(Sgd<T>* opt = nullptr);

  // Active fraction of the named weight; 1 for weights not pruned here.
  double keep_fraction(const std::string& weight_name) const;

  // Restores masks loaded from a checkpoint.
  void set_mask(const std::string& weight_name, const std::vector<bool>& mask);

 private:
  double layer_momentum(std::size_t l) const;
  double channel_momentum(std::size_t l, std::size_t c) const;
  void mask_channels(std::size_t l, std::span<const std::size_t> channels);

  PruneConfig cfg_;
  std::vector<Param<T>> weights_;
  std::vector<PrunedLayer> layers_;
  std::vector<Tensor<T>> accum_;
  std::size_t pending_budget_ = 0;
};

// Trains with a prune/regrow cycle at the start of every epoch and the mask
// re-applied after every optimizer step.
template <typename T>
TrainReport prune_finetune(Backbone<T>& net, PruneState<T>& state, const Dataset& train_set,
                           const Dataset& test_set, const TrainOptions& options,
                           TrainHooks<T> hooks = {});

extern template class PruneState<float>;
extern template class PruneState<double>;

}  // namespace sapool
