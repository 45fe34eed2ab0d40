#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sapool/backbone.hpp"
#include "sapool/data.hpp"

namespace sapool {

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  bool cosine = true;  // cosine decay per step to 0 over all epochs
};

// Heavy-ball SGD with coupled weight decay:
//   buf = momentum·buf + (g + wd·w);  w -= lr·buf
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Param<T>> params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();

  const std::vector<Param<T>>& params() const { return params_; }
  std::vector<Tensor<T>>& buffers() { return buffers_; }
  // Momentum buffer of the named parameter, or nullptr.
  Tensor<T>* buffer(const std::string& name);

 private:
  std::vector<Param<T>> params_;
  std::vector<Tensor<T>> buffers_;
  double momentum_, weight_decay_;
};

double cosine_lr(double base, std::size_t step, std::size_t total_steps);

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::uint64_t wall_ms = 0;
  std::uint64_t peak_act_bytes = 0;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<EpochRow> rows;

  static constexpr const char* kHeader =
      "epoch,train_loss,train_acc,test_acc,wall_ms,peak_act_bytes,seed";
  std::string to_csv() const;
};

template <typename T>
struct TrainHooks {
  // Before the first step of each epoch (0-based).
  std::function<void(std::size_t epoch, Sgd<T>& opt)> epoch_start;
  // After backward, before the optimizer step.
  std::function<void(Sgd<T>& opt)> after_backward;
  // After every optimizer step.
  std::function<void(Sgd<T>& opt)> after_step;
  // After every step with the global step index and batch loss.
  std::function<void(std::size_t step, double loss)> on_step;
  // After each epoch's row is complete.
  std::function<void(const EpochRow& row)> epoch_end;
};

struct TrainOptions {
  OptimConfig optim{};
  std::uint64_t seed = 1;
  AugmentOptions augment{};
  bool wall_clock = false;  // wall_ms stays 0 unless enabled, keeping reports byte-stable
  bool debug = false;       // debug tape on every step
  std::size_t eval_batch = 250;
};

// Trains `net` in place. A non-finite loss aborts with NumericError naming
// the first layer that produced a non-finite value.
template <typename T>
TrainReport train(Backbone<T>& net, const Dataset& train_set, const Dataset& test_set,
                  const TrainOptions& options, const TrainHooks<T>& hooks = {});

// Top-1 accuracy in eval mode.
template <typename T>
double evaluate(Backbone<T>& net, const Dataset& data, std::size_t batch = 250);

// Top-1 accuracy of logits[B,K]; ties resolve to the lowest class index.
template <typename T>
double top1_accuracy(const Tensor<T>& logits, std::span<const int> labels);
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace sapool
