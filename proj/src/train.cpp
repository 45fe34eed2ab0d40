#include "sapool/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace sapool {

template <typename T>
Sgd<T>::Sgd(std::vector<Param<T>> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  buffers_.reserve(params_.size());
  for (const auto& p : params_) buffers_.emplace_back(p.var.shape());
}

template <typename T>
void Sgd<T>::step(double lr) {
  const T m = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_),
          eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<T> v = params_[i].var;
    if (!v.has_grad()) continue;
    auto& w = v.mutable_value();
    const auto& g = v.grad();
    auto& buf = buffers_[i];
    for (std::size_t k = 0; k < w.numel(); ++k) {
      buf[k] = m * buf[k] + (g[k] + wd * w[k]);
      w[k] -= eta * buf[k];
    }
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) {
    Var<T> v = p.var;
    v.zero_grad();
  }
}

template <typename T>
Tensor<T>* Sgd<T>::buffer(const std::string& name) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return &buffers_[i];
  return nullptr;
}

double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << kHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f,%.6f,%llu,%llu,%llu\n", r.epoch, r.train_loss,
                  r.train_acc, r.test_acc, static_cast<unsigned long long>(r.wall_ms),
                  static_cast<unsigned long long>(r.peak_act_bytes),
                  static_cast<unsigned long long>(r.seed));
    os << buf;
  }
  return os.str();
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
double top1_accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("top1_accuracy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

template <typename T>
double evaluate(Backbone<T>& net, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) return 0.0;
  batch = std::max<std::size_t>(1, batch);
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    Tape<T> tape(TapeOptions{false, false});
    Var<T> x(make_batch<T>(data, idx), false);
    Var<T> logits = net.forward(tape, x, Mode::eval);
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < idx.size(); ++i) hits += pred[i] == data.labels[idx[i]];
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

namespace {

// Re-runs a diverged step under a debug tape so the first op that turned
// finite inputs into non-finite outputs is named.
template <typename T>
[[noreturn]] void diagnose_non_finite(Backbone<T>& net, const Tensor<T>& batch,
                                      std::span<const int> labels, std::size_t epoch,
                                      std::size_t step, double loss) {
  const std::string where = "non-finite loss " + std::to_string(loss) + " at epoch " +
                            std::to_string(epoch) + " step " + std::to_string(step);
  for (const auto& p : net.parameters()) {
    if (!p.var.value().all_finite()) {
      throw NumericError(where + "; first non-finite layer: parameter " + p.name);
    }
  }
  try {
    Tape<T> tape(TapeOptions{false, true});
    Var<T> x(batch, false);
    Var<T> logits = net.forward(tape, x, Mode::train);
    ops::softmax_cross_entropy(tape, logits, labels);
  } catch (const NumericError& e) {
    throw NumericError(where + "; first non-finite layer: " + e.what());
  }
  throw NumericError(where + "; first non-finite layer: loss");
}

}  // namespace

template <typename T>
TrainReport train(Backbone<T>& net, const Dataset& train_set, const Dataset& test_set,
                  const TrainOptions& options, const TrainHooks<T>& hooks) {
  const OptimConfig& oc = options.optim;
  if (oc.batch_size == 0) throw ConfigError("batch size must be positive");
  if (train_set.size() == 0) throw ConfigError("training set is empty");
  if (train_set.channels() != net.config().in_channels || train_set.height() != net.config().height ||
      train_set.width() != net.config().width) {
    throw DimensionError("train: dataset images " + shape_str(train_set.images.shape()) +
                         " do not match the network input");
  }
  Sgd<T> opt(net.parameters(), oc.momentum, oc.weight_decay);
  const std::size_t steps_per_epoch = (train_set.size() + oc.batch_size - 1) / oc.batch_size;
  const std::size_t total_steps = steps_per_epoch * oc.epochs;
  const std::uint64_t peak = net.profile(oc.batch_size, sizeof(T)).peak_live_bytes();
  RngState root{options.seed, 0};
  TrainReport report;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < oc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (hooks.epoch_start) hooks.epoch_start(epoch, opt);
    RngState erng = root.fork(0x5eed0000ull + epoch);
    const auto order = shuffled_indices(train_set.size(), erng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t begin = s * oc.batch_size;
      const std::size_t end = std::min(train_set.size(), begin + oc.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Tensor<T> batch = make_batch<T>(train_set, idx, options.augment, &erng);
      const auto labels = batch_labels(train_set, idx);

      Tape<T> tape(TapeOptions{true, options.debug});
      Var<T> x(batch, false);
      Var<T> logits = net.forward(tape, x, Mode::train);
      Var<T> loss = ops::softmax_cross_entropy<T>(tape, logits, labels);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) diagnose_non_finite(net, batch, labels, epoch, step, lv);
      tape.backward(loss);
      if (hooks.after_backward) hooks.after_backward(opt);
      opt.step(oc.cosine ? cosine_lr(oc.lr, step, total_steps) : oc.lr);
      opt.zero_grad();
      if (hooks.after_step) hooks.after_step(opt);
      if (hooks.on_step) hooks.on_step(step, lv);

      loss_sum += lv * static_cast<double>(idx.size());
      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < idx.size(); ++i) hits += pred[i] == labels[i];
    }
    EpochRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    row.train_acc = static_cast<double>(hits) / static_cast<double>(train_set.size());
    row.test_acc = test_set.size() ? evaluate(net, test_set, options.eval_batch) : 0.0;
    if (options.wall_clock) {
      row.wall_ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                   std::chrono::steady_clock::now() - t0)
                                                   .count());
    }
    row.peak_act_bytes = peak;
    row.seed = options.seed;
    report.rows.push_back(row);
    if (hooks.epoch_end) hooks.epoch_end(row);
  }
  return report;
}

template class Sgd<float>;
template class Sgd<double>;
template TrainReport train<float>(Backbone<float>&, const Dataset&, const Dataset&,
                                  const TrainOptions&, const TrainHooks<float>&);
template TrainReport train<double>(Backbone<double>&, const Dataset&, const Dataset&,
                                   const TrainOptions&, const TrainHooks<double>&);
template double evaluate<float>(Backbone<float>&, const Dataset&, std::size_t);
template double evaluate<double>(Backbone<double>&, const Dataset&, std::size_t);
template double top1_accuracy<float>(const Tensor<float>&, std::span<const int>);
template double top1_accuracy<double>(const Tensor<double>&, std::span<const int>);
template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);

}  // namespace sapool
