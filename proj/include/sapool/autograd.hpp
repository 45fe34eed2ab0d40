#pragma once

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sapool/tensor.hpp"

namespace sapool {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.numel() != value.numel() || grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
  bool has_grad() const { return grad.numel() == value.numel() && grad.shape() == value.shape(); }
};

// Shared handle to a value that may participate in differentiation.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad})) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->has_grad(); }
  // Zero-filled if no gradient has been accumulated yet.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

struct TapeOptions {
  bool record = true;
  // Debug mode: ops check that finite inputs produce finite outputs and
  // enforce value preconditions (e.g. positive pooling weights).
  bool debug = false;
};

// Append-only record of differentiable operations. Entries are pushed in
// execution order, so every entry's inputs precede it.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return options_.record; }
  bool debug() const noexcept { return options_.debug; }

  void record(std::string_view op, const Var<T>& out, BackwardFn backward);

  // Reverse sweep from a scalar loss. Each entry is visited once.
  void backward(const Var<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t last_visited() const noexcept { return last_visited_; }
  void clear() { entries_.clear(); }

  // Scope labels name the layer that owns subsequent ops in error messages.
  void push_scope(std::string name) { scopes_.push_back(std::move(name)); }
  void pop_scope() { scopes_.pop_back(); }
  std::string scope_path() const;

  class Scope {
   public:
    Scope(Tape& tape, std::string name) : tape_(tape) { tape_.push_scope(std::move(name)); }
    ~Scope() { tape_.pop_scope(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
  };

 private:
  struct Entry {
    std::string_view op;
    std::shared_ptr<Node<T>> out;
    BackwardFn backward;
  };

  TapeOptions options_;
  std::vector<Entry> entries_;
  std::vector<std::string> scopes_;
  std::size_t last_visited_ = 0;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sapool
