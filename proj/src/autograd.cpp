#include "sapool/autograd.hpp"

namespace sapool {

template <typename T>
void Tape<T>::record(std::string_view op, const Var<T>& out, BackwardFn backward) {
  if (!options_.record || !out.requires_grad()) return;
  entries_.push_back(Entry{op, out.shared(), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any trainable value");
  }
  Tensor<T>& seed = loss.node()->grad_buffer();
  seed[0] += T(1);
  last_visited_ = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    ++last_visited_;
    if (it->out->has_grad()) it->backward(it->out->grad);
  }
}

template <typename T>
std::string Tape<T>::scope_path() const {
  std::string path;
  for (const auto& s : scopes_) {
    if (!path.empty()) path += '.';
    path += s;
  }
  return path;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace sapool
