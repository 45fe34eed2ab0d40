#pragma once

#include "sapool/nn.hpp"

namespace sapool {

// Single-head softmax(QKᵀ/√d_k)·V on [N,d_k] operands, composed from generic
// ops (matmul, scale, softmax). Slower than ops::multi_head_attention but
// useful on its own and as a cross-check of the fused kernel.
template <typename T>
Var<T> scaled_dot_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            Var<T>* weights = nullptr);

template <typename T>
struct MsaParams {
  std::size_t num_heads = 2;
  std::size_t embed_dim = 0;
  // Packed [D,D]; head j reads columns [j*d_k, (j+1)*d_k).
  Var<T> wq, wk, wv;
  Var<T> wo;
  Var<T> ln_gamma, ln_beta;

  std::size_t head_dim() const { return num_heads ? embed_dim / num_heads : 0; }
};

// Intermediates of one msa_forward call.
template <typename T>
struct MsaTrace {
  Var<T> attended;    // MSA(x), after W^O
  Var<T> normed;      // LN(MSA(x)) in post-LN mode
  Tensor<T> weights;  // [B, m, N, N]
};

template <typename T>
class MultiHeadSelfAttention : public Module<T> {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t embed_dim, std::size_t num_heads, RngState& rng,
                         bool pre_ln = false);

  // tokens [B,N,D] or [N,D]. Post-LN: LN(MSA(x)) + x. Pre-LN: MSA(LN(x)) + x.
  Var<T> forward(Tape<T>& tape, const Var<T>& tokens, MsaTrace<T>* trace = nullptr) const;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;

  MsaParams<T> params;
  bool pre_ln = false;
};

template <typename T>
class PositionalEncoding : public Module<T> {
 public:
  PositionalEncoding() = default;
  PositionalEncoding(std::size_t max_tokens, std::size_t dim, RngState& rng, double stddev = 0.02);

  Var<T> forward(Tape<T>& tape, const Var<T>& tokens) const;
  void collect_parameters(const std::string& prefix, std::vector<Param<T>>& out) override;

  std::size_t max_tokens() const { return table.shape()[0]; }

  Var<T> table;
};

extern template class MultiHeadSelfAttention<float>;
extern template class MultiHeadSelfAttention<double>;
extern template class PositionalEncoding<float>;
extern template class PositionalEncoding<double>;

}  // namespace sapool
