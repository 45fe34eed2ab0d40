#include "sapool/attention.hpp"

#include <cmath>

namespace sapool {

template <typename T>
Var<T> scaled_dot_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            Var<T>* weights) {
  const auto& s = q.shape();
  if (s.size() != 2 || k.shape() != s || v.shape() != s) {
    throw DimensionError("scaled_dot_attention: expects matching [N,d_k] operands, got " +
                         shape_str(s) + ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (s[1] == 0) throw ContractError("scaled_dot_attention: d_k is zero");
  if (s[0] == 0) throw ContractError("scaled_dot_attention: empty token sequence");
  const double scale = 1.0 / std::sqrt(static_cast<double>(s[1]));
  Var<T> scores = ops::scale(tape, ops::matmul(tape, q, k, false, true), scale);
  Var<T> p = ops::softmax(tape, scores);
  if (weights) *weights = p;
  return ops::matmul(tape, p, v);
}

template <typename T>
MultiHeadSelfAttention<T>::MultiHeadSelfAttention(std::size_t embed_dim, std::size_t num_heads,
                                                  RngState& rng, bool pre_ln_)
    : pre_ln(pre_ln_) {
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("attention: embed dim " + std::to_string(embed_dim) +
                      " is not divisible into " + std::to_string(num_heads) + " heads");
  }
  params.num_heads = num_heads;
  params.embed_dim = embed_dim;
  const Shape sq{embed_dim, embed_dim};
  params.wq = Var<T>(fan_in_uniform<T>(sq, embed_dim, 1.0, rng), true);
  params.wk = Var<T>(fan_in_uniform<T>(sq, embed_dim, 1.0, rng), true);
  params.wv = Var<T>(fan_in_uniform<T>(sq, embed_dim, 1.0, rng), true);
  params.wo = Var<T>(fan_in_uniform<T>(sq, embed_dim, 1.0, rng), true);
  params.ln_gamma = Var<T>(Tensor<T>(Shape{embed_dim}, T(1)), true);
  params.ln_beta = Var<T>(Tensor<T>(Shape{embed_dim}, T(0)), true);
}

template <typename T>
Var<T> MultiHeadSelfAttention<T>::forward(Tape<T>& tape, const Var<T>& tokens,
                                          MsaTrace<T>* trace) const {
  const Shape& s = tokens.shape();
  const std::size_t d = params.embed_dim;
  if ((s.size() != 2 && s.size() != 3) || s.back() != d) {
    throw DimensionError("msa_forward: expected tokens [B,N," + std::to_string(d) + "], got " +
                         shape_str(s));
  }
  const std::size_t n = s[s.size() - 2];
  if (n == 0) throw ContractError("msa_forward: empty token sequence");
  const std::size_t rows = tokens.numel() / d;

  auto attend = [&](const Var<T>& in) {
    Var<T> flat = ops::reshape(tape, in, Shape{rows, d});
    Var<T> q = ops::reshape(tape, ops::matmul(tape, flat, params.wq), s);
    Var<T> k = ops::reshape(tape, ops::matmul(tape, flat, params.wk), s);
    Var<T> v = ops::reshape(tape, ops::matmul(tape, flat, params.wv), s);
    Var<T> heads = ops::multi_head_attention(tape, q, k, v, params.num_heads,
                                             trace ? &trace->weights : nullptr);
    Var<T> proj = ops::matmul(tape, ops::reshape(tape, heads, Shape{rows, d}), params.wo);
    return ops::reshape(tape, proj, s);
  };

  if (pre_ln) {
    Var<T> normed = ops::layernorm(tape, tokens, params.ln_gamma, params.ln_beta);
    Var<T> attended = attend(normed);
    if (trace) {
      trace->attended = attended;
      trace->normed = normed;
    }
    return ops::add(tape, attended, tokens);
  }
  Var<T> attended = attend(tokens);
  Var<T> normed = ops::layernorm(tape, attended, params.ln_gamma, params.ln_beta);
  if (trace) {
    trace->attended = attended;
    trace->normed = normed;
  }
  return ops::add(tape, normed, tokens);
}

template <typename T>
void MultiHeadSelfAttention<T>::collect_parameters(const std::string& prefix,
                                                   std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "wq"), params.wq});
  out.push_back({join_name(prefix, "wk"), params.wk});
  out.push_back({join_name(prefix, "wv"), params.wv});
  out.push_back({join_name(prefix, "wo"), params.wo});
  out.push_back({join_name(prefix, "ln.gamma"), params.ln_gamma});
  out.push_back({join_name(prefix, "ln.beta"), params.ln_beta});
}

template <typename T>
PositionalEncoding<T>::PositionalEncoding(std::size_t max_tokens, std::size_t dim, RngState& rng,
                                          double stddev) {
  Tensor<T> t(Shape{max_tokens, dim});
  fill_normal<T>(t.data(), rng, 0.0, stddev);
  table = Var<T>(std::move(t), true);
}

template <typename T>
Var<T> PositionalEncoding<T>::forward(Tape<T>& tape, const Var<T>& tokens) const {
  return ops::add_positional(tape, tokens, table);
}

template <typename T>
void PositionalEncoding<T>::collect_parameters(const std::string& prefix,
                                               std::vector<Param<T>>& out) {
  out.push_back({join_name(prefix, "table"), table});
}

template Var<float> scaled_dot_attention<float>(Tape<float>&, const Var<float>&, const Var<float>&,
                                                const Var<float>&, Var<float>*);
template Var<double> scaled_dot_attention<double>(Tape<double>&, const Var<double>&,
                                                  const Var<double>&, const Var<double>&,
                                                  Var<double>*);
template class MultiHeadSelfAttention<float>;
template class MultiHeadSelfAttention<double>;
template class PositionalEncoding<float>;
template class PositionalEncoding<double>;

}  // namespace sapool
