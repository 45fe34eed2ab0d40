#include "sapool/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "sapool/data.hpp"
#include "sapool/ops.hpp"

namespace sapool {

namespace {

using D = double;
using V = Var<D>;

double eval_loss(const std::function<V(Tape<D>&)>& loss) {
  Tape<D> tape(TapeOptions{false, false});
  return loss(tape).value().item();
}

}  // namespace

GradCheckRow check_gradients(const std::string& name, const std::function<V(Tape<D>&)>& loss,
                             const std::vector<Param<D>>& targets, const GradCheckOptions& o) {
  for (const auto& t : targets) {
    V v = t.var;
    v.zero_grad();
  }
  {
    Tape<D> tape;
    V l = loss(tape);
    tape.backward(l);
  }
  std::vector<Tensor<D>> analytic;
  for (const auto& t : targets) analytic.push_back(t.var.grad());

  GradCheckRow row;
  row.name = name;
  const double h = o.step;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    V v = targets[ti].var;
    Tensor<D>& x = v.mutable_value();
    for (std::size_t k = 0; k < x.numel(); ++k) {
      const D orig = x[k];
      auto at = [&](double delta) {
        x[k] = orig + delta;
        return eval_loss(loss);
      };
      const double fm2 = at(-2 * h), fm1 = at(-h), fp1 = at(h), fp2 = at(2 * h);
      x[k] = orig;
      const double numeric = (fm2 - 8 * fm1 + 8 * fp1 - fp2) / (12 * h);
      const double a = analytic[ti][k];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), o.floor});
      row.max_abs_err = std::max(row.max_abs_err, abs_err);
      if (rel > row.max_rel_err || !std::isfinite(rel)) {
        row.max_rel_err = std::isfinite(rel) ? rel : INFINITY;
        row.worst = targets[ti].name + "[" + std::to_string(k) + "]";
      }
      ++row.entries;
    }
  }
  row.pass = row.entries > 0 && row.max_rel_err < o.tolerance;
  return row;
}

namespace {

struct Maker {
  RngState rng;

  Tensor<D> uniform(Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<D> t(std::move(s));
    fill_uniform<D>(t.data(), rng, lo, hi);
    return t;
  }
  // Values bounded away from zero, for kinked ops.
  Tensor<D> away_from_zero(Shape s) {
    Tensor<D> t = uniform(std::move(s), 0.1, 1.0);
    for (auto& v : t.data()) v = rng.below(2) ? v : -v;
    return t;
  }
  // Distinct values spaced 0.05 apart in random order, so max-pool has no ties.
  Tensor<D> distinct(Shape s) {
    Tensor<D> t(std::move(s));
    std::vector<std::size_t> idx = shuffled_indices(t.numel(), rng);
    for (std::size_t i = 0; i < t.numel(); ++i) t[idx[i]] = 0.05 * static_cast<double>(i) - 1.0;
    return t;
  }
  Param<D> param(const std::string& name, Tensor<D> t) { return Param<D>{name, V(std::move(t), true)}; }
};

// Σ out ⊙ R with a fixed random R, so no gradient is trivially constant.
V weighted_sum(Tape<D>& tape, const V& out, const Tensor<D>& r) {
  return ops::sum(tape, ops::mul(tape, out, V(r, false)));
}

struct Case {
  std::string name;
  std::vector<Param<D>> targets;
  std::function<V(Tape<D>&)> forward;  // op output before the weighted sum
};

GradCheckRow run_case(const Case& c, Maker& mk, const GradCheckOptions& o) {
  Tape<D> probe(TapeOptions{false, false});
  const Shape out_shape = c.forward(probe).shape();
  const Tensor<D> r = mk.uniform(out_shape);
  auto loss = [&](Tape<D>& tape) {
    V out = c.forward(tape);
    return out.value().rank() == 0 ? out : weighted_sum(tape, out, r);
  };
  return check_gradients(c.name, loss, c.targets, o);
}

}  // namespace

std::vector<GradCheckRow> gradcheck_ops(std::uint64_t seed, const GradCheckOptions& o) {
  Maker mk{RngState{seed, 0}};
  std::vector<Case> cases;
  auto P = [&](const std::string& n, Tensor<D> t) { return mk.param(n, std::move(t)); };

  {
    auto a = P("a", mk.uniform({3, 4})), b = P("b", mk.uniform({4, 5}));
    cases.push_back({"matmul", {a, b}, [a, b](Tape<D>& t) { return ops::matmul(t, a.var, b.var); }});
    auto at = P("a", mk.uniform({4, 3})), bt = P("b", mk.uniform({5, 4}));
    cases.push_back({"matmul_tt", {at, bt}, [at, bt](Tape<D>& t) {
                       return ops::matmul(t, at.var, bt.var, true, true);
                     }});
  }
  {
    auto a = P("a", mk.uniform({3, 5}));
    cases.push_back({"transpose", {a}, [a](Tape<D>& t) { return ops::transpose(t, a.var); }});
    auto x = P("x", mk.uniform({4, 3})), bias = P("bias", mk.uniform({3}));
    cases.push_back({"add_row_bias", {x, bias},
                     [x, bias](Tape<D>& t) { return ops::add_row_bias(t, x.var, bias.var); }});
  }
  {
    auto a = P("a", mk.uniform({2, 3, 2})), b = P("b", mk.uniform({2, 3, 2}));
    cases.push_back({"add", {a, b}, [a, b](Tape<D>& t) { return ops::add(t, a.var, b.var); }});
    cases.push_back({"sub", {a, b}, [a, b](Tape<D>& t) { return ops::sub(t, a.var, b.var); }});
    cases.push_back({"mul", {a, b}, [a, b](Tape<D>& t) { return ops::mul(t, a.var, b.var); }});
    cases.push_back({"scale", {a}, [a](Tape<D>& t) { return ops::scale(t, a.var, -1.75); }});
  }
  {
    auto x = P("x", mk.away_from_zero({2, 3, 4}));
    cases.push_back({"relu", {x}, [x](Tape<D>& t) { return ops::relu(t, x.var); }});
    auto y = P("x", mk.uniform({2, 3, 4}, -4.0, 4.0));
    cases.push_back({"sigmoid", {y}, [y](Tape<D>& t) { return ops::sigmoid(t, y.var); }});
    cases.push_back({"exp", {y}, [y](Tape<D>& t) { return ops::exp(t, y.var); }});
    cases.push_back({"sum", {y}, [y](Tape<D>& t) { return ops::sum(t, y.var); }});
    cases.push_back({"mean", {y}, [y](Tape<D>& t) { return ops::mean(t, y.var); }});
  }
  {
    auto x = P("x", mk.uniform({3, 5}, -3.0, 3.0));
    cases.push_back({"softmax", {x}, [x](Tape<D>& t) { return ops::softmax(t, x.var); }});
    std::vector<int> labels{1, 4, 0};
    cases.push_back({"softmax_cross_entropy", {x}, [x, labels](Tape<D>& t) {
                       return ops::softmax_cross_entropy<D>(t, x.var, labels);
                     }});
  }
  {
    auto x = P("x", mk.uniform({2, 3, 2, 2}));
    cases.push_back({"reshape", {x}, [x](Tape<D>& t) { return ops::reshape(t, x.var, Shape{6, 4}); }});
    cases.push_back({"nchw_to_tokens", {x}, [x](Tape<D>& t) { return ops::nchw_to_tokens(t, x.var); }});
    auto tok = P("tokens", mk.uniform({2, 6, 3}));
    cases.push_back({"tokens_to_nchw", {tok},
                     [tok](Tape<D>& t) { return ops::tokens_to_nchw(t, tok.var, 2, 3); }});
  }
  {
    auto x = P("x", mk.uniform({2, 3, 5, 5})), w = P("w", mk.uniform({4, 3, 3, 3})),
         b = P("b", mk.uniform({4}));
    cases.push_back({"conv2d", {x, w, b}, [x, w, b](Tape<D>& t) {
                       return ops::conv2d(t, x.var, w.var, b.var, {2, 1, 1});
                     }});
    auto xd = P("x", mk.uniform({1, 4, 4, 4})), wd = P("w", mk.uniform({4, 1, 3, 3}));
    cases.push_back({"conv2d_depthwise", {xd, wd}, [xd, wd](Tape<D>& t) {
                       return ops::conv2d(t, xd.var, wd.var, V(), {1, 1, 4});
                     }});
  }
  {
    auto x = P("x", mk.uniform({3, 2, 3, 3})), g = P("gamma", mk.uniform({2}, 0.5, 1.5)),
         b = P("beta", mk.uniform({2}));
    auto st = std::make_shared<ops::BatchNormState<D>>(2);
    cases.push_back({"batchnorm2d_train", {x, g, b}, [x, g, b, st](Tape<D>& t) {
                       return ops::batchnorm2d(t, x.var, g.var, b.var, *st, true);
                     }});
    auto se = std::make_shared<ops::BatchNormState<D>>(2);
    se->running_mean = mk.uniform({2});
    se->running_var = mk.uniform({2}, 0.5, 2.0);
    cases.push_back({"batchnorm2d_eval", {x, g, b}, [x, g, b, se](Tape<D>& t) {
                       return ops::batchnorm2d(t, x.var, g.var, b.var, *se, false);
                     }});
    auto y = P("x", mk.uniform({4, 6})), lg = P("gamma", mk.uniform({6}, 0.5, 1.5)),
         lb = P("beta", mk.uniform({6}));
    cases.push_back({"layernorm", {y, lg, lb},
                     [y, lg, lb](Tape<D>& t) { return ops::layernorm(t, y.var, lg.var, lb.var); }});
  }
  {
    auto x = P("x", mk.uniform({1, 2, 3, 3}));
    cases.push_back({"bilinear_upsample", {x},
                     [x](Tape<D>& t) { return ops::bilinear_upsample(t, x.var, 6, 7); }});
    auto xp = P("x", mk.uniform({2, 2, 4, 4})), pi = P("pi", mk.uniform({2, 2, 4, 4}, 1.0, 2.7));
    cases.push_back({"weighted_pool", {xp, pi},
                     [xp, pi](Tape<D>& t) { return ops::weighted_pool(t, xp.var, pi.var, 2); }});
    cases.push_back({"avg_pool2d", {xp}, [xp](Tape<D>& t) { return ops::avg_pool2d(t, xp.var, 2); }});
    auto xm = P("x", mk.distinct({2, 2, 4, 4}));
    cases.push_back({"max_pool2d", {xm}, [xm](Tape<D>& t) { return ops::max_pool2d(t, xm.var, 2); }});
    cases.push_back({"global_avg_pool", {xp}, [xp](Tape<D>& t) { return ops::global_avg_pool(t, xp.var); }});
  }
  {
    auto tok = P("tokens", mk.uniform({2, 4, 6})), table = P("table", mk.uniform({5, 6}));
    cases.push_back({"add_positional", {tok, table},
                     [tok, table](Tape<D>& t) { return ops::add_positional(t, tok.var, table.var); }});
    auto q = P("q", mk.uniform({2, 5, 4})), k = P("k", mk.uniform({2, 5, 4})),
         v = P("v", mk.uniform({2, 5, 4}));
    cases.push_back({"multi_head_attention", {q, k, v}, [q, k, v](Tape<D>& t) {
                       return ops::multi_head_attention(t, q.var, k.var, v.var, 2);
                     }});
    auto q1 = P("q", mk.uniform({5, 3})), k1 = P("k", mk.uniform({5, 3})), v1 = P("v", mk.uniform({5, 3}));
    cases.push_back({"scaled_dot_attention", {q1, k1, v1}, [q1, k1, v1](Tape<D>& t) {
                       return scaled_dot_attention<D>(t, q1.var, k1.var, v1.var, nullptr);
                     }});
  }

  std::vector<GradCheckRow> rows;
  for (const auto& c : cases) rows.push_back(run_case(c, mk, o));
  return rows;
}

namespace {

template <typename M>
std::vector<Param<D>> with_input(const Param<D>& x, M& module, const std::string& prefix) {
  std::vector<Param<D>> t{x};
  for (auto& p : module.parameters(prefix)) t.push_back(p);
  return t;
}

// Moves BN running statistics off their defaults so eval-mode paths are
// exercised with non-trivial values.
void randomize_buffers(Module<D>& m, Maker& mk) {
  for (auto& b : m.buffers()) {
    const bool is_var = b.name.find("running_var") != std::string::npos;
    auto t = mk.uniform(b.tensor->shape(), is_var ? 0.5 : -0.5, is_var ? 2.0 : 0.5);
    *b.tensor = std::move(t);
  }
}

// Non-zero affine BN parameters and biases so no gradient path is masked
// by an exact zero.
void jitter_parameters(Module<D>& m, Maker& mk) {
  for (auto& p : m.parameters()) {
    V v = p.var;
    for (auto& x : v.mutable_value().data()) x += mk.rng.uniform(-0.1, 0.1);
  }
}

// Sets the BN shifts feeding a ReLU to ±8 per channel (alternating). For n
// values per channel |x̂| <= sqrt(n-1), so at these sizes every pre-activation
// stays well clear of the kink and the stencil never straddles it.
void clear_relu_kinks(Module<D>& m, std::initializer_list<const char*> suffixes) {
  for (auto& p : m.parameters()) {
    bool hit = false;
    for (const char* s : suffixes) {
      const std::string suf(s);
      hit = hit || (p.name.size() >= suf.size() && p.name.compare(p.name.size() - suf.size(), suf.size(), suf) == 0);
    }
    if (!hit) continue;
    V v = p.var;
    auto& t = v.mutable_value();
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = i % 2 ? -8.0 : 8.0;
  }
}

}  // namespace

std::vector<GradCheckRow> gradcheck_layers(const BackboneConfig& cfg, std::uint64_t seed,
                                           const GradCheckOptions& o) {
  Maker mk{RngState{seed, 1}};
  std::vector<GradCheckRow> rows;
  const std::size_t c = 4;

  {
    SapConfig sc;
    sc.patch_size = 2;
    sc.channel_ratio = 1.0;
    sc.num_heads = cfg.num_heads;
    sc.stride = 2;
    sc.ablation = cfg.ablation;
    sc.pre_ln = cfg.pre_ln;
    RngState r{seed, 2};
    auto sap = std::make_shared<SelfAttentivePool<D>>(c, 8, 8, sc, r, "sap");
    jitter_parameters(*sap, mk);
    clear_relu_kinks(*sap, {"bn1.beta"});
    auto x = mk.param("x", mk.uniform({1, c, 8, 8}));
    for (Mode mode : {Mode::train, Mode::eval}) {
      if (mode == Mode::eval) randomize_buffers(*sap, mk);
      rows.push_back(run_case({mode == Mode::train ? "layer:sap" : "layer:sap_eval",
                               with_input(x, *sap, "sap"),
                               [sap, x, mode](Tape<D>& t) { return sap->forward(t, x.var, mode); }},
                              mk, o));
    }
  }
  {
    RngState r{seed, 3};
    auto lip = std::make_shared<LipPool<D>>(c, 2, r);
    jitter_parameters(*lip, mk);
    auto x = mk.param("x", mk.uniform({2, c, 4, 4}));
    rows.push_back(run_case({"layer:lip", with_input(x, *lip, "lip"),
                             [lip, x](Tape<D>& t) { return lip->forward(t, x.var, Mode::train); }},
                            mk, o));
  }
  {
    RngState r{seed, 4};
    auto sc = std::make_shared<StridedConvPool<D>>(c, 2, r);
    auto x = mk.param("x", mk.uniform({2, c, 4, 4}));
    rows.push_back(run_case({"layer:strided", with_input(x, *sc, "strided"),
                             [sc, x](Tape<D>& t) { return sc->forward(t, x.var, Mode::train); }},
                            mk, o));
  }
  {
    RngState r{seed, 5};
    auto msa = std::make_shared<MultiHeadSelfAttention<D>>(4, 2, r, cfg.pre_ln);
    jitter_parameters(*msa, mk);
    auto x = mk.param("tokens", mk.uniform({2, 5, 4}));
    rows.push_back(run_case({"layer:msa", with_input(x, *msa, "msa"),
                             [msa, x](Tape<D>& t) { return msa->forward(t, x.var); }},
                            mk, o));
  }
  {
    RngState r{seed, 6};
    auto blk = std::make_shared<BasicBlock<D>>(3, 4, r);
    jitter_parameters(*blk, mk);
    clear_relu_kinks(*blk, {"bn1.beta", "bn2.beta", "proj_bn.beta"});
    auto x = mk.param("x", mk.uniform({2, 3, 4, 4}));
    rows.push_back(run_case({"layer:basic_block", with_input(x, *blk, "block"),
                             [blk, x](Tape<D>& t) { return blk->forward(t, x.var, Mode::train); }},
                            mk, o));
  }
  {
    RngState r{seed, 7};
    auto blk = std::make_shared<InvertedResidual<D>>(4, 4, 2, r);
    jitter_parameters(*blk, mk);
    clear_relu_kinks(*blk, {"bn_expand.beta", "bn_depthwise.beta"});
    auto x = mk.param("x", mk.uniform({2, 4, 4, 4}));
    rows.push_back(run_case({"layer:inverted_residual", with_input(x, *blk, "block"),
                             [blk, x](Tape<D>& t) { return blk->forward(t, x.var, Mode::train); }},
                            mk, o));
  }
  return rows;
}

std::string format_gradcheck(const std::vector<GradCheckRow>& rows) {
  std::string out = "name,entries,max_rel_err,max_abs_err,worst,result\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.3e,%.3e,%s,%s\n", r.name.c_str(), r.entries,
                  r.max_rel_err, r.max_abs_err, r.worst.c_str(), r.pass ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace sapool
