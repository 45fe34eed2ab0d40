#include <cmath>
#include <numbers>

#include "sapool/attention.hpp"
#include "sapool/gradcheck.hpp"
#include "test_util.hpp"

using namespace sapool;
using sapool::testing::var;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  RngState rng{seed, 0};
  Tensor<double> t(std::move(s));
  fill_normal(t.data(), rng, 0.0, sd);
  return t;
}

MultiHeadSelfAttention<double> make_msa(std::size_t d, std::size_t heads, std::uint64_t seed) {
  RngState rng{seed, 0};
  MultiHeadSelfAttention<double> msa(d, heads, rng);
  msa.params.ln_gamma.mutable_value() = randn({d}, seed + 1, 0.3);
  for (auto& g : msa.params.ln_gamma.mutable_value().storage()) g += 1.0;
  msa.params.ln_beta.mutable_value() = randn({d}, seed + 2, 0.3);
  return msa;
}

Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  const std::size_t d = x.dim(1);
  Tensor<double> out(x.shape());
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t c = 0; c < d; ++c) out.at({r, c}) = x.at({perm[r], c});
  return out;
}

}  // namespace

TEST_CASE("scaled_dot_attention: single token returns V") {
  Tape<double> tape(TapeOptions{false, false});
  auto v = var({1, 3}, {4, -5, 6});
  auto out = scaled_dot_attention(tape, var({1, 3}, {1, 2, 3}), var({1, 3}, {-1, 0, 2}), v).value();
  CHECK(out.storage() == v.value().storage());
}

TEST_CASE("scaled_dot_attention: identical keys average the values") {
  Tape<double> tape(TapeOptions{false, false});
  auto q = var({3, 2}, {1, 2, -3, 0.5, 0, 7});
  auto k = var({3, 2}, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2});
  auto v = var({3, 2}, {1, 10, 2, 20, 6, 60});
  Var<double> w;
  auto out = scaled_dot_attention(tape, q, k, v, &w).value();
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(out.at({r, 0}) == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(out.at({r, 1}) == doctest::Approx(30.0).epsilon(1e-14));
    for (std::size_t c = 0; c < 3; ++c) CHECK(w.value().at({r, c}) == doctest::Approx(1.0 / 3));
  }
}

TEST_CASE("scaled_dot_attention: two-token hand evaluation") {
  Tape<double> tape(TapeOptions{false, false});
  auto out = scaled_dot_attention(tape, var({2, 1}, {1, 0}), var({2, 1}, {1, 0}), var({2, 1}, {10, 20})).value();
  const double e = std::numbers::e;
  CHECK(out[0] == doctest::Approx(10 * e / (e + 1) + 20 / (e + 1)).epsilon(1e-14));
  CHECK(out[0] == doctest::Approx(12.689).epsilon(1e-4));
  CHECK(out[1] == doctest::Approx(15.0).epsilon(1e-14));
}

TEST_CASE("scaled_dot_attention: zero key width") {
  Tape<double> tape(TapeOptions{false, false});
  Var<double> z(Tensor<double>(Shape{2, 0}));
  CHECK_THROWS_AS(scaled_dot_attention(tape, z, z, z), ContractError);
}

TEST_CASE("scaled_dot_attention agrees with the packed kernel for one head") {
  Tape<double> tape(TapeOptions{false, false});
  Var<double> q(randn({5, 4}, 1)), k(randn({5, 4}, 2)), v(randn({5, 4}, 3));
  auto a = scaled_dot_attention(tape, q, k, v).value();
  auto b = ops::multi_head_attention(tape, q, k, v, 1).value();
  CHECK(sapool::testing::max_abs_diff(a, b) < 1e-13);
}

TEST_CASE("msa_forward: zero projections leave beta plus the tokens") {
  auto msa = make_msa(4, 2, 9);
  for (auto* w : {&msa.params.wq, &msa.params.wk, &msa.params.wv, &msa.params.wo}) w->mutable_value().fill(0.0);
  Tape<double> tape(TapeOptions{false, false});
  Var<double> x(randn({3, 4}, 4));
  auto y = msa.forward(tape, x).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(y.at({r, c}) == doctest::Approx(msa.params.ln_beta.value()[c] + x.value().at({r, c})).epsilon(1e-14));
}

TEST_CASE("msa_forward: two heads on duplicated sub-tokens equal one head on the half") {
  const std::size_t n = 3, dk = 2, d = 2 * dk;
  auto one = make_msa(dk, 1, 30);
  auto two = make_msa(d, 2, 31);
  // Block-diagonal packing: both heads reuse the single-head weights.
  for (auto [src, dst] : {std::pair{&one.params.wq, &two.params.wq}, std::pair{&one.params.wk, &two.params.wk},
                          std::pair{&one.params.wv, &two.params.wv}, std::pair{&one.params.wo, &two.params.wo}}) {
    Tensor<double> big(Shape{d, d});
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < dk; ++i)
        for (std::size_t j = 0; j < dk; ++j) big.at({h * dk + i, h * dk + j}) = src->value().at({i, j});
    dst->mutable_value() = big;
  }
  for (std::size_t c = 0; c < d; ++c) {
    two.params.ln_gamma.mutable_value()[c] = one.params.ln_gamma.value()[c % dk];
    two.params.ln_beta.mutable_value()[c] = one.params.ln_beta.value()[c % dk];
  }
  Tensor<double> u = randn({n, dk}, 32);
  Tensor<double> x(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) x.at({r, c}) = u.at({r, c % dk});
  Tape<double> tape(TapeOptions{false, false});
  auto y1 = one.forward(tape, Var<double>(u)).value();
  auto y2 = two.forward(tape, Var<double>(x)).value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) CHECK(y2.at({r, c}) == doctest::Approx(y1.at({r, c % dk})).epsilon(1e-12));
}

TEST_CASE("msa_forward: gradient w.r.t. tokens, N=3, D=4, m=2") {
  auto msa = make_msa(4, 2, 40);
  Var<double> x(randn({3, 4}, 41), true);
  auto row = check_gradients(
      "msa", [&](Tape<double>& t) { return ops::sum(t, msa.forward(t, x)); }, {{"x", x}});
  CHECK_MESSAGE(row.pass, row.worst << " rel " << row.max_rel_err);
}

TEST_CASE("msa_forward: empty sequence and wrong width") {
  auto msa = make_msa(4, 2, 50);
  Tape<double> tape(TapeOptions{false, false});
  CHECK_THROWS_AS(msa.forward(tape, Var<double>(Tensor<double>(Shape{0, 4}))), ContractError);
  CHECK_THROWS_AS(msa.forward(tape, Var<double>(Tensor<double>(Shape{3, 5}))), DimensionError);
}

TEST_CASE("msa_forward: attention rows sum to one and the residual is exact") {
  auto msa = make_msa(8, 2, 60);
  Tape<double> tape(TapeOptions{false, false});
  Var<double> x(randn({2, 6, 8}, 61, 2.0));
  MsaTrace<double> trace;
  auto y = msa.forward(tape, x, &trace).value();
  const auto& w = trace.weights;
  REQUIRE(w.shape() == Shape{2, 2, 6, 6});
  for (std::size_t row = 0; row < 2 * 2 * 6; ++row) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += w[row * 6 + c];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == trace.normed.value()[i] + x.value()[i]);
}

TEST_CASE("msa_forward: permutation equivariance without positional encoding only") {
  auto msa = make_msa(4, 2, 70);
  Tape<double> tape(TapeOptions{false, false});
  Tensor<double> x = randn({5, 4}, 71);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto base = msa.forward(tape, Var<double>(x)).value();
  auto permuted = msa.forward(tape, Var<double>(permute_rows(x, perm))).value();
  CHECK(sapool::testing::max_abs_diff(permuted, permute_rows(base, perm)) < 1e-5);

  RngState rng{72, 0};
  PositionalEncoding<double> pe(5, 4, rng, 1.0);
  auto with_pe = [&](const Tensor<double>& t) { return msa.forward(tape, pe.forward(tape, Var<double>(t))).value(); };
  auto a = with_pe(x), b = with_pe(permute_rows(x, perm));
  CHECK(sapool::testing::max_abs_diff(b, permute_rows(a, perm)) > 1e-3);
}

TEST_CASE("add_positional: zero table, row alignment, capacity") {
  Tape<double> tape(TapeOptions{false, false});
  RngState rng{80, 0};
  PositionalEncoding<double> pe(4, 3, rng);
  Tensor<double> x = randn({2, 3, 3}, 81);
  pe.table.mutable_value().fill(0.0);
  CHECK(pe.forward(tape, Var<double>(x)).value().storage() == x.storage());
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) pe.table.mutable_value().at({r, c}) = 100.0 * r + c;
  auto y = pe.forward(tape, Var<double>(x)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) CHECK(y.at({b, r, c}) == x.at({b, r, c}) + (100.0 * r + c));
  CHECK_THROWS_AS(pe.forward(tape, Var<double>(Tensor<double>(Shape{5, 3}))), ContractError);
}
