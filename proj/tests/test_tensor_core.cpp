#include <cmath>
#include <numbers>

#include "sapool/gradcheck.hpp"
#include "sapool/rng.hpp"
#include "test_util.hpp"

using namespace sapool;
using sapool::testing::var;

namespace {

Tape<double> no_grad() { return Tape<double>(TapeOptions{false, false}); }

}  // namespace

TEST_CASE("matmul: identity and dot product") {
  auto tape = no_grad();
  auto id = var({2, 2}, {1, 0, 0, 1});
  auto b = var({2, 2}, {1, 2, 3, 4});
  CHECK(ops::matmul(tape, id, b).value().storage() == std::vector<double>{1, 2, 3, 4});
  auto r = ops::matmul(tape, var({1, 2}, {1, 2}), var({2, 1}, {3, 4}));
  CHECK(r.value().shape() == Shape{1, 1});
  CHECK(r.value()[0] == 11.0);
}

TEST_CASE("matmul: gradient of sum(A·B) w.r.t. A is the row sums of B") {
  RngState rng{3, 0};
  Tensor<double> a(Shape{3, 4}), b(Shape{4, 5});
  fill_normal(a.data(), rng, 0, 1);
  fill_normal(b.data(), rng, 0, 1);
  Tape<double> tape;
  Var<double> va(a, true), vb(b, true);
  tape.backward(ops::sum(tape, ops::matmul(tape, va, vb)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double row = 0;
      for (std::size_t j = 0; j < 5; ++j) row += b.at({k, j});
      CHECK(va.grad().at({i, k}) == doctest::Approx(row).epsilon(1e-12));
    }
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto row = check_gradients(
      "matmul", [&](Tape<double>& t) { return ops::sum(t, ops::matmul(t, va, vb)); },
      {{"a", va}, {"b", vb}}, opt);
  CHECK(row.pass);
}

TEST_CASE("matmul: mismatched inner extents name both shapes") {
  auto tape = no_grad();
  try {
    ops::matmul(tape, var({2, 3}, std::vector<double>(6)), var({2, 3}, std::vector<double>(6)));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d: identity kernel and all-ones 2x2") {
  auto tape = no_grad();
  auto x = var({1, 1, 2, 2}, {1, 2, 3, 4});
  auto id = ops::conv2d(tape, x, var({1, 1, 1, 1}, {1}), var({1}, {0}), {1, 0, 1});
  CHECK(id.value().storage() == x.value().storage());
  auto s = ops::conv2d(tape, x, var({1, 1, 2, 2}, {1, 1, 1, 1}), var({1}, {0}), {2, 0, 1});
  CHECK(s.value().shape() == Shape{1, 1, 1, 1});
  CHECK(s.value()[0] == 10.0);
  CHECK(ops::conv_out_extent(7, 3, 2, 1) == 4);
}

TEST_CASE("conv2d: gradients match central differences on 1x2x6x6, k=3, s=2, p=1") {
  RngState rng{11, 0};
  Tensor<double> x(Shape{1, 2, 6, 6}), w(Shape{3, 2, 3, 3}), b(Shape{3});
  fill_normal(x.data(), rng, 0, 1);
  fill_normal(w.data(), rng, 0, 1);
  fill_normal(b.data(), rng, 0, 1);
  Var<double> vx(x, true), vw(w, true), vb(b, true);
  Tensor<double> probe(Shape{1, 3, 3, 3});
  fill_normal(probe.data(), rng, 0, 1);
  Var<double> vp(probe);
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto row = check_gradients(
      "conv2d",
      [&](Tape<double>& t) {
        return ops::sum(t, ops::mul(t, ops::conv2d(t, vx, vw, vb, {2, 1, 1}), vp));
      },
      {{"x", vx}, {"w", vw}, {"b", vb}}, opt);
  CHECK_MESSAGE(row.pass, row.worst << " rel " << row.max_rel_err);
}

TEST_CASE("conv2d: kernel larger than the padded input") {
  auto tape = no_grad();
  CHECK_THROWS_AS(ops::conv2d(tape, var({1, 1, 2, 2}, {1, 2, 3, 4}),
                              var({1, 1, 3, 3}, std::vector<double>(9, 1.0)), Var<double>(), {1, 0, 1}),
                  DimensionError);
}

TEST_CASE("softmax: symmetry, stability and log inputs") {
  auto tape = no_grad();
  auto u = ops::softmax(tape, var({3}, {0, 0, 0})).value();
  for (double v : u.storage()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto big = ops::softmax(tape, var({2}, {1000, 0})).value();
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));
  auto l = ops::softmax(tape, var({3}, {std::log(1.0), std::log(2.0), std::log(3.0)})).value();
  CHECK(l[0] == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(l[1] == doctest::Approx(2.0 / 6).epsilon(1e-14));
  CHECK(l[2] == doctest::Approx(3.0 / 6).epsilon(1e-14));
}

TEST_CASE("softmax: rows sum to one and ignore a per-row shift") {
  RngState rng{5, 0};
  Tensor<double> x(Shape{7, 9});
  fill_normal(x.data(), rng, 0, 4);
  Tensor<double> shifted = x;
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 9; ++c) shifted.at({r, c}) += 10.0 * r - 3.0;
  auto tape = no_grad();
  auto a = ops::softmax(tape, Var<double>(x)).value();
  auto b = ops::softmax(tape, Var<double>(shifted)).value();
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += a.at({r, c});
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  CHECK(sapool::testing::max_abs_diff(a, b) < 1e-6);
}

TEST_CASE("elementwise: sigmoid, relu, exp of sigmoid") {
  auto tape = no_grad();
  CHECK(ops::sigmoid(tape, var({1}, {0.0})).value()[0] == 0.5);
  auto r = ops::relu(tape, var({2}, {-3.0, 3.0})).value();
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 3.0);
  const double e = std::numbers::e;
  auto pi = ops::exp(tape, ops::sigmoid(tape, var({3}, {-50.0, 0.0, 50.0}))).value();
  // At |x| = 50 the open-interval gap is below f64 resolution; the values
  // land on the endpoints, and the vectorized exp may sit one ulp above e.
  CHECK(pi[0] >= 1.0);
  CHECK(pi[0] < 1.0 + 1e-15);
  CHECK(pi[1] > 1.0);
  CHECK(pi[1] < e);
  CHECK(pi[1] == doctest::Approx(std::exp(0.5)).epsilon(1e-15));
  CHECK(pi[2] <= std::nextafter(e, 3.0));
  CHECK(pi[2] > e - 1e-15);
  auto mid = ops::exp(tape, ops::sigmoid(tape, var({4}, {-30.0, -1.0, 1.0, 30.0}))).value();
  for (double v : mid.storage()) {
    CHECK(v > 1.0);
    CHECK(v < e);
  }
}

TEST_CASE("batchnorm2d: two-point channel, constant channel, eval affine") {
  Tape<double> tape(TapeOptions{false, false});
  ops::BatchNormState<double> st(1);
  auto g = var({1}, {1.0}), b = var({1}, {0.0});
  auto y = ops::batchnorm2d(tape, var({2, 1, 1, 1}, {-1.0, 1.0}), g, b, st, true).value();
  const double k = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(-k).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(k).epsilon(1e-14));
  // Running stats: momentum 0.1 toward the batch mean 0 and unbiased variance 2.
  CHECK(st.running_mean[0] == doctest::Approx(0.0));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));

  ops::BatchNormState<double> st2(1);
  auto c = ops::batchnorm2d(tape, var({1, 1, 2, 2}, {3, 3, 3, 3}), g, var({1}, {0.25}), st2, true).value();
  for (double v : c.storage()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  ops::BatchNormState<double> frozen(1);
  frozen.running_mean[0] = 2.0;
  frozen.running_var[0] = 4.0;
  auto e1 = ops::batchnorm2d(tape, var({1, 1, 1, 3}, {0, 1, 2}), var({1}, {3.0}), var({1}, {1.0}), frozen, false).value();
  const double s = 3.0 / std::sqrt(4.0 + 1e-5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(e1[i] == doctest::Approx((i - 2.0) * s + 1.0).epsilon(1e-14));
  CHECK(frozen.running_mean[0] == 2.0);
}

TEST_CASE("batchnorm2d: zero-element channel") {
  Tape<double> tape(TapeOptions{false, false});
  ops::BatchNormState<double> st(1);
  CHECK_THROWS_AS(ops::batchnorm2d(tape, Var<double>(Tensor<double>(Shape{0, 1, 2, 2})), var({1}, {1.0}),
                                   var({1}, {0.0}), st, true),
                  DimensionError);
}

TEST_CASE("layernorm: constant token and two-point token") {
  auto tape = no_grad();
  auto z = ops::layernorm(tape, var({1, 3}, {2, 2, 2}), var({3}, {1, 1, 1}), var({3}, {0, 0, 0})).value();
  for (double v : z.storage()) CHECK(v == 0.0);
  auto y = ops::layernorm(tape, var({1, 2}, {-1, 1}), var({2}, {2.0, 3.0}), var({2}, {0.5, -0.5})).value();
  const double k = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(-k * 2.0 + 0.5).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(k * 3.0 - 0.5).epsilon(1e-14));
}

TEST_CASE("layernorm: gradients match central differences") {
  RngState rng{21, 0};
  Tensor<double> x(Shape{3, 5}), g(Shape{5}), b(Shape{5}), p(Shape{3, 5});
  fill_normal(x.data(), rng, 0, 1);
  fill_normal(g.data(), rng, 1, 0.3);
  fill_normal(b.data(), rng, 0, 1);
  fill_normal(p.data(), rng, 0, 1);
  Var<double> vx(x, true), vg(g, true), vb(b, true), vp(p);
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto row = check_gradients(
      "layernorm", [&](Tape<double>& t) { return ops::sum(t, ops::mul(t, ops::layernorm(t, vx, vg, vb), vp)); },
      {{"x", vx}, {"gamma", vg}, {"beta", vb}}, opt);
  CHECK_MESSAGE(row.pass, row.worst << " rel " << row.max_rel_err);
}

TEST_CASE("bilinear_upsample: constant extension and the half-pixel 2x2 -> 4x4 grid") {
  auto tape = no_grad();
  auto one = ops::bilinear_upsample(tape, var({1, 1, 1, 1}, {7.5}), 3, 5).value();
  CHECK(one.shape() == Shape{1, 1, 3, 5});
  for (double v : one.storage()) CHECK(v == 7.5);

  auto up = ops::bilinear_upsample(tape, var({1, 1, 2, 2}, {0, 1, 2, 3}), 4, 4).value();
  // Independent oracle: source coordinate (d + 0.5)/2 - 0.5 clamped to [0, 1].
  auto coord = [](double d) { return std::clamp((d + 0.5) * 0.5 - 0.5, 0.0, 1.0); };
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double r = coord(i), c = coord(j);
      const double expect = (1 - r) * ((1 - c) * 0 + c * 1) + r * ((1 - c) * 2 + c * 3);
      CHECK(up.at({0, 0, i, j}) == doctest::Approx(expect).epsilon(1e-15));
    }
  CHECK(up.at({0, 0, 0, 0}) == 0.0);
  CHECK(up.at({0, 0, 0, 3}) == 1.0);
  CHECK(up.at({0, 0, 3, 0}) == 2.0);
  CHECK(up.at({0, 0, 3, 3}) == 3.0);

  auto flat = ops::bilinear_upsample(tape, var({1, 1, 2, 3}, std::vector<double>(6, -2.0)), 7, 9).value();
  for (double v : flat.storage()) CHECK(v == -2.0);
}

TEST_CASE("bilinear_upsample: target smaller than the source") {
  auto tape = no_grad();
  CHECK_THROWS_AS(ops::bilinear_upsample(tape, var({1, 1, 2, 2}, {0, 1, 2, 3}), 1, 4), DimensionError);
}

TEST_CASE("backward: sum, square, fan-out") {
  Tape<double> tape;
  auto x = var({4}, {1, -2, 3, 0.5}, true);
  tape.backward(ops::sum(tape, x));
  for (double g : x.grad().storage()) CHECK(g == 1.0);

  Tape<double> t2;
  auto y = var({4}, {1, -2, 3, 0.5}, true);
  t2.backward(ops::sum(t2, ops::mul(t2, y, y)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.grad()[i] == 2.0 * y.value()[i]);

  Tape<double> t3;
  auto z = var({3}, {0.1, 0.2, 0.3}, true);
  t3.backward(ops::sum(t3, ops::add(t3, z, z)));
  for (double g : z.grad().storage()) CHECK(g == 2.0);
}

TEST_CASE("backward: sigmoid∘matmul composite matches central differences") {
  RngState rng{8, 0};
  Tensor<double> a(Shape{3, 4}), b(Shape{4, 2});
  fill_normal(a.data(), rng, 0, 1);
  fill_normal(b.data(), rng, 0, 1);
  Var<double> va(a, true), vb(b, true);
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto row = check_gradients(
      "composite", [&](Tape<double>& t) { return ops::sum(t, ops::sigmoid(t, ops::matmul(t, va, vb))); },
      {{"a", va}, {"b", vb}}, opt);
  CHECK_MESSAGE(row.pass, row.worst << " rel " << row.max_rel_err);
}

TEST_CASE("backward: non-scalar loss") {
  Tape<double> tape;
  auto x = var({2}, {1, 2}, true);
  auto y = ops::scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("rng: identical state gives identical streams") {
  RngState a{42, 7}, b{42, 7};
  Tensor<double> ta(Shape{64}), tb(Shape{64});
  fill_normal(ta.data(), a, 0, 1);
  fill_normal(tb.data(), b, 0, 1);
  CHECK(ta.storage() == tb.storage());
  CHECK(a == b);
  CHECK(a.fork(1).next_u64() != a.fork(2).next_u64());
}

TEST_CASE("gradcheck: every op passes on three seeds") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& row : gradcheck_ops(seed)) {
      CHECK_MESSAGE(row.pass, "seed " << seed << " " << row.name << " " << row.worst << " rel "
                                      << row.max_rel_err);
    }
  }
}

TEST_CASE("elementwise: exp overflows to inf and keeps NaN") {
  auto tape = no_grad();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto y = ops::exp(tape, var({3}, {1e4, 700.0, nan})).value();
  CHECK(std::isinf(y[0]));
  CHECK(y[1] == doctest::Approx(std::exp(700.0)).epsilon(1e-14));
  CHECK(std::isnan(y[2]));
  CHECK(std::isnan(ops::sigmoid(tape, var({1}, {nan})).value()[0]));
  Tensor<float> f(Shape{2});
  f[0] = 1e4f;
  f[1] = 88.0f;
  Tape<float> ft(TapeOptions{false, false});
  auto g = ops::exp(ft, Var<float>(f)).value();
  CHECK(std::isinf(g[0]));
  CHECK(std::isfinite(g[1]));
}
