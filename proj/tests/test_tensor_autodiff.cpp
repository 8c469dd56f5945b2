#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "triplex/autodiff.hpp"
#include "triplex/grad_check.hpp"

using namespace triplex;

namespace {

Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  auto y = softmax_last(Var<double>::constant(Tensor<double>({1, 3}, {0, 0, 0})));
  for (int j = 0; j < 3; ++j) CHECK(y.value()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("matmul with the identity returns the input") {
  Rng rng(1);
  Tensor<double> a = random_tensor({3, 3}, rng);
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
  auto out = matmul(Var<double>::constant(eye), Var<double>::constant(a));
  for (int64_t i = 0; i < 9; ++i) CHECK(out.value()[i] == doctest::Approx(a[i]).epsilon(1e-14));
}

TEST_CASE("averaging conv kernel preserves a constant image in the interior") {
  const double c = 2.5;
  Tensor<double> img = Tensor<double>::full({1, 6, 6}, c);
  Tensor<double> kernel = Tensor<double>::full({1, 1, 3, 3}, 1.0 / 9.0);
  auto out = conv2d(Var<double>::constant(img), Var<double>::constant(kernel));
  REQUIRE(out.shape() == std::vector<int64_t>{1, 6, 6});
  for (int64_t y = 1; y < 5; ++y)
    for (int64_t x = 1; x < 5; ++x)
      CHECK(out.value()[y * 6 + x] == doctest::Approx(c).epsilon(1e-12));
  // border cells average in zero padding
  CHECK(out.value()[0] == doctest::Approx(c * 4.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("backward of sum(x^2) doubles the input") {
  Var<double> x = Var<double>::leaf(Tensor<double>({2}, {1, 2}), true);
  backward(sum_all(square(x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward of sum(x) is all ones") {
  Rng rng(2);
  Var<double> x = Var<double>::leaf(random_tensor({7}, rng), true);
  backward(sum_all(x));
  for (int64_t i = 0; i < 7; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("mse(Wx, y) gradient matches central differences") {
  Rng rng(3);
  Tensor<double> w0 = random_tensor({4, 4}, rng);
  Tensor<double> x = random_tensor({4, 4}, rng);
  Tensor<double> y = random_tensor({4, 4}, rng);
  auto f = [&](const Var<double>& w) {
    return mse(matmul(w, Var<double>::constant(x)), Var<double>::constant(y));
  };
  CHECK(grad_check<double>(f, w0, 1e-5) < 1e-4);
}

TEST_CASE("grad_check on smooth scalar functions") {
  Rng rng(4);
  Tensor<double> x = random_tensor({10}, rng);
  auto f_sin = [](const Var<double>& v) { return sum_all(sin_op(v)); };
  CHECK(grad_check<double>(f_sin, x) < 1e-6);
  auto f_sum = [](const Var<double>& v) { return sum_all(v); };
  CHECK(grad_check<double>(f_sum, x) < 1e-10);  // zero up to difference-quotient rounding
}

TEST_CASE("grad_check covers every differentiable primitive") {
  Rng rng(5);
  const double tol = 1e-6;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({3, 4}, rng);
    Tensor<double> v4 = random_tensor({4}, rng);
    Tensor<double> g4 = random_tensor({4}, rng);
    Tensor<double> m43 = random_tensor({4, 3}, rng);
    Tensor<double> bmm_rhs = random_tensor({2, 3, 2}, rng);
    Tensor<double> bias23 = random_tensor({2, 3}, rng);
    Tensor<double> conv_in = random_tensor({2, 3, 4}, rng);
    Tensor<double> conv_w = random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> dw_w = random_tensor({2, 1, 3, 3}, rng);
    Tensor<double> chan_b = random_tensor({2}, rng);

    auto through = [&](auto op) {
      return [op](const Var<double>& x) { return sum_all(square(op(x))); };
    };

    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return add(x, Var<double>::constant(b)); }),
              a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return sub(Var<double>::constant(b), x); }),
              a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return mul(x, Var<double>::constant(b)); }),
              a) < tol);
    CHECK(grad_check<double>(through([&](const Var<double>& x) { return scale(x, 1.7); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return add_rowvec(Var<double>::constant(a), reshape(x, {4}));
              }),
              random_tensor({1, 4}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return matmul(x, Var<double>::constant(m43)); }),
              a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return matmul(Var<double>::constant(a), x); }),
              m43) < tol);
    CHECK(grad_check<double>(through([&](const Var<double>& x) { return softmax_last(x); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return layer_norm_last(x, Var<double>::constant(g4),
                                       Var<double>::constant(v4));
              }),
              a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return layer_norm_last(Var<double>::constant(a), reshape(x, {4}),
                                       Var<double>::constant(v4));
              }),
              random_tensor({1, 4}, rng)) < tol);
    CHECK(grad_check<double>(through([&](const Var<double>& x) { return gelu(x); }), a) < tol);
    CHECK(grad_check<double>(through([&](const Var<double>& x) { return relu(x); }),
                             random_tensor({3, 4}, rng, 2.0)) < tol);
    CHECK(grad_check<double>(through([&](const Var<double>& x) { return mean_rows(x); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return permute(x, {1, 0}); }), a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return reshape(x, {4, 3}); }), a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return concat_rows(x, Var<double>::constant(b));
              }),
              a) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return gather_rows(x, {2, 0, 0, 1}); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return scatter_rows(x, {4, 1, 3}, 6); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return gather_last(x, {0, 3, 3, 1}); }), a) <
          tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return bmm(reshape(x, {2, 2, 3}), Var<double>::constant(bmm_rhs));
              }),
              random_tensor({2, 6}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return add_bcast0(reshape(x, {2, 2, 3}), Var<double>::constant(bias23));
              }),
              random_tensor({4, 3}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return conv2d(reshape(x, {2, 3, 4}), Var<double>::constant(conv_w));
              }),
              random_tensor({2, 12}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return conv2d(Var<double>::constant(conv_in), reshape(x, {3, 2, 3, 3}));
              }),
              random_tensor({3, 18}, rng)) < tol);
    // depthwise with stride 2
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return conv2d(reshape(x, {2, 4, 4}), Var<double>::constant(dw_w), 2, 2);
              }),
              random_tensor({2, 16}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) { return avg_pool2d(x, 2); }),
              random_tensor({2, 4, 4}, rng)) < tol);
    CHECK(grad_check<double>(
              through([&](const Var<double>& x) {
                return add_chan_bias(x, Var<double>::constant(chan_b));
              }),
              random_tensor({2, 3, 3}, rng)) < tol);
  }
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> x = random_tensor({5, 9}, rng, 15.0);
    auto y = softmax_last(Var<double>::constant(x));
    for (int64_t r = 0; r < 5; ++r) {
      double s = 0;
      for (int64_t j = 0; j < 9; ++j) {
        double v = y.value()[r * 9 + j];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("layer norm output has zero mean and unit variance before affine") {
  Rng rng(7);
  Tensor<double> x = random_tensor({8, 32}, rng, 3.0);
  Tensor<double> gamma = Tensor<double>::full({32}, 1.0);
  Tensor<double> beta({32});
  auto y = layer_norm_last(Var<double>::constant(x), Var<double>::constant(gamma),
                           Var<double>::constant(beta));
  for (int64_t r = 0; r < 8; ++r) {
    double mean = 0, var = 0;
    for (int64_t j = 0; j < 32; ++j) mean += y.value()[r * 32 + j];
    mean /= 32;
    for (int64_t j = 0; j < 32; ++j) {
      double c = y.value()[r * 32 + j] - mean;
      var += c * c;
    }
    var /= 32;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("reshape and permute round-trips are bit-identical") {
  Rng rng(8);
  Tensor<double> x = random_tensor({3, 4, 5}, rng);
  auto v = Var<double>::constant(x);
  auto r = reshape(reshape(v, {12, 5}), {3, 4, 5});
  auto p = permute(permute(v, {2, 0, 1}), {1, 2, 0});
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(r.value()[i] == x[i]);
    CHECK(p.value()[i] == x[i]);
  }
}

TEST_CASE("shape mismatches raise structured errors naming the op") {
  auto a = Var<double>::constant(Tensor<double>({2, 3}));
  auto b = Var<double>::constant(Tensor<double>({4, 5}));
  CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: shape (2,3) vs (4,5)", ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("backward rejects non-scalar losses and double invocation") {
  Var<double> x = Var<double>::leaf(Tensor<double>({2}, {1, 2}), true);
  auto y = square(x);
  CHECK_THROWS_AS(backward(y), ValueError);
  auto loss = sum_all(square(x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ValueError);
  // without a recorded graph there is nothing to differentiate
  auto c = sum_all(Var<double>::constant(Tensor<double>({2}, {1, 2})));
  CHECK_THROWS_AS(backward(c), ValueError);
}

TEST_CASE("gradients accumulate additively across fan-out") {
  Var<double> x = Var<double>::leaf(Tensor<double>({2}, {3, -1}), true);
  auto y = add(x, x);
  backward(sum_all(y));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("dropout scales kept entries and masks gradients identically") {
  Rng rng(9);
  Var<double> x = Var<double>::leaf(Tensor<double>::full({1000}, 1.0), true);
  auto y = dropout(x, 0.4, rng, true);
  double sum = 0;
  int64_t kept = 0;
  for (int64_t i = 0; i < 1000; ++i) {
    const double v = y.value()[i];
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.6)));
    if (v != 0.0) ++kept;
    sum += v;
  }
  CHECK(kept > 500);
  CHECK(kept < 700);
  backward(sum_all(y));
  for (int64_t i = 0; i < 1000; ++i) CHECK(x.grad()[i] == y.value()[i]);
  // eval mode passes through untouched
  auto z = dropout(x, 0.4, rng, false);
  CHECK(z.value()[0] == 1.0);
}

TEST_CASE("detach blocks the gradient path") {
  Var<double> x = Var<double>::leaf(Tensor<double>({2}, {1, 2}), true);
  auto y = mul(detach(square(x)), x);
  backward(sum_all(y));
  // d/dx of stop(x^2) * x is x^2, not 3x^2
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("grad_check rejects non-finite functions and bad eps") {
  Tensor<double> x({1}, {2.0});
  auto f = [](const Var<double>& v) {
    return scale(sum_all(v), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check<double>(f, x), ValueError);
  auto ok = [](const Var<double>& v) { return sum_all(v); };
  CHECK_THROWS_AS(grad_check<double>(ok, x, 0.0), ValueError);
}
