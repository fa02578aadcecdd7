#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clear/rng.hpp"
#include "clear/tensor.hpp"
#include "gradcheck.hpp"

using namespace clear;

namespace {

Tensor vec(std::initializer_list<double> v) { return Tensor::from_vector(std::vector<double>(v)); }

void reset_tape() { Tape::active().reset(); }

}  // namespace

TEST_CASE("elementwise closed forms") {
  CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(silu(Tensor::scalar(1.0)).item() == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(relu(Tensor::scalar(-2.0)).item() == 0.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(exp(Tensor::scalar(1.0)).item() == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("binary op shape contract") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3x2]"), std::invalid_argument);
  // scalar broadcast is the one exception
  Tensor c = add(a, Tensor::scalar(2.0));
  for (double v : c.data()) CHECK(v == 2.0);
}

TEST_CASE("log domain error") {
  CHECK_THROWS_AS(log(Tensor::scalar(0.0)), std::domain_error);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), std::domain_error);
}

TEST_CASE("matmul closed forms") {
  Tensor eye = Tensor({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  CHECK(r.data() == m.data());

  Tensor a = Tensor({1, 2}, {1, 2});
  Tensor b = Tensor({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("softmax closed forms and invariants") {
  reset_tape();
  Tensor s = softmax(vec({0.0, 0.0}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor t = softmax(vec({std::log(2.0), 0.0}), 0);
  CHECK(t.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(t.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  // shift invariance
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    auto x = gradcheck::random_tensor(rng, {9}, -3, 3, false);
    const double c = rep % 2 ? 2.5 : -4.0;
    Tensor y0 = softmax(x, 0);
    Tensor y1 = softmax(x + c, 0);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(y0.data()[i] - y1.data()[i]) < 1e-12);
  }

  // extreme magnitudes: sums stay at 1
  for (double mag : {700.0, -700.0, 350.0}) {
    std::vector<double> d;
    Rng r2(11);
    for (int i = 0; i < 64; ++i) d.push_back(r2.uniform(-1.0, 1.0) * std::abs(mag) + mag * 0.5);
    Tensor y = softmax(Tensor::from_vector(d), 0);
    double acc = 0.0;
    for (double v : y.data()) {
      CHECK(v >= 0.0);
      acc += v;
    }
    CHECK(std::abs(acc - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(softmax(vec({1.0}), 1), std::invalid_argument);

  // rank-2 along both axes
  Tensor m = Tensor({2, 3}, {1, 2, 3, 0, 0, 0});
  Tensor rows = softmax(m, 1);
  CHECK(std::abs(rows.data()[0] + rows.data()[1] + rows.data()[2] - 1.0) < 1e-12);
  Tensor cols = softmax(m, 0);
  CHECK(std::abs(cols.data()[0] + cols.data()[3] - 1.0) < 1e-12);
}

TEST_CASE("cosine similarity") {
  Tensor x = vec({3.0, -1.0, 2.0});
  CHECK(cosine_similarity(x, x).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cosine_similarity(vec({1, 0}), vec({0, 1})).item() == 0.0);
  CHECK(cosine_similarity(vec({1, 1}), vec({1, 0})).item() ==
        doctest::Approx(0.7071067811865475).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_similarity(vec({0, 0}), vec({1, 0})), std::domain_error);
  // bounded even under scale extremes
  Tensor big = vec({1e150, 1e150});
  CHECK(cosine_similarity(big, big).item() <= 1.0);
}

TEST_CASE("backward basics") {
  reset_tape();
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tensor y = mul(x, x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));

  CHECK_THROWS_AS(backward(y), std::logic_error);  // no reset between calls
  Tape::active().reset();

  Tensor v = Tensor::from_vector({1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(v), std::invalid_argument);  // non-scalar loss
  Tape::active().reset();
}

TEST_CASE("shared subexpressions accumulate") {
  reset_tape();
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  // x used twice: d/dx (x*x + x) = 2x + 1 = 5
  Tensor loss = add(mul(x, x), x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-14));
  Tape::active().reset();
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
  Rng rng(23);
  for (int rep = 0; rep < 100; ++rep) {
    auto logits = gradcheck::random_tensor(rng, {6}, -2, 2);
    const int target = static_cast<int>(rng.below(6));
    auto res = gradcheck::check(
        [&]() { return logsumexp(logits) - at(logits, target); }, {logits});
    CHECK(res.max_err < 1e-6);
  }
}

TEST_CASE("finite differences across the op set") {
  Rng rng(42);

  SUBCASE("unary ops") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {5}, 0.2, 2.0);  // positive: also valid for log/sqrt
      auto probe = gradcheck::random_tensor(rng, {5}, -1, 1, false);
      for (auto f : {+[](const Tensor& t) { return exp(t); }, +[](const Tensor& t) { return log(t); },
                     +[](const Tensor& t) { return tanh(t); }, +[](const Tensor& t) { return sigmoid(t); },
                     +[](const Tensor& t) { return silu(t); }, +[](const Tensor& t) { return sqrt(t); },
                     +[](const Tensor& t) { return softplus(t); }, +[](const Tensor& t) { return neg(t); }}) {
        auto res = gradcheck::check([&]() { return sum(mul(f(x), probe)); }, {x});
        CHECK(res.max_err < 1e-6);
      }
    }
  }

  SUBCASE("relu away from the kink") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {6}, 0.1, 1.0);
      for (size_t i = 0; i < 3; ++i) x.mutable_data()[i] *= -1.0;
      auto res = gradcheck::check([&]() { return sum(relu(x)); }, {x});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("binary ops with and without scalar broadcast") {
    for (int rep = 0; rep < 100; ++rep) {
      auto a = gradcheck::random_tensor(rng, {4}, -2, 2);
      auto b = gradcheck::random_tensor(rng, {4}, 0.5, 2.0);
      auto s = gradcheck::random_tensor(rng, {1}, 0.5, 1.5);
      auto res = gradcheck::check([&]() { return sum(div(mul(add(a, b), sub(a, b)), b)); }, {a, b});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check([&]() { return sum(mul(a, s) + div(b, s)); }, {a, b, s});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("matmul: gradient of sum(A*B)") {
    for (int rep = 0; rep < 100; ++rep) {
      auto a = gradcheck::random_tensor(rng, {3, 4});
      auto b = gradcheck::random_tensor(rng, {4, 2});
      auto res = gradcheck::check([&]() { return sum(matmul(a, b)); }, {a, b});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("softmax / logsumexp / structure ops") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {3, 4}, -2, 2);
      auto w = gradcheck::random_tensor(rng, {3, 4}, -1, 1, false);
      auto res = gradcheck::check([&]() { return sum(mul(softmax(x, 1), w)); }, {x});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check([&]() { return sum(mul(softmax(x, 0), w)); }, {x});
      CHECK(res.max_err < 1e-6);

      auto v = gradcheck::random_tensor(rng, {7}, -2, 2);
      res = gradcheck::check([&]() { return logsumexp(v); }, {v});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check([&]() { return at(v, 3) + sum(row(x, 1)); }, {v, x});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("row/col broadcast ops and layer_norm_rows") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {3, 5}, -2, 2);
      auto v = gradcheck::random_tensor(rng, {5}, -1, 1);
      auto s = gradcheck::random_tensor(rng, {3}, 0.5, 1.5);
      auto probe = gradcheck::random_tensor(rng, {3, 5}, -1, 1, false);
      auto res = gradcheck::check(
          [&]() { return sum(mul(add_rowvec(mul_rowvec(x, v), v), probe)); }, {x, v});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check(
          [&]() { return sum(mul(shift_rows(scale_rows(x, s), s), probe)); }, {x, s});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check([&]() { return sum(mul(layer_norm_rows(x, 1e-5), probe)); }, {x});
      CHECK(res.max_err < 1e-5);
    }
  }

  SUBCASE("stack/transpose/reshape/mean/sum_rows") {
    for (int rep = 0; rep < 100; ++rep) {
      auto a = gradcheck::random_tensor(rng, {4});
      auto b = gradcheck::random_tensor(rng, {4});
      auto probe = gradcheck::random_tensor(rng, {2, 4}, -1, 1, false);
      auto res = gradcheck::check([&]() { return sum(mul(stack_rows({a, b}), probe)); }, {a, b});
      CHECK(res.max_err < 1e-6);
      auto m = gradcheck::random_tensor(rng, {2, 3});
      auto rows_probe = gradcheck::random_tensor(rng, {2}, -1, 1, false);
      res = gradcheck::check([&]() { return mean(transpose(m)) + sum(mul(sum_rows(m), rows_probe)); }, {m});
      CHECK(res.max_err < 1e-6);
      res = gradcheck::check([&]() { return sum(reshape(m, {3, 2})); }, {m});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("cosine similarity gradient both sides") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {6}, 0.2, 1.5);
      auto y = gradcheck::random_tensor(rng, {6}, -1.5, -0.2);
      auto res = gradcheck::check([&]() { return cosine_similarity(x, y); }, {x, y});
      CHECK(res.max_err < 1e-6);
    }
  }

  SUBCASE("conv2d and extract_patches") {
    for (int rep = 0; rep < 100; ++rep) {
      auto x = gradcheck::random_tensor(rng, {2, 5, 5});
      auto w = gradcheck::random_tensor(rng, {3, 2, 3, 3});
      auto b = gradcheck::random_tensor(rng, {3});
      const int stride = rep % 2 ? 2 : 1;
      auto probeShape = stride == 1 ? Shape{3, 5, 5} : Shape{3, 3, 3};
      auto probe = gradcheck::random_tensor(rng, probeShape, -1, 1, false);
      auto res = gradcheck::check([&]() { return sum(mul(conv2d(x, w, b, stride), probe)); }, {x, w, b});
      CHECK(res.max_err < 1e-6);

      auto img = gradcheck::random_tensor(rng, {4, 4});
      auto probe2 = gradcheck::random_tensor(rng, {4, 4}, -1, 1, false);
      res = gradcheck::check([&]() { return sum(mul(extract_patches(img, 2), probe2)); }, {img});
      CHECK(res.max_err < 1e-6);
    }
  }
}

TEST_CASE("conv2d shape contracts") {
  Tensor x = Tensor::zeros({1, 8, 8});
  Tensor w = Tensor::zeros({4, 1, 3, 3});
  Tensor b = Tensor::zeros({4});
  Tensor y = conv2d(x, w, b, 1);
  CHECK(y.shape() == Shape{4, 8, 8});
  Tensor y2 = conv2d(x, w, b, 2);
  CHECK(y2.shape() == Shape{4, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({4, 2, 3, 3}), b, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({4, 1, 2, 2}), b, 1), std::invalid_argument);
}

TEST_CASE("extract_patches layout") {
  // 4x4 image, patch 2: token 1 is the top-right patch, row-major within patch
  std::vector<double> img(16);
  for (int i = 0; i < 16; ++i) img[i] = i;
  Tensor t = extract_patches(Tensor({4, 4}, img), 2);
  CHECK(t.shape() == Shape{4, 4});
  CHECK(t.data()[4] == 2.0);
  CHECK(t.data()[5] == 3.0);
  CHECK(t.data()[6] == 6.0);
  CHECK(t.data()[7] == 7.0);
}

TEST_CASE("detach cuts gradient flow") {
  Tape::active().reset();
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  Tensor d = mul(x, x).detach();
  CHECK_FALSE(d.requires_grad());
  Tensor loss = mul(x, Tensor::scalar(3.0));
  backward(loss);
  CHECK(x.grad()[0] == 3.0);
  Tape::active().reset();
}
