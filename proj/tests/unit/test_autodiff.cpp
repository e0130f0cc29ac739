#include <doctest.h>

#include <cmath>
#include <numeric>

#include "hm/autodiff.hpp"
#include "hm/rng.hpp"

using namespace hm;
using namespace hm::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, bool grad = false) {
  CounterRng rng(seed);
  std::vector<Real> v(numel(s));
  for (auto& x : v) x = static_cast<Real>(rng.normal());
  return Tensor::from(std::move(s), std::move(v), grad);
}

}  // namespace

TEST_CASE("softmax rows sum to one and ignore a constant shift") {
  const auto x = random_tensor({4, 5}, 1);
  std::vector<Real> shifted(x.data().begin(), x.data().end());
  for (auto& v : shifted) v += 7;
  const auto a = softmax_last(x);
  const auto b = softmax_last(Tensor::from({4, 5}, shifted));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      s += a.data()[r * 5 + c];
      CHECK(a.data()[r * 5 + c] == doctest::Approx(b.data()[r * 5 + c]).epsilon(1e-5));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm of a constant row is beta") {
  const auto x = Tensor::full({2, 6}, 3.5);
  const auto g = random_tensor({6}, 2);
  const auto b = random_tensor({6}, 3);
  const auto y = layer_norm(x, g, b);
  for (std::size_t i = 0; i < 12; ++i) CHECK(y.data()[i] == doctest::Approx(b.data()[i % 6]).epsilon(1e-5));
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  const auto x = random_tensor({3, 16}, 4);
  const auto y = layer_norm(x, Tensor::full({16}, 1), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.data()[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += std::pow(y.data()[r * 16 + c] - m, 2);
    CHECK(std::abs(m) < 1e-5);
    CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("dropout with p = 0 is the identity and p > 0 is replayable") {
  const auto x = random_tensor({3, 50}, 5);
  const std::vector<std::uint64_t> keys{1, 2, 3};
  const auto y = dropout(x, 0.0, keys);
  CHECK(std::ranges::equal(y.data(), x.data()));
  const auto a = dropout(x, 0.3, keys);
  const auto b = dropout(x, 0.3, keys);
  CHECK(std::ranges::equal(a.data(), b.data()));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] == 0) {
      ++zeros;
    } else {
      CHECK(a.data()[i] == doctest::Approx(x.data()[i] / 0.7).epsilon(1e-5));
    }
  }
  CHECK(zeros > 10);
  CHECK(zeros < 90);
}

TEST_CASE("dropout mask of a row depends only on its own key") {
  const auto x = random_tensor({2, 40}, 6);
  const auto a = dropout(x, 0.5, std::vector<std::uint64_t>{11, 12});
  const auto b = dropout(x, 0.5, std::vector<std::uint64_t>{99, 12});
  for (std::size_t c = 0; c < 40; ++c) CHECK(a.data()[40 + c] == b.data()[40 + c]);
}

TEST_CASE("depthwise convolution keeps the length and matches a direct sum") {
  const auto x = random_tensor({2, 9, 3}, 7);
  const auto w = random_tensor({3, 5}, 8);
  const auto bias = random_tensor({3}, 9);
  const auto y = depthwise_conv1d(x, w, bias);
  REQUIRE(y.shape() == Shape{2, 9, 3});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 9; ++t) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = bias.data()[c];
        for (int k = 0; k < 5; ++k) {
          const int src = static_cast<int>(t) + k - 2;
          if (src < 0 || src >= 9) continue;
          s += w.data()[c * 5 + k] * x.data()[(b * 9 + src) * 3 + c];
        }
        CHECK(y.data()[(b * 9 + t) * 3 + c] == doctest::Approx(s).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("conv2d output size follows the stride formula") {
  const auto x = random_tensor({1, 1, 128, 241}, 10);
  const auto y = conv2d(x, random_tensor({4, 1, 3, 3}, 11), Tensor::zeros({4}), 2, 0);
  CHECK(y.shape() == Shape{1, 4, 63, 120});
}

TEST_CASE("matmul agrees with a triple loop") {
  const auto a = random_tensor({2, 3, 4}, 12);
  const auto b = random_tensor({4, 5}, 13);
  const auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.data()[(n * 3 + i) * 4 + k] * b.data()[k * 5 + j];
        CHECK(c.data()[(n * 3 + i) * 5 + j] == doctest::Approx(s).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("gradients accumulate over two consumers") {
  const auto x = Tensor::from({3}, {1, 2, 3}, true);
  // L = sum(x*x) + sum(3x), dL/dx = 2x + 3
  const auto l = add(sum(mul(x, x)), sum(scale(x, 3)));
  l.backward();
  CHECK(x.grad()[0] == doctest::Approx(5));
  CHECK(x.grad()[1] == doctest::Approx(7));
  CHECK(x.grad()[2] == doctest::Approx(9));
}

TEST_CASE("no-grad guard records no graph") {
  const auto x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = mul(x, x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("shape errors are reported") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5})), ShapeError);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {5}), ShapeError);
}

TEST_CASE("relative bias is Toeplitz with clipping") {
  std::vector<Real> t(2 * 5);
  std::iota(t.begin(), t.end(), Real(0));
  const auto b = relative_position_bias(Tensor::from({2, 5}, t), 6, 2);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        const int d = std::clamp(static_cast<int>(j) - static_cast<int>(i), -2, 2);
        CHECK(b.data()[(h * 6 + i) * 6 + j] == t[h * 5 + static_cast<std::size_t>(d + 2)]);
      }
    }
  }
}
