#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hm/autodiff.hpp"
#include "hm/model.hpp"
#include "hm/rng.hpp"
#include "hm/training.hpp"

using namespace hm;
using namespace hm::ad;

static_assert(sizeof(Real) == 8, "gradient checks need the double build");

namespace {

constexpr double kTol = 1e-5;
constexpr double kH = 1e-6;

Parameter param(const char* name, Shape s, std::uint64_t seed, double scale_by = 1.0) {
  CounterRng rng(seed);
  std::vector<Real> v(numel(s));
  for (auto& x : v) x = rng.normal() * scale_by;
  return {name, Tensor::from(std::move(s), std::move(v), true)};
}

/// Weighted sum against fixed random coefficients, so every output element
/// gets a distinct upstream gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<Real> w(y.size());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

double check(std::vector<Parameter>& ps, const std::function<Tensor()>& f, std::size_t coords = 40) {
  return grad_check(f, ps, kH, coords, 17);
}

}  // namespace

TEST_CASE("sum of squares") {
  std::vector<Parameter> ps{param("x", {7}, 1)};
  CHECK(check(ps, [&] { return sum(mul(ps[0].tensor, ps[0].tensor)); }) < 1e-8);
}

TEST_CASE("elementwise and broadcast operators") {
  std::vector<Parameter> ps{param("a", {2, 3, 4}, 2), param("b", {4}, 3), param("c", {3, 4}, 4)};
  CHECK(check(ps, [&] { return probe(add(ps[0].tensor, ps[1].tensor), 9); }) < kTol);
  CHECK(check(ps, [&] { return probe(sub(ps[0].tensor, ps[2].tensor), 9); }) < kTol);
  CHECK(check(ps, [&] { return probe(mul(ps[0].tensor, ps[2].tensor), 9); }) < kTol);
  CHECK(check(ps, [&] { return probe(scale(ps[0].tensor, -1.7), 9); }) < kTol);
  CHECK(check(ps, [&] { return probe(gelu(ps[0].tensor), 9); }) < kTol);
}

TEST_CASE("matmul and linear") {
  std::vector<Parameter> ps{param("a", {2, 3, 4}, 5), param("b", {4, 5}, 6), param("c", {2, 4, 5}, 7),
                            param("bias", {5}, 8)};
  CHECK(check(ps, [&] { return probe(matmul(ps[0].tensor, ps[1].tensor), 10); }) < kTol);
  CHECK(check(ps, [&] { return probe(matmul(ps[0].tensor, ps[2].tensor), 10); }) < kTol);
  CHECK(check(ps, [&] { return probe(linear(ps[0].tensor, ps[1].tensor, ps[3].tensor), 10); }) < kTol);
}

TEST_CASE("shape operators") {
  std::vector<Parameter> ps{param("a", {2, 3, 4}, 11), param("b", {2, 3, 5}, 12)};
  CHECK(check(ps, [&] { return probe(transpose_last2(ps[0].tensor), 13); }) < kTol);
  CHECK(check(ps, [&] { return probe(permute(ps[0].tensor, {2, 0, 1}), 13); }) < kTol);
  CHECK(check(ps, [&] { return probe(reshape(ps[0].tensor, {6, 4}), 13); }) < kTol);
  CHECK(check(ps, [&] { return probe(concat_last(ps[0].tensor, ps[1].tensor), 13); }) < kTol);
  CHECK(check(ps, [&] { return probe(slice_last(ps[1].tensor, 1, 3), 13); }) < kTol);
  CHECK(check(ps, [&] { return probe(mean_axis(ps[0].tensor, 1), 13); }) < kTol);
}

TEST_CASE("softmax and layer norm") {
  std::vector<Parameter> ps{param("x", {3, 6}, 14), param("g", {6}, 15), param("b", {6}, 16)};
  CHECK(check(ps, [&] { return probe(softmax_last(ps[0].tensor), 17); }) < kTol);
  CHECK(check(ps, [&] { return probe(layer_norm(ps[0].tensor, ps[1].tensor, ps[2].tensor), 17); }) < kTol);
}

TEST_CASE("convolutions") {
  std::vector<Parameter> ps{param("x", {2, 7, 3}, 18), param("w", {3, 5}, 19), param("b", {3}, 20),
                            param("img", {2, 2, 7, 6}, 21), param("k", {3, 2, 3, 3}, 22), param("kb", {3}, 23)};
  CHECK(check(ps, [&] { return probe(depthwise_conv1d(ps[0].tensor, ps[1].tensor, ps[2].tensor), 24); }) < kTol);
  CHECK(check(ps, [&] { return probe(conv2d(ps[3].tensor, ps[4].tensor, ps[5].tensor, 2, 0), 24); }) < kTol);
  CHECK(check(ps, [&] { return probe(conv2d(ps[3].tensor, ps[4].tensor, ps[5].tensor, 1, 1), 24); }) < kTol);
}

TEST_CASE("relative position bias") {
  std::vector<Parameter> ps{param("t", {2, 7}, 25)};
  CHECK(check(ps, [&] { return probe(relative_position_bias(ps[0].tensor, 6, 3), 26); }) < kTol);
}

TEST_CASE("dropout with a fixed mask") {
  std::vector<Parameter> ps{param("x", {3, 10}, 27)};
  const std::vector<std::uint64_t> keys{4, 5, 6};
  CHECK(check(ps, [&] { return probe(dropout(ps[0].tensor, 0.3, keys), 28); }) < kTol);
}

TEST_CASE("weighted cross entropy") {
  std::vector<Parameter> ps{param("z", {5, 3}, 29)};
  const std::vector<ClassLabel> y{ClassLabel::Absent, ClassLabel::Present, ClassLabel::Unknown, ClassLabel::Present,
                                  ClassLabel::Absent};
  CHECK(check(ps, [&] { return training::weighted_ce(ps[0].tensor, y, {1, 5, 3}); }) < kTol);
}

TEST_CASE("full model loss in train mode") {
  model::ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 3;
  c.model_dim = 6;
  c.conv_kernel = 3;
  c.n_mels = 12;
  c.subsample_channels = 2;
  c.rel_clip = 3;
  model::Model m(c, 5);
  CounterRng rng(30);
  std::vector<Real> x(2 * 12 * 21);
  for (auto& v : x) v = rng.normal();
  const auto feats = Tensor::from({2, 12, 21}, x);
  const std::vector<ClassLabel> y{ClassLabel::Present, ClassLabel::Unknown};
  const auto mode = model::RunMode::train({101, 202}, 3);
  const double err = grad_check(
      [&] { return training::weighted_ce(m.forward(feats, mode), y, {1, 5, 3}); }, m.parameters(), kH, 20, 31);
  CHECK(err < 1e-4);
}
