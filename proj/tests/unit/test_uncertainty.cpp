#include <doctest.h>

#include <cmath>
#include <numbers>

#include "hm/model.hpp"
#include "hm/rng.hpp"
#include "hm/uncertainty.hpp"

using namespace hm;
using namespace hm::uncertainty;

namespace {

features::FeatureMap random_map(std::size_t mels, std::size_t frames, std::uint64_t seed) {
  CounterRng rng(seed);
  features::FeatureMap f{mels, frames, std::vector<float>(mels * frames)};
  for (auto& v : f.values) v = static_cast<float>(rng.normal());
  return f;
}

model::ModelConfig tiny(double p) {
  model::ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.head_dim = 4;
  c.model_dim = 8;
  c.conv_kernel = 3;
  c.n_mels = 8;
  c.subsample_channels = 2;
  c.rel_clip = 4;
  c.dropout_p = p;
  return c;
}

}  // namespace

TEST_CASE("entropy examples") {
  CHECK(entropy({1, 0, 0}) == 0.0);
  CHECK(entropy({1.0 / 3, 1.0 / 3, 1.0 / 3}) == doctest::Approx(std::log(3.0)));
  CHECK(entropy({0.5, 0.25, 0.25}) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(4.0)));
  CHECK(entropy({0.5, 0.25, 0.25}) == doctest::Approx(1.0397).epsilon(1e-4));
  CHECK(normalized_entropy({1.0 / 3, 1.0 / 3, 1.0 / 3}) == doctest::Approx(1.0));
}

TEST_CASE("entropy is permutation invariant and peaks at uniform") {
  CounterRng rng(11);
  for (int t = 0; t < 200; ++t) {
    double a = rng.uniform() + 1e-3, b = rng.uniform() + 1e-3, c = rng.uniform() + 1e-3;
    const double s = a + b + c;
    const ProbVector p{a / s, b / s, c / s};
    CHECK(entropy(p) == doctest::Approx(entropy({p[2], p[0], p[1]})));
    CHECK(entropy(p) <= std::log(3.0) + 1e-12);
  }
}

TEST_CASE("softmax of (2,1,0)") {
  const auto p = softmax({2, 1, 0});
  CHECK(p[0] == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(p[2] == doctest::Approx(0.0900).epsilon(1e-3));
}

TEST_CASE("two hand-fixed passes average row-wise") {
  const std::vector<ProbVector> rows{{0.9, 0.05, 0.05}, {0.5, 0.3, 0.2}};
  const auto r = summarize_probs(rows, true);
  CHECK(r.mean[0] == doctest::Approx(0.7));
  CHECK(r.mean[1] == doctest::Approx(0.175));
  CHECK(r.mean[2] == doctest::Approx(0.125));
  CHECK(r.n_passes == 2);
  CHECK(r.per_pass.size() == 2);
  CHECK(r.entropy == doctest::Approx(entropy(r.mean)));
  CHECK(summarize_probs(rows).per_pass.empty());
}

TEST_CASE("zero dropout: every pass equals eval mode") {
  const model::Model m(tiny(0.0), 3);
  const auto f = random_map(8, 21, 5);
  const auto eval = m.predict_logits(std::span(&f, 1), model::RunMode::eval())[0];
  const auto r = mc_predict(m, f, 30, 9, true);
  CHECK(r.n_passes == 30);
  const auto ref = softmax(eval);
  for (const auto& p : r.per_pass) {
    for (std::size_t k = 0; k < 3; ++k) CHECK(p[k] == ref[k]);
  }
  for (std::size_t k = 0; k < 3; ++k) CHECK(r.mean[k] == doctest::Approx(ref[k]).epsilon(1e-12));
}

TEST_CASE("fixed seed reproduces the result; another seed changes passes") {
  const model::Model m(tiny(0.3), 3);
  const auto f = random_map(8, 21, 6);
  const auto a = mc_predict(m, f, 10, 42, true);
  const auto b = mc_predict(m, f, 10, 42, true);
  CHECK(a == b);
  const auto c = mc_predict(m, f, 10, 43, true);
  bool differs = false;
  for (std::size_t i = 0; i < 10; ++i) differs = differs || c.per_pass[i] != a.per_pass[i];
  CHECK(differs);
}

TEST_CASE("MC results lie on the simplex and do not depend on thread count") {
  const model::Model m(tiny(0.3), 4);
  std::vector<features::FeatureMap> maps;
  for (std::uint64_t i = 0; i < 5; ++i) maps.push_back(random_map(8, 21, 100 + i));
  const auto one = mc_logits(m, maps, 7, 1, 2, 1);
  const auto many = mc_logits(m, maps, 7, 1, 2, 3);
  CHECK(one == many);
  for (const auto& seg : one) {
    const auto r = summarize(seg);
    CHECK(r.mean[0] + r.mean[1] + r.mean[2] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.entropy >= 0.0);
    CHECK(r.entropy <= std::log(3.0) + 1e-12);
  }
}

TEST_CASE("batch composition does not change a segment's MC logits") {
  const model::Model m(tiny(0.3), 4);
  std::vector<features::FeatureMap> maps;
  for (std::uint64_t i = 0; i < 4; ++i) maps.push_back(random_map(8, 21, 200 + i));
  const auto b1 = mc_logits(m, maps, 3, 5, 1);
  const auto b4 = mc_logits(m, maps, 3, 5, 4);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t k = 0; k < 3; ++k) CHECK(b1[i][p][k] == doctest::Approx(b4[i][p][k]).epsilon(1e-5));
    }
  }
}
