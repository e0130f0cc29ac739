#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "hm/dataio.hpp"
#include "hm/features.hpp"
#include "hm/rng.hpp"
#include "hm/training.hpp"

using namespace hm;
using namespace hm::training;
using L = ClassLabel;

namespace {

features::FeatureMap random_map(std::size_t mels, std::size_t frames, std::uint64_t seed, float shift = 0) {
  CounterRng rng(seed);
  features::FeatureMap f{mels, frames, std::vector<float>(mels * frames)};
  for (auto& v : f.values) v = static_cast<float>(rng.normal()) + shift;
  return f;
}

model::ModelConfig small() {
  model::ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.head_dim = 4;
  c.model_dim = 8;
  c.conv_kernel = 3;
  c.n_mels = 16;
  c.subsample_channels = 2;
  c.rel_clip = 4;
  return c;
}

ad::Tensor logits_tensor(const std::vector<Logits>& z) {
  std::vector<ad::Real> v;
  for (const auto& r : z) {
    for (double x : r) v.push_back(static_cast<ad::Real>(x));
  }
  return ad::Tensor::from({z.size(), 3}, v, true);
}

}  // namespace

TEST_CASE("weighted CE examples") {
  const std::array<double, 3> w{1, 5, 3};
  CHECK(weighted_ce_value(std::vector<Logits>{{0, 1e6, 0}}, std::vector{L::Present}, w) == doctest::Approx(0.0));
  CHECK(weighted_ce_value(std::vector<Logits>{{0, 0, 0}}, std::vector{L::Unknown}, w) ==
        doctest::Approx(std::log(3.0)));
  CHECK(weighted_ce_value(std::vector<Logits>{{0, 0, 0}, {0, 0, 0}}, std::vector{L::Present, L::Absent}, w) ==
        doctest::Approx((5 * std::log(3.0) + std::log(3.0)) / 6));
  const auto t = weighted_ce(logits_tensor({{0, 0, 0}, {0, 0, 0}}), std::vector{L::Present, L::Absent}, w);
  CHECK(t.item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));
}

TEST_CASE("weighted CE matches a direct evaluation on random logits") {
  CounterRng rng(1);
  const std::array<double, 3> w{1, 5, 3};
  std::vector<Logits> z;
  std::vector<L> y;
  double num = 0, den = 0;
  for (int i = 0; i < 20; ++i) {
    const Logits l{rng.normal(), rng.normal(), rng.normal()};
    const L c = label_from_index(static_cast<int>(rng.uniform_int(3)));
    z.push_back(l);
    y.push_back(c);
    const double lse = std::log(std::exp(l[0]) + std::exp(l[1]) + std::exp(l[2]));
    num += w[to_index(c)] * (lse - l[to_index(c)]);
    den += w[to_index(c)];
  }
  CHECK(weighted_ce_value(z, y, w) == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(weighted_ce(logits_tensor(z), y, w).item() == doctest::Approx(num / den).epsilon(1e-5));
}

TEST_CASE("present sample gets five times the gradient of an identical absent sample") {
  // two rows with the same logits, each scored against its own class
  const auto z = logits_tensor({{0.3, -0.2, 0.1}, {-0.2, 0.3, 0.1}});
  const auto loss = weighted_ce(z, std::vector{L::Absent, L::Present}, {1, 5, 3});
  loss.backward();
  const auto g = z.grad();
  double n0 = 0, n1 = 0;
  for (int k = 0; k < 3; ++k) {
    n0 += std::abs(g[k]);
    n1 += std::abs(g[3 + k]);
  }
  CHECK(n1 / n0 == doctest::Approx(5.0).epsilon(1e-5));
}

TEST_CASE("plateau scheduler halves only after patience epochs without a strict new best") {
  PlateauScheduler s(1.0, 2, 0.5);
  CHECK(s.observe(3.0));
  CHECK(s.observe(2.0));
  CHECK_FALSE(s.observe(2.0));
  CHECK(s.lr() == 1.0);
  CHECK_FALSE(s.observe(2.5));
  CHECK(s.lr() == 0.5);
  CHECK_FALSE(s.observe(2.1));
  CHECK(s.lr() == 0.5);
  CHECK(s.observe(1.9));
  CHECK(s.lr() == 0.5);

  PlateauScheduler d(1e-4, 5, 0.5);
  for (int e = 0; e < 30; ++e) CHECK(d.observe(10.0 - e));
  CHECK(d.lr() == 1e-4);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_factor = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.class_weights = {1, 0, 3};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("one small step lowers the loss of a frozen batch") {
  model::Model m(small(), 1);
  std::vector<features::FeatureMap> x;
  std::vector<L> y;
  for (std::uint64_t i = 0; i < 6; ++i) {
    x.push_back(random_map(16, 21, i));
    y.push_back(label_from_index(static_cast<int>(i % 3)));
  }
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(true);
  const auto batch = model::to_batch(x);
  const auto before = weighted_ce(m.forward(batch, model::RunMode::eval()), y, {1, 5, 3});
  before.backward();
  Adam opt(0.9, 0.999, 1e-8, 1e-5);
  opt.step(m.parameters(), 1e-6);
  ad::NoGradGuard ng;
  const auto after = weighted_ce(m.forward(batch, model::RunMode::eval()), y, {1, 5, 3});
  CHECK(after.item() < before.item());
}

TEST_CASE("Adam applies decoupled decay to a zero-gradient parameter") {
  std::vector<ad::Parameter> ps{{"w", ad::Tensor::from({2}, {1.0, -2.0}, true)}};
  ps[0].tensor.zero_grad();
  Adam opt(0.9, 0.999, 1e-8, 0.1);
  opt.step(ps, 0.5);
  CHECK(ps[0].tensor.data()[0] == doctest::Approx(1.0 * (1 - 0.5 * 0.1)));
  CHECK(ps[0].tensor.data()[1] == doctest::Approx(-2.0 * (1 - 0.5 * 0.1)));
}

TEST_CASE("training is deterministic and the log follows its invariants") {
  std::vector<features::FeatureMap> tx, vx;
  std::vector<L> ty, vy;
  for (std::uint64_t i = 0; i < 18; ++i) {
    const L c = label_from_index(static_cast<int>(i % 3));
    tx.push_back(random_map(16, 21, 100 + i, static_cast<float>(to_index(c))));
    ty.push_back(c);
  }
  for (std::uint64_t i = 0; i < 6; ++i) {
    const L c = label_from_index(static_cast<int>(i % 3));
    vx.push_back(random_map(16, 21, 200 + i, static_cast<float>(to_index(c))));
    vy.push_back(c);
  }
  TrainConfig cfg;
  cfg.batch = 4;
  cfg.epochs = 8;
  cfg.lr0 = 3e-3;
  cfg.plateau_patience = 2;
  const auto a = train(model::Model(small(), 3), {tx, ty}, {vx, vy}, cfg);
  const auto b = train(model::Model(small(), 3), {tx, ty}, {vx, vy}, cfg);
  REQUIRE(a.log.size() == 8);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(to_json_line(a.log[i]) == to_json_line(b.log[i]));
  CHECK(a.steps == 8 * 5);

  double best = 1e300, best_logged = 0;
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    const auto& e = a.log[i];
    CHECK(e.is_best == (e.val_loss < best));
    if (e.val_loss < best) {
      best = e.val_loss;
      best_logged = e.val_loss;
    }
    if (i > 0) CHECK(e.lr <= a.log[i - 1].lr);
  }
  const std::array<double, 3> w{1, 5, 3};
  CHECK(evaluate_loss(a.best, {vx, vy}, w, 4) == doctest::Approx(best_logged).epsilon(1e-6));

  const auto j = nlohmann::json::parse(to_json_line(a.log[0]));
  CHECK(j.contains("epoch"));
  CHECK(j.contains("train_loss"));
  CHECK(j.contains("val_loss"));
  CHECK(j.contains("lr"));
  CHECK(j.contains("is_best"));
}

TEST_CASE("empty splits are rejected") {
  std::vector<features::FeatureMap> x{random_map(16, 21, 1)};
  std::vector<L> y{L::Absent};
  CHECK_THROWS_AS(train(model::Model(small(), 1), {{}, {}}, {x, y}, TrainConfig{}), Error);
  CHECK_THROWS_AS(train(model::Model(small(), 1), {x, y}, {{}, {}}, TrainConfig{}), Error);
}

TEST_CASE("step cap stops training") {
  std::vector<features::FeatureMap> x;
  std::vector<L> y;
  for (std::uint64_t i = 0; i < 8; ++i) {
    x.push_back(random_map(16, 21, 300 + i));
    y.push_back(label_from_index(static_cast<int>(i % 3)));
  }
  TrainConfig cfg;
  cfg.batch = 2;
  cfg.max_steps = 5;
  const auto r = train(model::Model(small(), 1), {x, y}, {x, y}, cfg);
  CHECK(r.steps == 5);
}

TEST_CASE("overfits 32 synthetic segments within 300 steps") {
  dataio::SynthConfig sc;
  sc.n_patients = 12;
  const auto recs = dataio::synth_recordings(sc);
  const features::MelSpectrogram mel;
  std::vector<features::FeatureMap> x;
  std::vector<L> y;
  for (const auto& r : recs) {
    for (const auto& s : features::segment(r.audio)) {
      if (x.size() == 32) break;
      x.push_back(mel.compute(s));
      y.push_back(r.meta.label);
    }
  }
  REQUIRE(x.size() == 32);
  TrainConfig cfg;
  cfg.lr0 = 1e-3;
  cfg.batch = 8;
  cfg.epochs = 75;
  cfg.max_steps = 300;
  double acc = 0.0;
  std::size_t steps_at_full = 0;
  const auto res = train(model::Model(model::ModelConfig::desk(), 1), {x, y}, {x, y}, cfg,
                         [&](const TrainLogEntry& e, const model::Model& m) {
                           if (steps_at_full == 0 && evaluate_accuracy(m, {x, y}, 32) == 1.0) steps_at_full = e.steps;
                         });
  acc = evaluate_accuracy(res.best, {x, y}, 32);
  CHECK(acc == 1.0);
  CHECK(steps_at_full > 0);
  CHECK(steps_at_full <= 300);
}
