#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>
#include <numbers>

#include "hm/features.hpp"
#include "hm/rng.hpp"

using namespace hm;
using namespace hm::features;
namespace fs = std::filesystem;

namespace {

dataio::Waveform sine(double hz, double seconds, double amp = 0.5) {
  dataio::Waveform w;
  const auto n = static_cast<std::size_t>(seconds * 4000);
  for (std::size_t i = 0; i < n; ++i) w.samples.push_back(amp * std::sin(2 * std::numbers::pi * hz * i / 4000.0));
  return w;
}

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = 0.2 * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("segmentation of 10 s, 3 s and 2 s recordings") {
  const auto s10 = segment(sine(100, 10));
  REQUIRE(s10.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(s10[i].offset_s == doctest::Approx(2.0 * i));
    CHECK(s10[i].samples.size() == 12000);
  }
  CHECK(s10[1].samples[0] == sine(100, 10).samples[8000]);

  CHECK(segment(sine(100, 3)).size() == 1);

  const auto s2 = segment(sine(100, 2));
  REQUIRE(s2.size() == 1);
  CHECK(s2[0].samples.size() == 12000);
  CHECK(s2[0].samples[7999] != 0.0);
  for (std::size_t i = 8000; i < 12000; ++i) CHECK(s2[0].samples[i] == 0.0);
}

TEST_CASE("segment count follows floor((L - 3) / 2) + 1") {
  for (double L : {3.0, 4.9, 5.0, 6.5, 7.0, 12.3}) {
    CHECK(segment(sine(50, L)).size() == static_cast<std::size_t>(std::floor((L - 3.0) / 2.0)) + 1);
  }
}

TEST_CASE("geometry is 128 x 241") {
  FeatureConfig c;
  CHECK(c.window_samples() == 12000);
  CHECK(c.hop_samples() == 8000);
  CHECK(c.n_frames() == 241);
  const MelSpectrogram mel;
  const auto f = mel.compute(noise(12000, 1));
  CHECK(f.mel_bins == 128);
  CHECK(f.frames == 241);
  CHECK(f.values.size() == 128 * 241);
  for (float v : f.values) CHECK(std::isfinite(v));
}

TEST_CASE("silence maps to log(eps) everywhere") {
  const MelSpectrogram mel;
  const auto f = mel.compute(std::vector<double>(12000, 0.0));
  const float floor = static_cast<float>(std::log(1e-10));
  for (float v : f.values) CHECK(v == floor);
}

TEST_CASE("HTK Mel scale") {
  CHECK(hz_to_mel(0.0) == 0.0);
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
  for (double hz : {10.0, 500.0, 1999.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz));
}

TEST_CASE("500 Hz sine peaks in the band whose center is nearest 500 Hz") {
  const MelSpectrogram mel;
  // centers computed independently: 130 equally spaced Mel points over [0, mel(2000)]
  const double top = 2595.0 * std::log10(1.0 + 2000.0 / 700.0);
  std::size_t nearest = 0;
  double best = 1e9;
  for (std::size_t m = 0; m < 128; ++m) {
    const double c_mel = top * static_cast<double>(m + 1) / 129.0;
    const double c_hz = 700.0 * (std::pow(10.0, c_mel / 2595.0) - 1.0);
    CHECK(mel.filter_bank().centers()[m] == doctest::Approx(c_hz).epsilon(1e-9));
    if (std::abs(c_hz - 500.0) < best) {
      best = std::abs(c_hz - 500.0);
      nearest = m;
    }
  }
  const auto f = mel.compute(segment(sine(500, 3))[0]);
  std::size_t arg = 0;
  double arg_v = -1e30;
  for (std::size_t m = 0; m < 128; ++m) {
    double s = 0.0;
    for (std::size_t t = 0; t < f.frames; ++t) s += f.at(m, t);
    if (s > arg_v) {
      arg_v = s;
      arg = m;
    }
  }
  CHECK(arg == nearest);
}

TEST_CASE("filter bank rows are positive with contiguous support") {
  const MelFilterBank bank{FeatureConfig{}};
  CHECK(bank.n_mels() == 128);
  CHECK(bank.n_bins() == 257);
  for (std::size_t m = 0; m < bank.n_mels(); ++m) {
    double sum = 0.0;
    int runs = 0;
    bool inside = false;
    for (std::size_t k = 0; k < bank.n_bins(); ++k) {
      const double w = bank.weight(m, k);
      CHECK(w >= 0.0);
      sum += w;
      if (w > 0 && !inside) ++runs;
      inside = w > 0;
    }
    CHECK(sum > 0.0);
    CHECK(runs == 1);
  }
}

TEST_CASE("scaling the waveform up never lowers a log-Mel value") {
  const MelSpectrogram mel;
  auto x = noise(12000, 3);
  const auto a = mel.compute(x);
  for (auto& v : x) v *= 1.7;
  const auto b = mel.compute(x);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(b.values[i] >= a.values[i]);
}

TEST_CASE("energy in the last 0.5 s only touches overlapping frames") {
  const MelSpectrogram mel;
  auto x = noise(12000, 4);
  const auto a = mel.compute(x);
  for (std::size_t i = 10000; i < 12000; ++i) x[i] += 0.5 * std::sin(0.3 * i);
  const auto b = mel.compute(x);
  // frame t covers padded samples [50t, 50t + 100), i.e. original [50t - 50, 50t + 50)
  for (std::size_t t = 0; t < 241; ++t) {
    const bool overlaps = 50 * t + 50 > 10000;
    bool changed = false;
    for (std::size_t m = 0; m < 128; ++m) changed = changed || a.at(m, t) != b.at(m, t);
    if (!overlaps) CHECK_FALSE(changed);
  }
  bool any = false;
  for (std::size_t m = 0; m < 128; ++m) any = any || a.at(m, 240) != b.at(m, 240);
  CHECK(any);
}

TEST_CASE("normalization switch centers each map") {
  FeatureConfig c;
  c.normalize = true;
  const auto f = MelSpectrogram(c).compute(noise(12000, 5));
  double mean = 0.0;
  for (float v : f.values) mean += v;
  CHECK(mean / static_cast<double>(f.values.size()) == doctest::Approx(0.0).epsilon(1e-4));
}

TEST_CASE("feature cache round trip is bit-exact") {
  const fs::path dir = fs::temp_directory_path() / "hm_unit_cache";
  fs::create_directories(dir);
  const MelSpectrogram mel;
  std::vector<CachedSegment> segs;
  for (int i = 0; i < 3; ++i) segs.push_back({2.0 * i, mel.compute(noise(12000, 10 + i))});
  save_feature_cache(dir / "x.hmfc", segs);
  const auto back = load_feature_cache(dir / "x.hmfc");
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].offset_s == segs[i].offset_s);
    CHECK(back[i].features == segs[i].features);
  }
  std::ofstream(dir / "bad.hmfc") << "HMFCgarbage";
  CHECK_THROWS_AS(load_feature_cache(dir / "bad.hmfc"), Error);
}

TEST_CASE("concurrent extraction matches serial extraction") {
  const MelSpectrogram mel;
  std::vector<std::vector<double>> inputs;
  for (int i = 0; i < 6; ++i) inputs.push_back(noise(12000, 50 + i));
  std::vector<FeatureMap> serial, parallel(inputs.size());
  for (const auto& x : inputs) serial.push_back(mel.compute(x));
  {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < inputs.size(); ++i) pool.emplace_back([&, i] { parallel[i] = mel.compute(inputs[i]); });
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) CHECK(parallel[i] == serial[i]);
}
