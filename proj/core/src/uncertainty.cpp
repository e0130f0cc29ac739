#include "hm/uncertainty.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

namespace hm::uncertainty {

double entropy(const ProbVector& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(0.0, h);
}

double normalized_entropy(const ProbVector& p) { return entropy(p) / std::log(3.0); }

ProbVector softmax(const Logits& z, double temperature) {
  if (!(temperature > 0.0)) throw Error("softmax: temperature must be positive");
  const double mx = std::max({z[0], z[1], z[2]}) / temperature;
  ProbVector p{};
  double s = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) s += (p[c] = std::exp(z[c] / temperature - mx));
  for (auto& v : p) v /= s;
  return p;
}

McResult summarize_probs(std::span<const ProbVector> pass_probs, bool keep_per_pass) {
  if (pass_probs.empty()) throw Error("mc: need at least one pass");
  McResult r;
  r.n_passes = pass_probs.size();
  for (const auto& p : pass_probs) {
    for (std::size_t c = 0; c < kNumClasses; ++c) r.mean[c] += p[c];
  }
  for (auto& v : r.mean) v /= static_cast<double>(pass_probs.size());
  r.entropy = entropy(r.mean);
  if (keep_per_pass) r.per_pass.assign(pass_probs.begin(), pass_probs.end());
  return r;
}

McResult summarize(std::span<const Logits> pass_logits, double temperature, bool keep_per_pass) {
  std::vector<ProbVector> probs;
  probs.reserve(pass_logits.size());
  for (const auto& z : pass_logits) probs.push_back(softmax(z, temperature));
  return summarize_probs(probs, keep_per_pass);
}

PassLogits mc_logits(const model::Model& m, std::span<const features::FeatureMap> maps, std::size_t passes,
                     std::uint64_t seed, std::size_t batch, std::size_t threads) {
  if (passes == 0) throw Error("mc: need at least one pass");
  if (batch == 0) throw Error("mc: batch must be positive");
  PassLogits out(maps.size(), std::vector<Logits>(passes));

  // Each worker owns whole passes and writes disjoint slots.
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t pass = next++; pass < passes; pass = next++) {
      try {
        for (std::size_t s = 0; s < maps.size(); s += batch) {
          const std::size_t len = std::min(batch, maps.size() - s);
          const auto z = m.predict_logits(maps.subspan(s, len), model::RunMode::mc(seed, len, pass));
          for (std::size_t i = 0; i < len; ++i) out[s + i][pass] = z[i];
        }
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, passes);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

McResult mc_predict(const model::Model& m, const features::FeatureMap& f, std::size_t passes, std::uint64_t seed,
                    bool keep_per_pass) {
  const auto z = mc_logits(m, std::span(&f, 1), passes, seed, 1, 1);
  return summarize(z[0], 1.0, keep_per_pass);
}

}  // namespace hm::uncertainty
