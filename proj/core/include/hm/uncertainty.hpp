#pragma once

// Monte-Carlo dropout: N stochastic forward passes, averaged softmax, and
// the Shannon entropy (nats) of the averaged distribution.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hm/features.hpp"
#include "hm/model.hpp"
#include "hm/types.hpp"

namespace hm::uncertainty {

inline constexpr std::size_t kDefaultPasses = 30;

struct McResult {
  ProbVector mean{};
  double entropy = 0.0;  // nats, in [0, ln 3]
  std::size_t n_passes = 0;
  std::vector<ProbVector> per_pass;  // empty unless requested

  bool operator==(const McResult&) const = default;
};

/// Natural-log entropy; zero probabilities contribute nothing.
double entropy(const ProbVector& p);
/// entropy / ln 3, in [0, 1].
double normalized_entropy(const ProbVector& p);

/// Softmax of z / temperature.
ProbVector softmax(const Logits& z, double temperature = 1.0);

/// Averages the per-pass softmax(z / T) rows in pass order.
McResult summarize(std::span<const Logits> pass_logits, double temperature = 1.0, bool keep_per_pass = false);
/// Averages already-normalized per-pass probabilities.
McResult summarize_probs(std::span<const ProbVector> pass_probs, bool keep_per_pass = false);

/// Per-segment logits of every pass: result[segment][pass].
using PassLogits = std::vector<std::vector<Logits>>;

/// Runs `passes` MC-dropout forward passes over all segments. Pass n uses
/// RunMode::mc(seed, batch, n); passes may run on `threads` workers and
/// are reduced in pass order, so the result does not depend on `threads`.
PassLogits mc_logits(const model::Model& m, std::span<const features::FeatureMap> maps, std::size_t passes,
                     std::uint64_t seed, std::size_t batch = 32, std::size_t threads = 1);

/// Single-segment MC prediction at temperature 1.
McResult mc_predict(const model::Model& m, const features::FeatureMap& f, std::size_t passes, std::uint64_t seed,
                    bool keep_per_pass = false);

}  // namespace hm::uncertainty
