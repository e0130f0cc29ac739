#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "hm/types.hpp"

namespace hm::metrics {

/// Counts indexed m[prediction][truth].
struct ConfusionMatrix3 {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> m{};

  void add(ClassLabel predicted, ClassLabel truth, std::uint64_t n = 1);
  std::uint64_t at(ClassLabel predicted, ClassLabel truth) const;
  std::uint64_t total() const;
  std::uint64_t truth_total(ClassLabel truth) const;
  std::uint64_t predicted_total(ClassLabel predicted) const;
  bool operator==(const ConfusionMatrix3&) const = default;
};

inline constexpr std::array<double, kNumClasses> kChallengeWeights{1.0, 5.0, 3.0};

/// (sum_c w_c * m[c][c]) / (sum_c w_c * truth_total(c)); throws on an empty matrix.
double weighted_accuracy(const ConfusionMatrix3& cm,
                         const std::array<double, kNumClasses>& weights = kChallengeWeights);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Undefined ratios (zero denominators) are reported as 0.
ClassScores class_scores(const ConfusionMatrix3& cm, ClassLabel c);
double macro_f1(const ConfusionMatrix3& cm);

/// JSON object: matrix, weighted_accuracy, macro_f1, per-class scores.
std::string to_json(const ConfusionMatrix3& cm);

}  // namespace hm::metrics
