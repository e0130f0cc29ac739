#pragma once

// Temperature scaling, expected calibration error and reliability-diagram data.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hm/types.hpp"

namespace hm::calibration {

inline constexpr std::size_t kDefaultBins = 15;

/// softmax(z / T); throws for T <= 0.
ProbVector scale(const Logits& z, double temperature);

struct ConfidenceSample {
  double confidence = 0.0;
  bool correct = false;
};

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double avg_confidence = 0.0;  // 0 for empty bins
  double accuracy = 0.0;        // 0 for empty bins
};

struct ReliabilityData {
  std::vector<ReliabilityBin> bins;
  std::size_t n = 0;
  double overall_accuracy = 0.0;
  double mean_confidence = 0.0;

  std::vector<std::size_t> histogram() const;
};

/// Equal-width bins over [0, 1], half-open [lo, hi) with the last bin closed.
std::size_t bin_index(double confidence, std::size_t bins);

ReliabilityData reliability_data(std::span<const ConfidenceSample> samples, std::size_t bins = kDefaultBins);
/// sum_i |B_i| / n * |accuracy(B_i) - confidence(B_i)|
double ece(const ReliabilityData& data);
double ece(std::span<const ConfidenceSample> samples, std::size_t bins = kDefaultBins);

/// Mean negative log-likelihood of softmax(z / T).
double nll(std::span<const Logits> logits, std::span<const ClassLabel> labels, double temperature);
/// Scale-then-average: -log mean_n softmax(z_n / T)[y], averaged over segments.
double nll_mc(std::span<const std::vector<Logits>> pass_logits, std::span<const ClassLabel> labels, double temperature);

struct TemperatureFit {
  double temperature = 1.0;
  bool degenerate = false;  // fewer than two distinct labels: T = 1 returned
  double nll_at_one = 0.0;
  double nll_at_fit = 0.0;
  std::size_t iterations = 0;
};

/// Golden-section search on log T over [ln 0.05, ln 20] until the bracket is
/// narrower than `tol` in T (at most `max_iter` iterations).
TemperatureFit minimize_temperature(const std::function<double(double)>& objective, double tol = 1e-4,
                                    std::size_t max_iter = 200);

TemperatureFit fit_temperature(std::span<const Logits> logits, std::span<const ClassLabel> labels);
TemperatureFit fit_temperature_mc(std::span<const std::vector<Logits>> pass_logits, std::span<const ClassLabel> labels);

enum class Level { Segment, Patient };
std::string_view to_string(Level l);

struct CalibrationReport {
  Level level = Level::Segment;
  double temperature = 1.0;
  double ece_before = 0.0;
  double ece_after = 0.0;
  ReliabilityData before;
  ReliabilityData after;
};

std::string to_json(const CalibrationReport& r);
/// `bin_lo,bin_hi,count,avg_conf,accuracy`
std::string reliability_csv(const ReliabilityData& d);
/// `bin_lo,bin_hi,count`, followed by accuracy/mean-confidence marker rows.
std::string histogram_csv(const ReliabilityData& d);

}  // namespace hm::calibration
