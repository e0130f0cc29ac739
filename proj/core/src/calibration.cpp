#include "hm/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <nlohmann/json.hpp>

#include "hm/uncertainty.hpp"

namespace hm::calibration {

ProbVector scale(const Logits& z, double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be positive, got " + std::to_string(temperature));
  return uncertainty::softmax(z, temperature);
}

std::size_t bin_index(double confidence, std::size_t bins) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw Error("confidence outside [0, 1]: " + std::to_string(confidence));
  }
  const auto i = static_cast<std::size_t>(std::floor(confidence * static_cast<double>(bins)));
  return std::min(i, bins - 1);
}

std::vector<std::size_t> ReliabilityData::histogram() const {
  std::vector<std::size_t> h;
  h.reserve(bins.size());
  for (const auto& b : bins) h.push_back(b.count);
  return h;
}

ReliabilityData reliability_data(std::span<const ConfidenceSample> samples, std::size_t bins) {
  if (samples.empty()) throw Error("calibration: empty input");
  if (bins == 0) throw Error("calibration: need at least one bin");
  ReliabilityData d;
  d.n = samples.size();
  d.bins.resize(bins);
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0);
  double total_conf = 0.0, total_correct = 0.0;
  for (const auto& s : samples) {
    const std::size_t i = bin_index(s.confidence, bins);
    ++d.bins[i].count;
    conf_sum[i] += s.confidence;
    correct[i] += s.correct ? 1.0 : 0.0;
    total_conf += s.confidence;
    total_correct += s.correct ? 1.0 : 0.0;
  }
  for (std::size_t i = 0; i < bins; ++i) {
    auto& b = d.bins[i];
    b.lo = static_cast<double>(i) / static_cast<double>(bins);
    b.hi = static_cast<double>(i + 1) / static_cast<double>(bins);
    if (b.count > 0) {
      b.avg_confidence = conf_sum[i] / static_cast<double>(b.count);
      b.accuracy = correct[i] / static_cast<double>(b.count);
    }
  }
  d.overall_accuracy = total_correct / static_cast<double>(d.n);
  d.mean_confidence = total_conf / static_cast<double>(d.n);
  return d;
}

double ece(const ReliabilityData& data) {
  if (data.n == 0) throw Error("calibration: empty input");
  double e = 0.0;
  for (const auto& b : data.bins) {
    if (b.count == 0) continue;
    e += static_cast<double>(b.count) / static_cast<double>(data.n) * std::abs(b.accuracy - b.avg_confidence);
  }
  return e;
}

double ece(std::span<const ConfidenceSample> samples, std::size_t bins) {
  return ece(reliability_data(samples, bins));
}

// ---------------------------------------------------------------- temperature

double nll(std::span<const Logits> logits, std::span<const ClassLabel> labels, double temperature) {
  if (logits.size() != labels.size() || logits.empty()) throw Error("nll: size mismatch or empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& z = logits[i];
    const double mx = std::max({z[0], z[1], z[2]}) / temperature;
    double s = 0.0;
    for (double v : z) s += std::exp(v / temperature - mx);
    total += std::log(s) + mx - z[static_cast<std::size_t>(to_index(labels[i]))] / temperature;
  }
  return total / static_cast<double>(logits.size());
}

double nll_mc(std::span<const std::vector<Logits>> pass_logits, std::span<const ClassLabel> labels, double temperature) {
  if (pass_logits.size() != labels.size() || pass_logits.empty()) throw Error("nll: size mismatch or empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < pass_logits.size(); ++i) {
    const auto r = uncertainty::summarize(pass_logits[i], temperature);
    const double p = r.mean[static_cast<std::size_t>(to_index(labels[i]))];
    total -= std::log(std::max(p, 1e-300));
  }
  return total / static_cast<double>(pass_logits.size());
}

TemperatureFit minimize_temperature(const std::function<double(double)>& objective, double tol, std::size_t max_iter) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(0.05), b = std::log(20.0);
  double c = b - (b - a) * inv_phi, d = a + (b - a) * inv_phi;
  double fc = objective(std::exp(c)), fd = objective(std::exp(d));
  TemperatureFit fit;
  while (std::exp(b) - std::exp(a) > tol && fit.iterations < max_iter) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - (b - a) * inv_phi;
      fc = objective(std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + (b - a) * inv_phi;
      fd = objective(std::exp(d));
    }
    ++fit.iterations;
  }
  fit.temperature = std::exp(0.5 * (a + b));
  fit.nll_at_fit = objective(fit.temperature);
  fit.nll_at_one = objective(1.0);
  if (fit.nll_at_one < fit.nll_at_fit) {
    fit.temperature = 1.0;
    fit.nll_at_fit = fit.nll_at_one;
  }
  return fit;
}

namespace {

bool single_class(std::span<const ClassLabel> labels) {
  return std::set<ClassLabel>(labels.begin(), labels.end()).size() < 2;
}

}  // namespace

TemperatureFit fit_temperature(std::span<const Logits> logits, std::span<const ClassLabel> labels) {
  if (logits.empty() || logits.size() != labels.size()) throw Error("fit_temperature: empty or mismatched input");
  if (single_class(labels)) {
    TemperatureFit f;
    f.degenerate = true;
    f.nll_at_one = f.nll_at_fit = nll(logits, labels, 1.0);
    return f;
  }
  return minimize_temperature([&](double t) { return nll(logits, labels, t); });
}

TemperatureFit fit_temperature_mc(std::span<const std::vector<Logits>> pass_logits, std::span<const ClassLabel> labels) {
  if (pass_logits.empty() || pass_logits.size() != labels.size()) throw Error("fit_temperature: empty or mismatched input");
  if (single_class(labels)) {
    TemperatureFit f;
    f.degenerate = true;
    f.nll_at_one = f.nll_at_fit = nll_mc(pass_logits, labels, 1.0);
    return f;
  }
  return minimize_temperature([&](double t) { return nll_mc(pass_logits, labels, t); });
}

// ---------------------------------------------------------------- reports

std::string_view to_string(Level l) { return l == Level::Segment ? "segment" : "patient"; }

namespace {

nlohmann::ordered_json bins_json(const ReliabilityData& d) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& b : d.bins) {
    arr.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"avg_confidence", b.avg_confidence},
                   {"accuracy", b.accuracy}});
  }
  return arr;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string to_json(const CalibrationReport& r) {
  nlohmann::ordered_json j;
  j["level"] = std::string(to_string(r.level));
  j["temperature"] = r.temperature;
  j["ece_before"] = r.ece_before;
  j["ece_after"] = r.ece_after;
  j["n"] = r.before.n;
  j["accuracy"] = r.before.overall_accuracy;
  j["mean_confidence_before"] = r.before.mean_confidence;
  j["mean_confidence_after"] = r.after.mean_confidence;
  j["bins_before"] = bins_json(r.before);
  j["bins_after"] = bins_json(r.after);
  j["histogram_before"] = r.before.histogram();
  j["histogram_after"] = r.after.histogram();
  return j.dump(2);
}

std::string reliability_csv(const ReliabilityData& d) {
  std::string out = "bin_lo,bin_hi,count,avg_conf,accuracy\n";
  for (const auto& b : d.bins) {
    out += fmt(b.lo) + "," + fmt(b.hi) + "," + std::to_string(b.count) + "," + fmt(b.avg_confidence) + "," +
           fmt(b.accuracy) + "\n";
  }
  return out;
}

std::string histogram_csv(const ReliabilityData& d) {
  std::string out = "bin_lo,bin_hi,count\n";
  for (const auto& b : d.bins) out += fmt(b.lo) + "," + fmt(b.hi) + "," + std::to_string(b.count) + "\n";
  out += "# accuracy," + fmt(d.overall_accuracy) + "\n";
  out += "# mean_confidence," + fmt(d.mean_confidence) + "\n";
  return out;
}

}  // namespace hm::calibration
