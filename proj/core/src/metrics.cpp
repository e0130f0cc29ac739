#include "hm/metrics.hpp"

#include <nlohmann/json.hpp>

namespace hm::metrics {

namespace {
constexpr std::size_t idx(ClassLabel c) { return static_cast<std::size_t>(to_index(c)); }
}  // namespace

void ConfusionMatrix3::add(ClassLabel predicted, ClassLabel truth, std::uint64_t n) { m[idx(predicted)][idx(truth)] += n; }

std::uint64_t ConfusionMatrix3::at(ClassLabel predicted, ClassLabel truth) const { return m[idx(predicted)][idx(truth)]; }

std::uint64_t ConfusionMatrix3::total() const {
  std::uint64_t t = 0;
  for (const auto& row : m) {
    for (auto v : row) t += v;
  }
  return t;
}

std::uint64_t ConfusionMatrix3::truth_total(ClassLabel truth) const {
  std::uint64_t t = 0;
  for (const auto& row : m) t += row[idx(truth)];
  return t;
}

std::uint64_t ConfusionMatrix3::predicted_total(ClassLabel predicted) const {
  std::uint64_t t = 0;
  for (auto v : m[idx(predicted)]) t += v;
  return t;
}

double weighted_accuracy(const ConfusionMatrix3& cm, const std::array<double, kNumClasses>& weights) {
  double num = 0.0, den = 0.0;
  for (ClassLabel c : kAllLabels) {
    num += weights[idx(c)] * static_cast<double>(cm.at(c, c));
    den += weights[idx(c)] * static_cast<double>(cm.truth_total(c));
  }
  if (!(den > 0.0)) throw Error("weighted_accuracy: empty confusion matrix");
  return num / den;
}

ClassScores class_scores(const ConfusionMatrix3& cm, ClassLabel c) {
  const auto tp = cm.at(c, c);
  const auto pred = cm.predicted_total(c);
  const auto truth = cm.truth_total(c);
  ClassScores s;
  if (pred > 0) s.precision = static_cast<double>(tp) / static_cast<double>(pred);
  if (truth > 0) s.recall = static_cast<double>(tp) / static_cast<double>(truth);
  // 2PR/(P+R) written on counts: 2TP / (2TP + FP + FN).
  const auto den = pred + truth;
  if (den > 0) s.f1 = static_cast<double>(2 * tp) / static_cast<double>(den);
  return s;
}

double macro_f1(const ConfusionMatrix3& cm) {
  double sum = 0.0;
  for (ClassLabel c : kAllLabels) sum += class_scores(cm, c).f1;
  return sum / static_cast<double>(kNumClasses);
}

std::string to_json(const ConfusionMatrix3& cm) {
  nlohmann::ordered_json j;
  j["convention"] = "matrix[prediction][truth], order absent,present,unknown";
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : cm.m) rows.push_back(row);
  j["matrix"] = rows;
  j["n"] = cm.total();
  j["weighted_accuracy"] = cm.total() > 0 ? nlohmann::ordered_json(weighted_accuracy(cm)) : nlohmann::ordered_json(nullptr);
  j["macro_f1"] = macro_f1(cm);
  nlohmann::ordered_json per_class;
  for (ClassLabel c : kAllLabels) {
    const auto s = class_scores(cm, c);
    per_class[std::string(to_string(c))] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
                                            {"support", cm.truth_total(c)}};
  }
  j["per_class"] = per_class;
  return j.dump(2);
}

}  // namespace hm::metrics
