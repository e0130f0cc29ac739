#include "hm/aggregation.hpp"

#include <array>

namespace hm::aggregation {

int priority(ClassLabel c) {
  switch (c) {
    case ClassLabel::Present: return 2;
    case ClassLabel::Unknown: return 1;
    case ClassLabel::Absent: return 0;
  }
  return -1;
}

namespace {

std::array<std::size_t, kNumClasses> histogram(std::span<const ClassLabel> labels) {
  std::array<std::size_t, kNumClasses> counts{};
  for (ClassLabel l : labels) ++counts[static_cast<std::size_t>(to_index(l))];
  return counts;
}

ClassLabel majority(std::span<const ClassLabel> labels, bool* tied) {
  if (labels.empty()) throw Error("record_label: empty sequence");
  const auto counts = histogram(labels);
  ClassLabel best = ClassLabel::Absent;
  for (ClassLabel c : kAllLabels) {
    const std::size_t n = counts[static_cast<std::size_t>(to_index(c))];
    const std::size_t m = counts[static_cast<std::size_t>(to_index(best))];
    if (n > m || (n == m && priority(c) > priority(best))) best = c;
  }
  if (tied) {
    const std::size_t top = counts[static_cast<std::size_t>(to_index(best))];
    std::size_t sharing = 0;
    for (std::size_t n : counts) sharing += n == top ? 1 : 0;
    *tied = sharing > 1;
  }
  return best;
}

}  // namespace

ClassLabel record_label(std::span<const ClassLabel> segment_labels) { return majority(segment_labels, nullptr); }

ClassLabel patient_label(std::span<const ClassLabel> record_labels) {
  if (record_labels.empty()) throw Error("patient_label: empty sequence");
  const auto counts = histogram(record_labels);
  if (counts[to_index(ClassLabel::Present)] > 0) return ClassLabel::Present;
  if (counts[to_index(ClassLabel::Unknown)] > 0) return ClassLabel::Unknown;
  return ClassLabel::Absent;
}

double roll_up_confidence(std::span<const Scored> items, ClassLabel upper) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : items) {
    if (s.label != upper) continue;
    sum += s.confidence;
    ++n;
  }
  if (n == 0) throw Error("roll_up_confidence: no item matches the upper-level label");
  return sum / static_cast<double>(n);
}

RecordDecision decide_record(std::span<const Scored> segments) {
  std::vector<ClassLabel> labels;
  labels.reserve(segments.size());
  for (const auto& s : segments) labels.push_back(s.label);
  RecordDecision d;
  d.label = majority(labels, &d.tie_break);
  d.confidence = roll_up_confidence(segments, d.label);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].label == d.label) d.contributing_segments.push_back(i);
  }
  return d;
}

PatientDecision decide_patient(std::span<const RecordDecision> records) {
  std::vector<ClassLabel> labels;
  std::vector<Scored> scored;
  for (const auto& r : records) {
    labels.push_back(r.label);
    scored.push_back({r.label, r.confidence});
  }
  PatientDecision d;
  d.label = patient_label(labels);
  d.confidence = roll_up_confidence(scored, d.label);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].label != d.label) continue;
    d.contributing_records.push_back(i);
    d.low_support = d.low_support || records[i].tie_break;
  }
  return d;
}

}  // namespace hm::aggregation
