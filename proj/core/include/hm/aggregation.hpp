#pragma once

// Segment -> record -> patient decisions.
//
// Record label: majority of segment labels, ties broken present > unknown >
// absent. Patient label: present if any record is present, else unknown if
// any record is unknown, else absent. At each level the confidence is the
// mean confidence of the lower-level items that agree with the decision.

#include <cstddef>
#include <span>
#include <vector>

#include "hm/types.hpp"

namespace hm::aggregation {

struct Scored {
  ClassLabel label = ClassLabel::Absent;
  double confidence = 0.0;
};

struct RecordDecision {
  ClassLabel label = ClassLabel::Absent;
  double confidence = 0.0;
  std::vector<std::size_t> contributing_segments;
  /// The winning label shared the top count with another label.
  bool tie_break = false;
};

struct PatientDecision {
  ClassLabel label = ClassLabel::Absent;
  double confidence = 0.0;
  std::vector<std::size_t> contributing_records;
  /// Some contributing record was itself decided by a tie-break.
  bool low_support = false;
};

/// Tie-break rank; higher wins.
int priority(ClassLabel c);

ClassLabel record_label(std::span<const ClassLabel> segment_labels);
ClassLabel patient_label(std::span<const ClassLabel> record_labels);

/// Mean confidence over the items whose label equals `upper`.
double roll_up_confidence(std::span<const Scored> items, ClassLabel upper);

RecordDecision decide_record(std::span<const Scored> segments);
PatientDecision decide_patient(std::span<const RecordDecision> records);

}  // namespace hm::aggregation
