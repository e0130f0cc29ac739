#pragma once

// Glue between the modules: split featurization and caching, MC prediction
// over a split, segment/record/patient decisions at a given temperature, and
// the CSV formats the command-line tool reads and writes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hm/aggregation.hpp"
#include "hm/calibration.hpp"
#include "hm/dataio.hpp"
#include "hm/features.hpp"
#include "hm/metrics.hpp"
#include "hm/model.hpp"
#include "hm/types.hpp"

namespace hm::pipeline {

struct SegmentInfo {
  std::string patient_id;
  std::string recording;  // recording path as listed in the manifest
  Location location = Location::AV;
  double offset_s = 0.0;
  ClassLabel truth = ClassLabel::Absent;
};

struct SegmentSet {
  std::vector<features::FeatureMap> features;
  std::vector<ClassLabel> labels;
  std::vector<SegmentInfo> info;

  std::size_t size() const { return features.size(); }
};

/// Featurizes every recording of a split in manifest order.
SegmentSet featurize_split(const dataio::DatasetManifest& manifest, Split split, const features::MelSpectrogram& mel,
                           std::size_t threads = 1);

std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const dataio::RecordingMeta& meta);
/// Writes one cache file per recording; returns the number of segments.
std::size_t featurize_to_cache(const dataio::DatasetManifest& manifest, const std::filesystem::path& cache_dir,
                               const features::MelSpectrogram& mel, std::size_t threads = 1);
SegmentSet load_split(const dataio::DatasetManifest& manifest, Split split, const std::filesystem::path& cache_dir);

struct SegmentPrediction {
  SegmentInfo info;
  std::vector<Logits> pass_logits;  // one row per MC pass
};

std::vector<SegmentPrediction> predict(const model::Model& m, const SegmentSet& set, std::size_t passes,
                                       std::uint64_t seed, std::size_t batch = 32, std::size_t threads = 1);

struct SegmentOutcome {
  ProbVector prob{};
  ClassLabel predicted = ClassLabel::Absent;
  ClassLabel truth = ClassLabel::Absent;
  double confidence = 0.0;
  double entropy = 0.0;
};

struct RecordOutcome {
  std::string patient_id;
  std::string recording;
  ClassLabel truth = ClassLabel::Absent;
  std::vector<std::size_t> segments;  // indices into Evaluation::segments
  aggregation::RecordDecision decision;
  double entropy_mean = 0.0;
};

struct PatientOutcome {
  std::string patient_id;
  ClassLabel truth = ClassLabel::Absent;
  std::vector<std::size_t> records;  // indices into Evaluation::records
  aggregation::PatientDecision decision;
  double entropy_mean = 0.0;  // over contributing segments of contributing records
};

struct Evaluation {
  double temperature = 1.0;
  std::vector<SegmentOutcome> segments;
  std::vector<RecordOutcome> records;
  std::vector<PatientOutcome> patients;
  metrics::ConfusionMatrix3 segment_cm, record_cm, patient_cm;

  std::vector<calibration::ConfidenceSample> segment_confidences() const;
  std::vector<calibration::ConfidenceSample> patient_confidences() const;
};

/// Scale-then-average at `temperature`, then the record and patient rules.
Evaluation evaluate(std::span<const SegmentPrediction> preds, double temperature);

/// Patient-level refit: minimizes the log loss of patient confidence
/// against patient correctness over the same temperature bracket.
calibration::TemperatureFit fit_patient_temperature(std::span<const SegmentPrediction> preds);

// ---- file formats

/// `patient_id,recording,offset_s,p_absent,p_present,p_unknown,entropy,label`
void write_prediction_dump(std::ostream& out, std::span<const SegmentPrediction> preds, double temperature = 1.0);

/// `patient_id,location,recording,offset_s,truth,pass,z_absent,z_present,z_unknown`,
/// one row per (segment, pass); values printed with round-trip precision.
void write_pass_logits(std::ostream& out, std::span<const SegmentPrediction> preds);
std::vector<SegmentPrediction> read_pass_logits(std::istream& in);

struct PatientRow {
  std::string patient_id;
  ClassLabel label = ClassLabel::Absent;
  double confidence = 0.0;
  double entropy_mean = 0.0;
};

/// `patient_id,label,confidence,entropy_mean`
void write_patient_decisions(std::ostream& out, const Evaluation& ev);
std::vector<PatientRow> read_patient_decisions(std::istream& in);

}  // namespace hm::pipeline
