#pragma once

// Dataset ingest: manifest files, PCM WAV audio, stratified splits and the
// synthetic phonocardiogram generator used by tests and demos.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "hm/types.hpp"

namespace hm::dataio {

inline constexpr int kExpectedSampleRate = 4000;

struct RecordingMeta {
  std::string patient_id;
  Location location = Location::AV;
  std::filesystem::path path;  // absolute, or relative to the working directory
  int sample_rate = kExpectedSampleRate;
  ClassLabel label = ClassLabel::Absent;  // patient-level label
  Split split = Split::Train;
};

struct SplitCounts {
  std::size_t patients = 0;
  std::size_t recordings = 0;
};

/// Manifest rows in file order. Invariants (checked on load): one split and
/// one label per patient, no duplicate (patient, path) rows.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<RecordingMeta> entries);

  const std::vector<RecordingMeta>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  SplitCounts counts(Split s) const;
  /// Patients per label within a split.
  std::array<std::size_t, kNumClasses> patient_label_counts(Split s) const;
  /// Entries belonging to one split, in file order.
  std::vector<RecordingMeta> subset(Split s) const;
  std::vector<std::string> patients(Split s) const;

 private:
  void validate() const;
  std::vector<RecordingMeta> entries_;
};

/// Header: patient_id,location,split,label,path. Relative paths are
/// resolved against `base_dir`.
DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kExpectedSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

/// Reads RIFF/WAVE, PCM 16-bit, mono.
Waveform read_wav(const std::filesystem::path& path);
Waveform decode_wav(const std::vector<std::uint8_t>& bytes);
/// Writes PCM 16-bit mono; samples are clipped to [-1, 32767/32768].
void write_wav(const std::filesystem::path& path, const Waveform& w);
std::vector<std::uint8_t> encode_wav(const Waveform& w);

/// Decodes the recording and checks its sample rate against meta.sample_rate.
Waveform load_audio(const RecordingMeta& meta);

/// Seeded stratified patient splitter: within each label, patients are
/// shuffled and cut by `fractions` (train, validation, test).
std::map<std::string, Split> stratified_split(const std::map<std::string, ClassLabel>& patients,
                                              const std::array<double, 3>& fractions,
                                              std::uint64_t seed);

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_patients = 24;
  std::array<double, kNumClasses> class_mix{0.5, 0.3, 0.2};
  std::array<double, 3> split_fractions{0.6, 0.2, 0.2};
  double min_duration_s = 4.0;
  double max_duration_s = 9.0;
};

struct SynthRecording {
  RecordingMeta meta;
  Waveform audio;
};

/// Generates the synthetic cohort in memory. Paths are `wav/<patient>_<loc>.wav`.
std::vector<SynthRecording> synth_recordings(const SynthConfig& cfg);

/// Writes `manifest.csv` and `wav/*.wav` under `out_dir` and returns the manifest.
DatasetManifest synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace hm::dataio
