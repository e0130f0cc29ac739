#pragma once

// Log-Mel front end: 3 s windows with a 2 s hop, 25 ms / 12.5 ms framing,
// 512-point FFT and 128 HTK-style Mel bands over 0-2000 Hz.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "hm/dataio.hpp"

namespace hm::features {

struct FeatureConfig {
  int sample_rate = dataio::kExpectedSampleRate;
  double window_s = 3.0;
  double hop_s = 2.0;
  std::size_t frame_length = 100;  // 25 ms
  std::size_t frame_step = 50;     // 12.5 ms
  std::size_t fft_size = 512;
  std::size_t n_mels = 128;
  double fmin = 0.0;
  double fmax = 2000.0;
  double log_eps = 1e-10;
  /// Per-map mean/variance normalization; off by default.
  bool normalize = false;

  std::size_t window_samples() const;
  std::size_t hop_samples() const;
  /// Center-padded frame count: window_samples / frame_step + 1.
  std::size_t n_frames() const;
  void validate() const;
};

struct SegmentAudio {
  std::vector<double> samples;
  double offset_s = 0.0;
  dataio::RecordingMeta source;
};

/// Row-major (mel_bins x frames) log-Mel energies.
struct FeatureMap {
  std::size_t mel_bins = 0;
  std::size_t frames = 0;
  std::vector<float> values;

  float at(std::size_t mel, std::size_t frame) const { return values[mel * frames + frame]; }
  bool operator==(const FeatureMap&) const = default;
};

/// Full windows starting at 0, hop, 2*hop, ...; a recording shorter than one
/// window yields a single zero-padded segment.
std::vector<SegmentAudio> segment(const dataio::Waveform& w, const FeatureConfig& cfg = {},
                                  const dataio::RecordingMeta& source = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular Mel filter bank, n_mels x (fft_size / 2 + 1), unnormalized.
class MelFilterBank {
 public:
  explicit MelFilterBank(const FeatureConfig& cfg);

  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_bins() const { return n_bins_; }
  double weight(std::size_t mel, std::size_t bin) const { return weights_[mel * n_bins_ + bin]; }
  std::span<const double> row(std::size_t mel) const {
    return {weights_.data() + mel * n_bins_, n_bins_};
  }
  /// Center frequency (Hz) of each filter.
  const std::vector<double>& centers() const { return centers_; }

 private:
  std::size_t n_mels_;
  std::size_t n_bins_;
  std::vector<double> weights_;
  std::vector<double> centers_;
};

/// Stateless after construction; compute() is safe to call concurrently.
class MelSpectrogram {
 public:
  explicit MelSpectrogram(FeatureConfig cfg = {});

  const FeatureConfig& config() const { return cfg_; }
  const MelFilterBank& filter_bank() const { return bank_; }

  FeatureMap compute(std::span<const double> samples) const;
  FeatureMap compute(const SegmentAudio& s) const { return compute(s.samples); }

 private:
  FeatureConfig cfg_;
  MelFilterBank bank_;
  std::vector<double> window_;
};

FeatureMap mel_spectrogram(const SegmentAudio& s, const FeatureConfig& cfg = {});

struct CachedSegment {
  double offset_s = 0.0;
  FeatureMap features;
};

/// Binary cache: "HMFC", u32 version, u32 mel_bins, u32 frames, u32 count,
/// count x f64 offsets, then count row-major f32 matrices (little endian).
void save_feature_cache(const std::filesystem::path& path, std::span<const CachedSegment> segments);
std::vector<CachedSegment> load_feature_cache(const std::filesystem::path& path);

/// Loads, segments and featurizes one recording.
std::vector<CachedSegment> featurize_recording(const dataio::RecordingMeta& meta,
                                               const MelSpectrogram& mel);

}  // namespace hm::features
