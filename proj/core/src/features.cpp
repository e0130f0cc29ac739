#include "hm/features.hpp"

#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>

#include <unsupported/Eigen/FFT>

namespace hm::features {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::size_t FeatureConfig::window_samples() const {
  return static_cast<std::size_t>(std::llround(window_s * sample_rate));
}
std::size_t FeatureConfig::hop_samples() const {
  return static_cast<std::size_t>(std::llround(hop_s * sample_rate));
}
std::size_t FeatureConfig::n_frames() const { return window_samples() / frame_step + 1; }

void FeatureConfig::validate() const {
  if (sample_rate <= 0) throw Error("features: sample_rate must be positive");
  if (!(window_s > 0.0) || !(hop_s > 0.0)) throw Error("features: window and hop must be positive");
  if (frame_length == 0 || frame_step == 0) throw Error("features: frame sizes must be positive");
  if (fft_size < frame_length) throw Error("features: fft_size must be >= frame_length");
  if (n_mels == 0) throw Error("features: n_mels must be positive");
  if (!(fmax > fmin) || fmin < 0.0 || fmax > sample_rate / 2.0) {
    throw Error("features: need 0 <= fmin < fmax <= Nyquist");
  }
  if (!(log_eps > 0.0)) throw Error("features: log_eps must be positive");
}

std::vector<SegmentAudio> segment(const dataio::Waveform& w, const FeatureConfig& cfg,
                                  const dataio::RecordingMeta& source) {
  if (w.sample_rate != cfg.sample_rate) {
    throw Error("segment: sample-rate mismatch (" + std::to_string(w.sample_rate) + " vs " +
                std::to_string(cfg.sample_rate) + ")");
  }
  const std::size_t win = cfg.window_samples();
  const std::size_t hop = cfg.hop_samples();
  std::vector<SegmentAudio> out;
  if (w.samples.empty()) return out;
  if (w.samples.size() < win) {
    SegmentAudio s;
    s.samples.assign(win, 0.0);
    std::copy(w.samples.begin(), w.samples.end(), s.samples.begin());
    s.source = source;
    out.push_back(std::move(s));
    return out;
  }
  const std::size_t count = (w.samples.size() - win) / hop + 1;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SegmentAudio s;
    const auto first = w.samples.begin() + static_cast<std::ptrdiff_t>(i * hop);
    s.samples.assign(first, first + static_cast<std::ptrdiff_t>(win));
    s.offset_s = static_cast<double>(i) * cfg.hop_s;
    s.source = source;
    out.push_back(std::move(s));
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterBank::MelFilterBank(const FeatureConfig& cfg)
    : n_mels_(cfg.n_mels), n_bins_(cfg.fft_size / 2 + 1), weights_(n_mels_ * n_bins_, 0.0) {
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(n_mels_ + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels_ + 1));
  }
  centers_.assign(edges.begin() + 1, edges.end() - 1);
  const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.fft_size);
  for (std::size_t m = 0; m < n_mels_; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < n_bins_; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double up = (f - lo) / (c - lo);
      const double down = (hi - f) / (hi - c);
      weights_[m * n_bins_ + k] = std::max(0.0, std::min(up, down));
    }
  }
}

MelSpectrogram::MelSpectrogram(FeatureConfig cfg) : cfg_((cfg.validate(), cfg)), bank_(cfg_) {
  window_.resize(cfg_.frame_length);
  for (std::size_t n = 0; n < cfg_.frame_length; ++n) {
    window_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                      static_cast<double>(cfg_.frame_length));
  }
}

FeatureMap MelSpectrogram::compute(std::span<const double> samples) const {
  const std::size_t n = samples.size();
  const std::size_t pad = cfg_.frame_length / 2;
  if (n <= pad) throw Error("mel_spectrogram: segment too short for reflect padding");

  // Reflect padding centers frame t on sample t * step.
  std::vector<double> padded(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) {
    padded[i] = samples[pad - i];
    padded[pad + n + i] = samples[n - 2 - i];
  }
  std::copy(samples.begin(), samples.end(), padded.begin() + static_cast<std::ptrdiff_t>(pad));

  const std::size_t frames = n / cfg_.frame_step + 1;
  const std::size_t bins = bank_.n_bins();
  FeatureMap out;
  out.mel_bins = cfg_.n_mels;
  out.frames = frames;
  out.values.resize(out.mel_bins * frames);

  Eigen::FFT<double> fft;
  std::vector<double> frame(cfg_.fft_size, 0.0);
  std::vector<std::complex<double>> spec;
  std::vector<double> power(bins);
  std::vector<double> logmel(out.values.size());
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t start = t * cfg_.frame_step;
    std::fill(frame.begin(), frame.end(), 0.0);
    for (std::size_t i = 0; i < cfg_.frame_length && start + i < padded.size(); ++i) {
      frame[i] = padded[start + i] * window_[i];
    }
    fft.fwd(spec, frame);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spec[k]);
    for (std::size_t m = 0; m < cfg_.n_mels; ++m) {
      const auto w = bank_.row(m);
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += w[k] * power[k];
      logmel[m * frames + t] = std::log(e + cfg_.log_eps);
    }
  }
  if (cfg_.normalize) {
    double mean = 0.0;
    for (double v : logmel) mean += v;
    mean /= static_cast<double>(logmel.size());
    double var = 0.0;
    for (double v : logmel) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(logmel.size())) + 1e-8;
    for (double& v : logmel) v = (v - mean) / sd;
  }
  for (std::size_t i = 0; i < logmel.size(); ++i) out.values[i] = static_cast<float>(logmel[i]);
  return out;
}

FeatureMap mel_spectrogram(const SegmentAudio& s, const FeatureConfig& cfg) {
  return MelSpectrogram(cfg).compute(s);
}

namespace {

constexpr char kCacheMagic[4] = {'H', 'M', 'F', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("feature cache: truncated file");
  return v;
}

}  // namespace

void save_feature_cache(const std::filesystem::path& path, std::span<const CachedSegment> segments) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write feature cache " + path.string());
  const std::uint32_t mel = segments.empty() ? 0 : static_cast<std::uint32_t>(segments[0].features.mel_bins);
  const std::uint32_t frames = segments.empty() ? 0 : static_cast<std::uint32_t>(segments[0].features.frames);
  out.write(kCacheMagic, 4);
  put(out, kCacheVersion);
  put(out, mel);
  put(out, frames);
  put(out, static_cast<std::uint32_t>(segments.size()));
  for (const auto& s : segments) put(out, s.offset_s);
  for (const auto& s : segments) {
    if (s.features.mel_bins != mel || s.features.frames != frames ||
        s.features.values.size() != static_cast<std::size_t>(mel) * frames) {
      throw Error("feature cache: segments must share one shape");
    }
    out.write(reinterpret_cast<const char*>(s.features.values.data()),
              static_cast<std::streamsize>(s.features.values.size() * sizeof(float)));
  }
  if (!out) throw Error("feature cache: write failed for " + path.string());
}

std::vector<CachedSegment> load_feature_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature cache " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCacheMagic, 4) != 0) {
    throw Error("feature cache: bad magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCacheVersion) throw Error("feature cache: unsupported version " + std::to_string(version));
  const auto mel = get<std::uint32_t>(in);
  const auto frames = get<std::uint32_t>(in);
  const auto count = get<std::uint32_t>(in);
  std::vector<CachedSegment> out(count);
  for (auto& s : out) s.offset_s = get<double>(in);
  for (auto& s : out) {
    s.features.mel_bins = mel;
    s.features.frames = frames;
    s.features.values.resize(static_cast<std::size_t>(mel) * frames);
    if (!in.read(reinterpret_cast<char*>(s.features.values.data()),
                 static_cast<std::streamsize>(s.features.values.size() * sizeof(float)))) {
      throw Error("feature cache: truncated file " + path.string());
    }
  }
  return out;
}

std::vector<CachedSegment> featurize_recording(const dataio::RecordingMeta& meta, const MelSpectrogram& mel) {
  const auto wave = dataio::load_audio(meta);
  std::vector<CachedSegment> out;
  for (const auto& seg : segment(wave, mel.config(), meta)) {
    out.push_back({seg.offset_s, mel.compute(seg)});
  }
  return out;
}

}  // namespace hm::features
