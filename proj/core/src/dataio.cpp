#include "hm/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <map>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "hm/rng.hpp"

namespace hm::dataio {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- manifest

DatasetManifest::DatasetManifest(std::vector<RecordingMeta> entries) : entries_(std::move(entries)) {
  validate();
}

void DatasetManifest::validate() const {
  if (entries_.empty()) throw Error("manifest: no entries");
  std::map<std::string, std::pair<Split, ClassLabel>> seen;
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& e : entries_) {
    if (e.patient_id.empty()) throw Error("manifest: empty patient_id");
    if (e.sample_rate <= 0) throw Error("manifest: sample_rate must be positive");
    if (!keys.emplace(e.patient_id, e.path.generic_string()).second) {
      throw Error("manifest: duplicate (patient, path) pair: " + e.patient_id + ", " +
                  e.path.generic_string());
    }
    auto [it, inserted] = seen.emplace(e.patient_id, std::make_pair(e.split, e.label));
    if (!inserted) {
      if (it->second.first != e.split) {
        throw Error("manifest: patient " + e.patient_id + " appears in more than one split");
      }
      if (it->second.second != e.label) {
        throw Error("manifest: patient " + e.patient_id + " has conflicting labels");
      }
    }
  }
}

SplitCounts DatasetManifest::counts(Split s) const {
  SplitCounts c;
  std::set<std::string> patients;
  for (const auto& e : entries_) {
    if (e.split != s) continue;
    ++c.recordings;
    patients.insert(e.patient_id);
  }
  c.patients = patients.size();
  return c;
}

std::array<std::size_t, kNumClasses> DatasetManifest::patient_label_counts(Split s) const {
  std::map<std::string, ClassLabel> labels;
  for (const auto& e : entries_) {
    if (e.split == s) labels[e.patient_id] = e.label;
  }
  std::array<std::size_t, kNumClasses> out{};
  for (const auto& [id, label] : labels) ++out[to_index(label)];
  return out;
}

std::vector<RecordingMeta> DatasetManifest::subset(Split s) const {
  std::vector<RecordingMeta> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [s](const RecordingMeta& e) { return e.split == s; });
  return out;
}

std::vector<std::string> DatasetManifest::patients(Split s) const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (e.split == s && seen.insert(e.patient_id).second) out.push_back(e.patient_id);
  }
  return out;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

DatasetManifest parse_manifest(std::istream& in, const fs::path& base_dir) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::vector<RecordingMeta> entries;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!have_header) {
      if (trim(line) != "patient_id,location,split,label,path") {
        throw Error("manifest line " + std::to_string(line_no) +
                    ": expected header 'patient_id,location,split,label,path'");
      }
      have_header = true;
      continue;
    }
    const auto fields = split_commas(line);
    if (fields.size() != 5) {
      throw Error("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                  std::to_string(fields.size()));
    }
    try {
      RecordingMeta m;
      m.patient_id = fields[0];
      if (m.patient_id.empty()) throw Error("empty patient_id");
      m.location = parse_location(fields[1]);
      m.split = parse_split(fields[2]);
      m.label = parse_label(fields[3]);
      if (fields[4].empty()) throw Error("empty path");
      fs::path p(fields[4]);
      m.path = p.is_absolute() ? p : base_dir / p;
      entries.push_back(std::move(m));
    } catch (const Error& e) {
      throw Error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (entries.empty()) throw Error("manifest: no entries");
  return DatasetManifest(std::move(entries));
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest " + path.string());
  const fs::path base = path.parent_path();
  out << "patient_id,location,split,label,path\n";
  for (const auto& e : manifest.entries()) {
    fs::path p = e.path;
    if (!base.empty()) {
      const fs::path rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << e.patient_id << ',' << to_string(e.location) << ',' << to_string(e.split) << ','
        << to_string(e.label) << ',' << p.generic_string() << '\n';
  }
}

// ---------------------------------------------------------------- WAV

namespace {

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

Waveform decode_wav(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error("unsupported encoding: not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = bytes.size() - body;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) throw Error("unsupported encoding: truncated fmt chunk");
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min<std::size_t>(size, avail);
      have_data = true;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt || !have_data) throw Error("unsupported encoding: missing fmt or data chunk");
  if (format != 1) throw Error("unsupported encoding: only PCM (format 1) is supported");
  if (bits != 16) throw Error("unsupported encoding: only 16-bit PCM is supported");
  if (channels != 1) throw Error("mono required (file has " + std::to_string(channels) + " channels)");
  if (rate == 0) throw Error("unsupported encoding: zero sample rate");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  const std::size_t n = data_size / 2;
  if (n == 0) throw Error("zero-length audio");
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = static_cast<std::int16_t>(read_u16(data + 2 * i));
    w.samples[i] = static_cast<double>(v) / 32768.0;
  }
  return w;
}

Waveform read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open audio file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  std::vector<std::uint8_t> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put_u32(b, 36 + 2 * n);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(b, 16);
  put_u16(b, 1);  // PCM
  put_u16(b, 1);  // mono
  put_u32(b, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(b, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put_u32(b, 2 * n);
  for (double s : w.samples) {
    const double q = std::clamp(std::nearbyint(s * 32768.0), -32768.0, 32767.0);
    put_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return b;
}

void write_wav(const fs::path& path, const Waveform& w) {
  const auto bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write audio file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Waveform load_audio(const RecordingMeta& meta) {
  Waveform w = read_wav(meta.path);
  if (w.sample_rate != meta.sample_rate) {
    throw Error(meta.path.string() + ": sample-rate mismatch (file " + std::to_string(w.sample_rate) +
                " Hz, expected " + std::to_string(meta.sample_rate) + " Hz); resampling is not supported");
  }
  return w;
}

// ---------------------------------------------------------------- splits

std::map<std::string, Split> stratified_split(const std::map<std::string, ClassLabel>& patients,
                                              const std::array<double, 3>& fractions,
                                              std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(fractions.begin(), fractions.end()) < 0.0) {
    throw Error("split fractions must be non-negative and sum to 1");
  }
  std::map<std::string, Split> out;
  for (ClassLabel label : kAllLabels) {
    std::vector<std::string> group;
    for (const auto& [id, l] : patients) {
      if (l == label) group.push_back(id);
    }
    CounterRng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(to_index(label))));
    for (std::size_t i = group.size(); i > 1; --i) {
      std::swap(group[i - 1], group[rng.uniform_int(i)]);
    }
    const auto n = static_cast<double>(group.size());
    const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * n + 0.5));
    const auto n_test = static_cast<std::size_t>(std::floor(fractions[2] * n + 0.5));
    const std::size_t n_train = group.size() - std::min(group.size(), n_val + n_test);
    for (std::size_t i = 0; i < group.size(); ++i) {
      out[group[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Validation : Split::Test);
    }
  }
  return out;
}

// ---------------------------------------------------------------- synthesis

namespace {

/// Decaying tone burst used for S1/S2.
void add_heart_sound(std::vector<double>& x, int sr, double t0, double freq, double dur, double amp,
                     CounterRng& rng) {
  const double phase = rng.uniform() * 2.0 * std::numbers::pi;
  const auto start = static_cast<long>(t0 * sr);
  const auto len = static_cast<long>(dur * sr);
  for (long i = 0; i < len; ++i) {
    const long k = start + i;
    if (k < 0 || k >= static_cast<long>(x.size())) continue;
    const double t = static_cast<double>(i) / sr;
    const double env = std::sin(std::numbers::pi * i / len) * std::exp(-t / (0.35 * dur));
    x[static_cast<std::size_t>(k)] += amp * env * std::sin(2.0 * std::numbers::pi * freq * t + phase);
  }
}

/// Band-limited (150-400 Hz) noise burst with a Hann envelope.
void add_murmur(std::vector<double>& x, int sr, double t0, double t1, double amp, CounterRng& rng) {
  constexpr int kPartials = 24;
  std::array<double, kPartials> freq{}, phase{};
  for (int p = 0; p < kPartials; ++p) {
    freq[p] = 150.0 + 250.0 * rng.uniform();
    phase[p] = 2.0 * std::numbers::pi * rng.uniform();
  }
  const auto start = static_cast<long>(t0 * sr);
  const auto len = static_cast<long>((t1 - t0) * sr);
  if (len <= 1) return;
  const double norm = amp / std::sqrt(static_cast<double>(kPartials) / 2.0);
  for (long i = 0; i < len; ++i) {
    const long k = start + i;
    if (k < 0 || k >= static_cast<long>(x.size())) continue;
    const double t = static_cast<double>(i) / sr;
    const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (len - 1));
    double v = 0.0;
    for (int p = 0; p < kPartials; ++p) v += std::sin(2.0 * std::numbers::pi * freq[p] * t + phase[p]);
    x[static_cast<std::size_t>(k)] += norm * env * v;
  }
}

std::vector<double> synth_pcg(ClassLabel label, double duration_s, int sr, CounterRng rng) {
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sr));
  std::vector<double> x(n, 0.0);
  const double bpm = 65.0 + 45.0 * rng.uniform();
  const double period = 60.0 / bpm;
  const double systole = 0.3 * period;
  const double f1 = 45.0 + 25.0 * rng.uniform();
  const double f2 = 65.0 + 30.0 * rng.uniform();
  const double murmur_amp = 0.12 + 0.08 * rng.uniform();
  for (double t = rng.uniform() * period - period; t < duration_s; t += period) {
    add_heart_sound(x, sr, t, f1, 0.10, 0.5, rng);
    add_heart_sound(x, sr, t + systole, f2, 0.08, 0.35, rng);
    if (label == ClassLabel::Present) {
      add_murmur(x, sr, t + 0.09, t + systole - 0.01, murmur_amp, rng);
    }
  }
  const double noise = label == ClassLabel::Unknown ? 0.15 + 0.1 * rng.uniform() : 0.01;
  for (auto& v : x) v += noise * rng.normal();
  if (label == ClassLabel::Unknown) {
    // Handling artefacts: a few loud broadband clicks.
    const int clicks = 2 + static_cast<int>(rng.uniform_int(4));
    for (int c = 0; c < clicks; ++c) {
      const auto at = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
      for (std::size_t k = at; k < std::min(n, at + 40); ++k) x[k] += 0.6 * rng.normal();
    }
  }
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace

std::vector<SynthRecording> synth_recordings(const SynthConfig& cfg) {
  if (cfg.n_patients < 1) throw Error("synth: n_patients must be >= 1");
  const double mix_sum = cfg.class_mix[0] + cfg.class_mix[1] + cfg.class_mix[2];
  if (std::abs(mix_sum - 1.0) > 1e-9 || *std::min_element(cfg.class_mix.begin(), cfg.class_mix.end()) < 0.0) {
    throw Error("synth: class proportions must be non-negative and sum to 1");
  }
  if (!(cfg.min_duration_s > 0.0) || cfg.max_duration_s < cfg.min_duration_s) {
    throw Error("synth: invalid duration range");
  }

  // Largest-remainder apportionment gives exact label counts.
  const auto n = cfg.n_patients;
  std::array<std::size_t, kNumClasses> quota{};
  std::array<double, kNumClasses> remainder{};
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const double q = cfg.class_mix[c] * static_cast<double>(n);
    quota[c] = static_cast<std::size_t>(std::floor(q));
    remainder[c] = q - std::floor(q);
    assigned += quota[c];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      if (remainder[c] > remainder[best]) best = c;
    }
    ++quota[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  std::vector<ClassLabel> labels;
  for (std::size_t c = 0; c < kNumClasses; ++c) labels.insert(labels.end(), quota[c], label_from_index(static_cast<int>(c)));
  CounterRng shuffle(derive_seed(cfg.seed, "synth.labels"));
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[shuffle.uniform_int(i)]);

  std::map<std::string, ClassLabel> patient_labels;
  std::vector<std::string> ids;
  for (std::size_t p = 0; p < n; ++p) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "P%04zu", p + 1);
    ids.emplace_back(buf);
    patient_labels[ids.back()] = labels[p];
  }
  const auto splits = stratified_split(patient_labels, cfg.split_fractions, derive_seed(cfg.seed, "synth.split"));

  std::vector<SynthRecording> out;
  for (std::size_t p = 0; p < n; ++p) {
    CounterRng prng(derive_seed(cfg.seed, "synth.patient", p));
    std::array<Location, 4> locs{Location::AV, Location::PV, Location::MV, Location::TV};
    for (std::size_t i = locs.size(); i > 1; --i) std::swap(locs[i - 1], locs[prng.uniform_int(i)]);
    const std::size_t n_rec = 1 + prng.uniform_int(4);
    for (std::size_t r = 0; r < n_rec; ++r) {
      SynthRecording rec;
      rec.meta.patient_id = ids[p];
      rec.meta.location = locs[r];
      rec.meta.label = labels[p];
      rec.meta.split = splits.at(ids[p]);
      rec.meta.sample_rate = kExpectedSampleRate;
      rec.meta.path = fs::path("wav") / (ids[p] + "_" + std::string(to_string(locs[r])) + ".wav");
      const double dur = cfg.min_duration_s + (cfg.max_duration_s - cfg.min_duration_s) * prng.uniform();
      rec.audio.sample_rate = kExpectedSampleRate;
      rec.audio.samples = synth_pcg(labels[p], dur, kExpectedSampleRate, prng.split("rec" + std::to_string(r)));
      out.push_back(std::move(rec));
    }
  }
  return out;
}

DatasetManifest synth_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  auto recs = synth_recordings(cfg);
  fs::create_directories(out_dir / "wav");
  std::vector<RecordingMeta> entries;
  for (auto& r : recs) {
    r.meta.path = out_dir / r.meta.path;
    write_wav(r.meta.path, r.audio);
    entries.push_back(r.meta);
  }
  DatasetManifest manifest(std::move(entries));
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace hm::dataio
