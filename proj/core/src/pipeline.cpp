#include "hm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "hm/rng.hpp"
#include "hm/uncertainty.hpp"

namespace hm::pipeline {

namespace fs = std::filesystem;

namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t k = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (k == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < k; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
}

SegmentInfo info_for(const dataio::RecordingMeta& meta, double offset) {
  return {meta.patient_id, meta.path.generic_string(), meta.location, offset, meta.label};
}

void append(SegmentSet& set, const dataio::RecordingMeta& meta, std::vector<features::CachedSegment>&& segs) {
  for (auto& s : segs) {
    set.features.push_back(std::move(s.features));
    set.labels.push_back(meta.label);
    set.info.push_back(info_for(meta, s.offset_s));
  }
}

std::string num(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

std::vector<std::string> fields_of(const std::string& line) {
  std::vector<std::string> out;
  std::string f;
  std::istringstream ss(line);
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- features

SegmentSet featurize_split(const dataio::DatasetManifest& manifest, Split split, const features::MelSpectrogram& mel,
                           std::size_t threads) {
  const auto metas = manifest.subset(split);
  std::vector<std::vector<features::CachedSegment>> per(metas.size());
  parallel_for(metas.size(), threads, [&](std::size_t i) { per[i] = features::featurize_recording(metas[i], mel); });
  SegmentSet set;
  for (std::size_t i = 0; i < metas.size(); ++i) append(set, metas[i], std::move(per[i]));
  return set;
}

fs::path cache_path(const fs::path& cache_dir, const dataio::RecordingMeta& meta) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(hash_name(meta.patient_id + "|" + meta.path.generic_string())));
  return cache_dir / (meta.path.stem().string() + "_" + std::string(hex, 8) + ".hmfc");
}

std::size_t featurize_to_cache(const dataio::DatasetManifest& manifest, const fs::path& cache_dir,
                               const features::MelSpectrogram& mel, std::size_t threads) {
  fs::create_directories(cache_dir);
  const auto& metas = manifest.entries();
  std::vector<std::size_t> counts(metas.size());
  parallel_for(metas.size(), threads, [&](std::size_t i) {
    const auto segs = features::featurize_recording(metas[i], mel);
    features::save_feature_cache(cache_path(cache_dir, metas[i]), segs);
    counts[i] = segs.size();
  });
  std::size_t total = 0;
  for (auto c : counts) total += c;
  return total;
}

SegmentSet load_split(const dataio::DatasetManifest& manifest, Split split, const fs::path& cache_dir) {
  SegmentSet set;
  for (const auto& meta : manifest.subset(split)) {
    const fs::path p = cache_path(cache_dir, meta);
    if (!fs::exists(p)) throw Error("missing feature cache for " + meta.path.string() + " (expected " + p.string() + ")");
    append(set, meta, features::load_feature_cache(p));
  }
  return set;
}

// ---------------------------------------------------------------- prediction

std::vector<SegmentPrediction> predict(const model::Model& m, const SegmentSet& set, std::size_t passes,
                                       std::uint64_t seed, std::size_t batch, std::size_t threads) {
  auto logits = uncertainty::mc_logits(m, set.features, passes, seed, batch, threads);
  std::vector<SegmentPrediction> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    out[i].info = set.info[i];
    out[i].pass_logits = std::move(logits[i]);
  }
  return out;
}

// ---------------------------------------------------------------- decisions

std::vector<calibration::ConfidenceSample> Evaluation::segment_confidences() const {
  std::vector<calibration::ConfidenceSample> out;
  out.reserve(segments.size());
  for (const auto& s : segments) out.push_back({s.confidence, s.predicted == s.truth});
  return out;
}

std::vector<calibration::ConfidenceSample> Evaluation::patient_confidences() const {
  std::vector<calibration::ConfidenceSample> out;
  out.reserve(patients.size());
  for (const auto& p : patients) out.push_back({p.decision.confidence, p.decision.label == p.truth});
  return out;
}

Evaluation evaluate(std::span<const SegmentPrediction> preds, double temperature) {
  if (preds.empty()) throw Error("evaluate: no predictions");
  Evaluation ev;
  ev.temperature = temperature;
  ev.segments.reserve(preds.size());

  std::map<std::pair<std::string, std::string>, std::size_t> record_of;
  std::map<std::string, std::size_t> patient_of;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const auto mc = uncertainty::summarize(p.pass_logits, temperature);
    SegmentOutcome s;
    s.prob = mc.mean;
    s.predicted = argmax(mc.mean);
    s.truth = p.info.truth;
    s.confidence = mc.mean[static_cast<std::size_t>(to_index(s.predicted))];
    s.entropy = mc.entropy;
    ev.segments.push_back(s);
    ev.segment_cm.add(s.predicted, s.truth);

    const auto key = std::make_pair(p.info.patient_id, p.info.recording);
    auto [rit, new_record] = record_of.emplace(key, ev.records.size());
    if (new_record) {
      RecordOutcome r;
      r.patient_id = p.info.patient_id;
      r.recording = p.info.recording;
      r.truth = p.info.truth;
      ev.records.push_back(std::move(r));
      auto [pit, new_patient] = patient_of.emplace(p.info.patient_id, ev.patients.size());
      if (new_patient) {
        PatientOutcome po;
        po.patient_id = p.info.patient_id;
        po.truth = p.info.truth;
        ev.patients.push_back(std::move(po));
      }
      ev.patients[pit->second].records.push_back(rit->second);
    }
    ev.records[rit->second].segments.push_back(i);
  }

  for (auto& r : ev.records) {
    std::vector<aggregation::Scored> scored;
    for (std::size_t i : r.segments) scored.push_back({ev.segments[i].predicted, ev.segments[i].confidence});
    r.decision = aggregation::decide_record(scored);
    double h = 0.0;
    for (std::size_t k : r.decision.contributing_segments) h += ev.segments[r.segments[k]].entropy;
    r.entropy_mean = h / static_cast<double>(r.decision.contributing_segments.size());
    ev.record_cm.add(r.decision.label, r.truth);
  }
  for (auto& p : ev.patients) {
    std::vector<aggregation::RecordDecision> decisions;
    for (std::size_t r : p.records) decisions.push_back(ev.records[r].decision);
    p.decision = aggregation::decide_patient(decisions);
    double h = 0.0;
    std::size_t n = 0;
    for (std::size_t k : p.decision.contributing_records) {
      const auto& rec = ev.records[p.records[k]];
      for (std::size_t s : rec.decision.contributing_segments) {
        h += ev.segments[rec.segments[s]].entropy;
        ++n;
      }
    }
    p.entropy_mean = h / static_cast<double>(n);
    ev.patient_cm.add(p.decision.label, p.truth);
  }
  return ev;
}

calibration::TemperatureFit fit_patient_temperature(std::span<const SegmentPrediction> preds) {
  return calibration::minimize_temperature([&](double t) {
    const auto ev = evaluate(preds, t);
    double loss = 0.0;
    for (const auto& s : ev.patient_confidences()) {
      const double c = std::clamp(s.confidence, 1e-12, 1.0 - 1e-12);
      loss -= s.correct ? std::log(c) : std::log(1.0 - c);
    }
    return loss / static_cast<double>(ev.patients.size());
  });
}

// ---------------------------------------------------------------- files

void write_prediction_dump(std::ostream& out, std::span<const SegmentPrediction> preds, double temperature) {
  out << "patient_id,recording,offset_s,p_absent,p_present,p_unknown,entropy,label\n";
  for (const auto& p : preds) {
    const auto mc = uncertainty::summarize(p.pass_logits, temperature);
    out << p.info.patient_id << ',' << p.info.recording << ',' << num(p.info.offset_s) << ',' << num(mc.mean[0]) << ','
        << num(mc.mean[1]) << ',' << num(mc.mean[2]) << ',' << num(mc.entropy) << ',' << to_string(argmax(mc.mean))
        << '\n';
  }
}

void write_pass_logits(std::ostream& out, std::span<const SegmentPrediction> preds) {
  out << "patient_id,location,recording,offset_s,truth,pass,z_absent,z_present,z_unknown\n";
  for (const auto& p : preds) {
    for (std::size_t k = 0; k < p.pass_logits.size(); ++k) {
      const auto& z = p.pass_logits[k];
      out << p.info.patient_id << ',' << to_string(p.info.location) << ',' << p.info.recording << ','
          << num(p.info.offset_s) << ',' << to_string(p.info.truth) << ',' << k << ',' << num(z[0]) << ','
          << num(z[1]) << ',' << num(z[2]) << '\n';
    }
  }
}

std::vector<SegmentPrediction> read_pass_logits(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line.rfind("patient_id,location,recording,offset_s,truth,pass", 0) != 0) {
    throw Error("pass logits: missing header");
  }
  std::vector<SegmentPrediction> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = fields_of(line);
    if (f.size() != 9) throw Error("pass logits line " + std::to_string(line_no) + ": expected 9 fields");
    const auto pass = static_cast<std::size_t>(parse_double(f[5], line_no));
    if (pass == 0) {
      SegmentPrediction p;
      p.info = {f[0], f[2], parse_location(f[1]), parse_double(f[3], line_no), parse_label(f[4])};
      out.push_back(std::move(p));
    } else if (out.empty() || out.back().pass_logits.size() != pass) {
      throw Error("pass logits line " + std::to_string(line_no) + ": passes out of order");
    }
    out.back().pass_logits.push_back({parse_double(f[6], line_no), parse_double(f[7], line_no), parse_double(f[8], line_no)});
  }
  if (out.empty()) throw Error("pass logits: no rows");
  return out;
}

void write_patient_decisions(std::ostream& out, const Evaluation& ev) {
  out << "patient_id,label,confidence,entropy_mean\n";
  for (const auto& p : ev.patients) {
    out << p.patient_id << ',' << to_string(p.decision.label) << ',' << num(p.decision.confidence) << ','
        << num(p.entropy_mean) << '\n';
  }
}

std::vector<PatientRow> read_patient_decisions(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line.rfind("patient_id,label,confidence,entropy_mean", 0) != 0) {
    throw Error("patient decisions: missing header");
  }
  std::vector<PatientRow> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = fields_of(line);
    if (f.size() != 4) throw Error("patient decisions line " + std::to_string(line_no) + ": expected 4 fields");
    out.push_back({f[0], parse_label(f[1]), parse_double(f[2], line_no), parse_double(f[3], line_no)});
  }
  return out;
}

}  // namespace hm::pipeline
