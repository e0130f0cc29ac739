#include "hm/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hm/calibration.hpp"
#include "hm/metrics.hpp"
#include "hm/pipeline.hpp"
#include "hm/rng.hpp"
#include "hm/uncertainty.hpp"

namespace hm::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kRunConfigFile = "run_config.txt";
constexpr const char* kSidecarLog = "hm.log";
constexpr const char* kBestPointer = "best.txt";
constexpr const char* kPassLogits = "pass_logits.csv";
constexpr const char* kPredictionDump = "predictions.csv";

fs::path required(const std::string& value, const char* key) {
  if (value.empty()) throw Error("missing required setting --" + std::string(key));
  return fs::path(value);
}

fs::path existing(const std::string& value, const char* key) {
  fs::path p = required(value, key);
  if (!fs::exists(p)) throw Error(std::string(key) + ": no such file or directory: " + p.string());
  return p;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out.flush()) throw Error("write failed: " + p.string());
  }
  if (read_text(p) != text) throw Error("verification failed for " + p.string());
}

void prepare_out(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

/// run_config.txt is deterministic; wall-clock time goes to the sidecar log only.
void finish(const fs::path& dir, const RunConfig& cfg, std::string_view command) {
  write_text(dir / kRunConfigFile, "# hm " + std::string(command) + "\n" + serialize(cfg));
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ofstream log(dir / kSidecarLog, std::ios::app);
  log << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << command << " ok\n";
}

std::map<std::string, std::string> recorded_config(const fs::path& dir) {
  std::map<std::string, std::string> m;
  const fs::path p = dir / kRunConfigFile;
  if (!fs::exists(p)) return m;
  for (auto& [k, v] : parse_config_text(read_text(p), p.string())) m[k] = v;
  return m;
}

/// Refuses to mix artifacts produced under different settings for `prefix` keys.
void check_recorded(const fs::path& dir, const RunConfig& cfg, std::string_view prefix) {
  const auto rec = recorded_config(dir);
  const auto cur = to_map(cfg);
  for (const auto& [k, v] : rec) {
    if (k.rfind(prefix, 0) != 0) continue;
    const auto it = cur.find(k);
    if (it != cur.end() && it->second != v) {
      throw Error("config conflict: " + k + "=" + it->second + " but " + dir.string() + " was produced with " + v);
    }
  }
}

features::MelSpectrogram make_mel(const RunConfig& cfg) { return features::MelSpectrogram(cfg.features); }

pipeline::SegmentSet load_checked(const dataio::DatasetManifest& man, Split split, const fs::path& cache,
                                  const RunConfig& cfg) {
  auto set = pipeline::load_split(man, split, cache);
  for (const auto& f : set.features) {
    if (f.mel_bins != cfg.model.n_mels) {
      throw Error("feature cache has " + std::to_string(f.mel_bins) + " Mel bins but model.n_mels=" +
                  std::to_string(cfg.model.n_mels));
    }
  }
  return set;
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (!fs::is_directory(p)) return p;
  const fs::path pointer = p / kBestPointer;
  if (!fs::exists(pointer)) throw Error("no " + std::string(kBestPointer) + " in " + p.string());
  std::string name = read_text(pointer);
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  return p / name;
}

std::vector<pipeline::SegmentPrediction> load_predictions(const std::string& value) {
  fs::path p = existing(value, "predictions");
  if (fs::is_directory(p)) p /= kPassLogits;
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  return pipeline::read_pass_logits(in);
}

struct Temperatures {
  double segment = 1.0;
  double patient = 1.0;
};

Temperatures load_temperatures(const std::string& value) {
  const fs::path p = existing(value, "calibration");
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw Error("calibration: " + p.string() + " is not valid JSON");
  }
  if (!j.contains("temperature") || !j["temperature"].is_number()) {
    throw Error("calibration: " + p.string() + " has no temperature");
  }
  Temperatures t;
  t.segment = j["temperature"].get<double>();
  t.patient = j.value("patient_temperature", t.segment);
  if (!(t.segment > 0.0) || !(t.patient > 0.0)) throw Error("calibration: temperatures must be positive");
  return t;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

calibration::CalibrationReport make_report(calibration::Level level, const pipeline::Evaluation& before,
                                           const pipeline::Evaluation& after, double t) {
  const bool seg = level == calibration::Level::Segment;
  const auto b = seg ? before.segment_confidences() : before.patient_confidences();
  const auto a = seg ? after.segment_confidences() : after.patient_confidences();
  calibration::CalibrationReport r;
  r.level = level;
  r.temperature = t;
  r.before = calibration::reliability_data(b);
  r.after = calibration::reliability_data(a);
  r.ece_before = calibration::ece(r.before);
  r.ece_after = calibration::ece(r.after);
  return r;
}

json level_metrics(const pipeline::Evaluation& ev) {
  json j;
  j["segment"] = json::parse(metrics::to_json(ev.segment_cm));
  j["record"] = json::parse(metrics::to_json(ev.record_cm));
  j["patient"] = json::parse(metrics::to_json(ev.patient_cm));
  return j;
}

}  // namespace

// ---------------------------------------------------------------- synth

void cmd_synth(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);
  const auto man = dataio::synth_dataset(cfg.synth, out);
  const auto check = dataio::load_manifest(out / "manifest.csv");
  if (check.size() != man.size()) throw Error("synth: manifest verification failed");
  for (const auto& e : check.entries()) (void)dataio::load_audio(e);
  for (Split s : {Split::Train, Split::Validation, Split::Test}) {
    const auto c = check.counts(s);
    log << "synth: " << to_string(s) << " " << c.patients << " patients, " << c.recordings << " recordings\n";
  }
  finish(out, cfg, "synth");
}

// ---------------------------------------------------------------- featurize

void cmd_featurize(const RunConfig& cfg, std::ostream& log) {
  const auto man = dataio::load_manifest(existing(cfg.manifest, "manifest"));
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);
  const auto mel = make_mel(cfg);
  const std::size_t n = pipeline::featurize_to_cache(man, out, mel, cfg.worker_threads());
  std::size_t reloaded = 0;
  for (const auto& e : man.entries()) {
    for (const auto& s : features::load_feature_cache(pipeline::cache_path(out, e))) {
      if (s.features.mel_bins != cfg.features.n_mels || s.features.frames != cfg.features.n_frames()) {
        throw Error("featurize: cache verification failed for " + e.path.string());
      }
      ++reloaded;
    }
  }
  if (reloaded != n) throw Error("featurize: cache verification failed");
  log << "featurize: " << man.size() << " recordings, " << n << " segments of " << cfg.features.n_mels << "x"
      << cfg.features.n_frames() << "\n";
  finish(out, cfg, "featurize");
}

// ---------------------------------------------------------------- train

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto man = dataio::load_manifest(existing(cfg.manifest, "manifest"));
  const fs::path cache = existing(cfg.cache_dir, "cache_dir");
  check_recorded(cache, cfg, "features.");
  const fs::path out = required(cfg.out, "out");
  const auto tr = load_checked(man, Split::Train, cache, cfg);
  const auto va = load_checked(man, Split::Validation, cache, cfg);
  if (tr.size() == 0) throw Error("train: empty train split");
  if (va.size() == 0) throw Error("train: empty validation split");
  prepare_out(out);

  log << "train: " << tr.size() << " train / " << va.size() << " validation segments, "
      << model::parameter_count(cfg.model) << " parameters\n";
  model::Model init(cfg.model, derive_seed(cfg.seed, "model.init"));
  std::string best_name;
  auto on_epoch = [&](const training::TrainLogEntry& e, const model::Model& m) {
    log << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss << " lr " << e.lr
        << (e.is_best ? " *" : "") << "\n";
    if (!e.is_best) return;
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03zu.hmck", e.epoch);
    best_name = name;
    model::save_checkpoint(out / best_name, m);
  };
  const auto res = training::train(init, {tr.features, tr.labels}, {va.features, va.labels}, cfg.train, on_epoch);
  if (best_name.empty()) throw Error("train: no epoch completed");

  std::string jsonl;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  for (const auto& e : res.log) {
    jsonl += training::to_json_line(e) + "\n";
    if (e.is_best) {
      best_epoch = e.epoch;
      best_val = e.val_loss;
    }
  }
  json summary;
  summary["summary"] = true;
  summary["epochs"] = res.log.size();
  summary["steps"] = res.steps;
  summary["best_epoch"] = best_epoch;
  summary["best_val_loss"] = best_val;
  summary["checkpoint"] = best_name;
  summary["config_hash"] = hex(cfg.model.hash());
  jsonl += summary.dump() + "\n";
  write_text(out / "train_log.jsonl", jsonl);
  write_text(out / kBestPointer, best_name + "\n");

  const auto reloaded = model::load_checkpoint(out / best_name, cfg.model);
  const auto a = reloaded.parameters();
  const auto b = res.best.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !std::ranges::equal(a[i].tensor.data(), b[i].tensor.data())) {
      throw Error("train: checkpoint verification failed for " + a[i].name);
    }
  }
  log << "train: best epoch " << best_epoch << " val_loss " << best_val << " -> " << (out / best_name).string() << "\n";
  finish(out, cfg, "train");
}

// ---------------------------------------------------------------- predict

void cmd_predict(const RunConfig& cfg, std::ostream& log) {
  const auto man = dataio::load_manifest(existing(cfg.manifest, "manifest"));
  const fs::path cache = existing(cfg.cache_dir, "cache_dir");
  check_recorded(cache, cfg, "features.");
  const fs::path ckpt = resolve_checkpoint(existing(cfg.checkpoint, "checkpoint"));
  const auto m = model::load_checkpoint(ckpt, cfg.model);
  const auto set = load_checked(man, cfg.split, cache, cfg);
  if (set.size() == 0) throw Error("predict: split '" + std::string(to_string(cfg.split)) + "' is empty");
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);

  const auto preds = pipeline::predict(m, set, cfg.mc_passes, derive_seed(cfg.seed, "mc"), cfg.mc_batch,
                                       cfg.worker_threads());
  std::ostringstream logits, dump;
  pipeline::write_pass_logits(logits, preds);
  pipeline::write_prediction_dump(dump, preds, 1.0);
  write_text(out / kPassLogits, logits.str());
  write_text(out / kPredictionDump, dump.str());

  std::istringstream back(logits.str());
  const auto reread = pipeline::read_pass_logits(back);
  if (reread.size() != preds.size()) throw Error("predict: pass-logit verification failed");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (reread[i].pass_logits != preds[i].pass_logits) throw Error("predict: pass-logit verification failed");
  }
  log << "predict: " << preds.size() << " " << to_string(cfg.split) << " segments x " << cfg.mc_passes
      << " passes -> " << out.string() << "\n";
  finish(out, cfg, "predict");
}

// ---------------------------------------------------------------- calibrate

void cmd_calibrate(const RunConfig& cfg, std::ostream& log) {
  const auto preds = load_predictions(cfg.predictions);
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);

  std::vector<std::vector<Logits>> passes;
  std::vector<ClassLabel> labels;
  for (const auto& p : preds) {
    passes.push_back(p.pass_logits);
    labels.push_back(p.info.truth);
  }
  const auto fit = calibration::fit_temperature_mc(passes, labels);
  if (fit.degenerate) log << "calibrate: warning: validation labels hold a single class, using T=1\n";
  double patient_t = fit.temperature;
  json patient_fit;
  if (cfg.refit_patient) {
    const auto pf = pipeline::fit_patient_temperature(preds);
    patient_t = pf.temperature;
    patient_fit = {{"temperature", pf.temperature}, {"loss_at_one", pf.nll_at_one}, {"loss_at_fit", pf.nll_at_fit},
                   {"iterations", pf.iterations}};
  }

  const auto before = pipeline::evaluate(preds, 1.0);
  const auto after_seg = pipeline::evaluate(preds, fit.temperature);
  const auto after_pat = cfg.refit_patient ? pipeline::evaluate(preds, patient_t) : after_seg;
  const auto seg = make_report(calibration::Level::Segment, before, after_seg, fit.temperature);
  const auto pat = make_report(calibration::Level::Patient, before, after_pat, patient_t);

  json j;
  j["temperature"] = fit.temperature;
  j["patient_temperature"] = patient_t;
  j["refit_patient"] = cfg.refit_patient;
  j["degenerate"] = fit.degenerate;
  j["nll_at_one"] = fit.nll_at_one;
  j["nll_at_fit"] = fit.nll_at_fit;
  j["iterations"] = fit.iterations;
  j["n_segments"] = preds.size();
  j["n_patients"] = before.patients.size();
  if (cfg.refit_patient) j["patient_fit"] = patient_fit;
  j["segment"] = json::parse(calibration::to_json(seg));
  j["patient"] = json::parse(calibration::to_json(pat));
  const fs::path file = out / "calibration.json";
  write_text(file, j.dump(2) + "\n");
  (void)load_temperatures(file.string());
  log << "calibrate: T=" << fit.temperature << " segment ECE " << seg.ece_before << " -> " << seg.ece_after
      << ", patient ECE " << pat.ece_before << " -> " << pat.ece_after << "\n";
  finish(out, cfg, "calibrate");
}

// ---------------------------------------------------------------- evaluate

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  const auto preds = load_predictions(cfg.predictions);
  const auto t = load_temperatures(cfg.calibration);
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);

  const auto before = pipeline::evaluate(preds, 1.0);
  const auto after = pipeline::evaluate(preds, t.segment);
  const auto after_pat = t.patient == t.segment ? after : pipeline::evaluate(preds, t.patient);

  json j;
  j["temperature"] = t.segment;
  j["patient_temperature"] = t.patient;
  json counts;
  counts["segments"] = before.segments.size();
  counts["records"] = before.records.size();
  counts["patients"] = before.patients.size();
  for (ClassLabel c : kAllLabels) {
    counts["patients_" + std::string(to_string(c))] = before.patient_cm.truth_total(c);
  }
  j["counts"] = counts;
  if (!cfg.manifest.empty()) {
    const auto man = dataio::load_manifest(existing(cfg.manifest, "manifest"));
    json splits;
    for (Split s : {Split::Train, Split::Validation, Split::Test}) {
      const auto c = man.counts(s);
      splits[std::string(to_string(s))] = {{"patients", c.patients}, {"recordings", c.recordings}};
    }
    j["manifest_counts"] = splits;
  }
  j["before"] = level_metrics(before);
  j["before"]["ece"] = {{"segment", calibration::ece(before.segment_confidences())},
                        {"patient", calibration::ece(before.patient_confidences())}};
  j["after"] = level_metrics(after);
  j["after"]["patient"] = json::parse(metrics::to_json(after_pat.patient_cm));
  j["after"]["ece"] = {{"segment", calibration::ece(after.segment_confidences())},
                       {"patient", calibration::ece(after_pat.patient_confidences())}};
  write_text(out / "metrics.json", j.dump(2) + "\n");

  std::ostringstream pd, pd_before;
  pipeline::write_patient_decisions(pd, after_pat);
  pipeline::write_patient_decisions(pd_before, before);
  write_text(out / "patient_decisions.csv", pd.str());
  write_text(out / "patient_decisions_uncalibrated.csv", pd_before.str());

  std::ostringstream sd;
  sd << "patient_id,recording,offset_s,label,confidence_uncalibrated,confidence_calibrated\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& info = preds[i].info;
    char buf[96];
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", before.segments[i].confidence, after.segments[i].confidence);
    sd << info.patient_id << ',' << info.recording << ',' << info.offset_s << ','
       << to_string(after.segments[i].predicted) << buf << '\n';
  }
  write_text(out / "segment_decisions.csv", sd.str());

  // Metrics recomputed from the written decision file must match the in-memory ones.
  std::istringstream back(pd.str());
  const auto rows = pipeline::read_patient_decisions(back);
  metrics::ConfusionMatrix3 cm;
  if (rows.size() != after_pat.patients.size()) throw Error("evaluate: patient decision verification failed");
  for (std::size_t i = 0; i < rows.size(); ++i) cm.add(rows[i].label, after_pat.patients[i].truth);
  if (!(cm == after_pat.patient_cm)) throw Error("evaluate: patient decision verification failed");

  log << "evaluate: patient weighted accuracy " << metrics::weighted_accuracy(after_pat.patient_cm) << ", macro-F1 "
      << metrics::macro_f1(after_pat.patient_cm) << " (" << before.patients.size() << " patients)\n";
  finish(out, cfg, "evaluate");
}

// ---------------------------------------------------------------- report

void cmd_report(const RunConfig& cfg, std::ostream& log) {
  const auto preds = load_predictions(cfg.predictions);
  const auto t = load_temperatures(cfg.calibration);
  const fs::path out = required(cfg.out, "out");
  prepare_out(out);

  const auto before = pipeline::evaluate(preds, 1.0);
  const auto after = pipeline::evaluate(preds, t.segment);
  const auto after_pat = t.patient == t.segment ? after : pipeline::evaluate(preds, t.patient);
  const auto seg = make_report(calibration::Level::Segment, before, after, t.segment);
  const auto pat = make_report(calibration::Level::Patient, before, after_pat, t.patient);
  for (const auto* r : {&seg, &pat}) {
    const std::string level(calibration::to_string(r->level));
    write_text(out / ("reliability_" + level + "_before.csv"), calibration::reliability_csv(r->before));
    write_text(out / ("reliability_" + level + "_after.csv"), calibration::reliability_csv(r->after));
    write_text(out / ("histogram_" + level + "_before.csv"), calibration::histogram_csv(r->before));
    write_text(out / ("histogram_" + level + "_after.csv"), calibration::histogram_csv(r->after));
  }
  log << "report: segment ECE " << seg.ece_before << " -> " << seg.ece_after << ", patient ECE " << pat.ece_before
      << " -> " << pat.ece_after << "\n";
  finish(out, cfg, "report");
}

}  // namespace hm::cli
