#include "hm/cli/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace hm::cli {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string fmt(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error("config: bad value for " + key + ": '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  std::string s = trim(raw);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw Error("config: bad boolean for " + key + ": '" + raw + "'");
}

template <std::size_t N>
std::string fmt_array(const std::array<double, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + fmt(a[i]);
  return s;
}

template <std::size_t N>
std::array<double, N> parse_array(const std::string& key, const std::string& raw) {
  std::array<double, N> a{};
  std::stringstream ss(raw);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == N) break;
    a[i++] = parse_number<double>(key, part);
  }
  if (i != N || std::getline(ss, part, ',')) {
    throw Error("config: " + key + " needs " + std::to_string(N) + " comma-separated values");
  }
  return a;
}

// Field binders keep the registry below to one line per key.
template <typename T>
KeySpec num(std::string name, std::string help, T RunConfig::*member) {
  return {name, "", std::move(help), [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
            else return std::to_string(c.*member);
          },
          [member, name](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(name, v); }};
}

template <typename S, typename T>
KeySpec num(std::string name, std::string help, S RunConfig::*sub, T S::*member) {
  return {name, "", std::move(help), [sub, member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*sub.*member);
            else return std::to_string(c.*sub.*member);
          },
          [sub, member, name](RunConfig& c, const std::string& v) { c.*sub.*member = parse_number<T>(name, v); }};
}

template <typename S, std::size_t N>
KeySpec arr(std::string name, std::string help, S RunConfig::*sub, std::array<double, N> S::*member) {
  return {name, "", std::move(help), [sub, member](const RunConfig& c) { return fmt_array(c.*sub.*member); },
          [sub, member, name](RunConfig& c, const std::string& v) { c.*sub.*member = parse_array<N>(name, v); }};
}

KeySpec path(std::string name, std::string help, std::string RunConfig::*member) {
  return {std::move(name), "", std::move(help), [member](const RunConfig& c) { return c.*member; },
          [member](RunConfig& c, const std::string& v) { c.*member = trim(v); }};
}

KeySpec with_alias(KeySpec k, std::string alias) {
  k.alias = std::move(alias);
  return k;
}

std::vector<KeySpec> build_keys() {
  using dataio::SynthConfig;
  using features::FeatureConfig;
  using model::ModelConfig;
  using training::TrainConfig;
  std::vector<KeySpec> k;
  k.push_back(num("seed", "master seed; every random stream is derived from it", &RunConfig::seed));
  k.push_back(num("threads", "worker threads for featurization and MC passes (0 = all cores)", &RunConfig::threads));

  k.push_back(with_alias(num("synth.patients", "synthetic cohort size", &RunConfig::synth, &SynthConfig::n_patients),
                         "patients"));
  k.push_back(arr("synth.class_mix", "label proportions absent,present,unknown", &RunConfig::synth,
                  &SynthConfig::class_mix));
  k.push_back(arr("synth.split_fractions", "patient fractions train,validation,test", &RunConfig::synth,
                  &SynthConfig::split_fractions));
  k.push_back(num("synth.min_duration_s", "shortest synthetic recording (s)", &RunConfig::synth,
                  &SynthConfig::min_duration_s));
  k.push_back(num("synth.max_duration_s", "longest synthetic recording (s)", &RunConfig::synth,
                  &SynthConfig::max_duration_s));

  k.push_back(num("features.sample_rate", "expected audio sample rate (Hz)", &RunConfig::features,
                  &FeatureConfig::sample_rate));
  k.push_back(num("features.window_s", "segment length (s)", &RunConfig::features, &FeatureConfig::window_s));
  k.push_back(num("features.hop_s", "segment hop (s)", &RunConfig::features, &FeatureConfig::hop_s));
  k.push_back(num("features.frame_length", "STFT frame length (samples)", &RunConfig::features,
                  &FeatureConfig::frame_length));
  k.push_back(num("features.frame_step", "STFT frame step (samples)", &RunConfig::features, &FeatureConfig::frame_step));
  k.push_back(num("features.fft_size", "FFT size", &RunConfig::features, &FeatureConfig::fft_size));
  k.push_back(num("features.n_mels", "Mel bands", &RunConfig::features, &FeatureConfig::n_mels));
  k.push_back(num("features.fmin", "lowest Mel edge (Hz)", &RunConfig::features, &FeatureConfig::fmin));
  k.push_back(num("features.fmax", "highest Mel edge (Hz)", &RunConfig::features, &FeatureConfig::fmax));
  k.push_back(num("features.log_eps", "floor added before the log", &RunConfig::features, &FeatureConfig::log_eps));
  k.push_back({"features.normalize", "", "per-map mean/variance normalization",
               [](const RunConfig& c) { return std::string(c.features.normalize ? "true" : "false"); },
               [](RunConfig& c, const std::string& v) { c.features.normalize = parse_bool("features.normalize", v); }});

  k.push_back(num("model.layers", "parallel-attentive layers", &RunConfig::model, &ModelConfig::layers));
  k.push_back(num("model.heads", "attention heads", &RunConfig::model, &ModelConfig::heads));
  k.push_back(num("model.head_dim", "dimension per head", &RunConfig::model, &ModelConfig::head_dim));
  k.push_back(num("model.model_dim", "model width (= heads * head_dim)", &RunConfig::model, &ModelConfig::model_dim));
  k.push_back(num("model.conv_kernel", "depthwise kernel size (odd)", &RunConfig::model, &ModelConfig::conv_kernel));
  k.push_back(num("model.mlp_expand", "conv-branch expansion ratio", &RunConfig::model, &ModelConfig::mlp_expand));
  k.push_back(num("model.dropout_p", "dropout probability", &RunConfig::model, &ModelConfig::dropout_p));
  k.push_back(num("model.n_mels", "input Mel bands", &RunConfig::model, &ModelConfig::n_mels));
  k.push_back(num("model.subsample_channels", "conv2d channels in the subsampling front end", &RunConfig::model,
                  &ModelConfig::subsample_channels));
  k.push_back(num("model.rel_clip", "relative position clip distance", &RunConfig::model, &ModelConfig::rel_clip));

  k.push_back(arr("train.class_weights", "loss weights absent,present,unknown", &RunConfig::train,
                  &TrainConfig::class_weights));
  k.push_back(num("train.lr0", "initial learning rate", &RunConfig::train, &TrainConfig::lr0));
  k.push_back(num("train.weight_decay", "decoupled weight decay", &RunConfig::train, &TrainConfig::weight_decay));
  k.push_back(num("train.beta1", "Adam beta1", &RunConfig::train, &TrainConfig::beta1));
  k.push_back(num("train.beta2", "Adam beta2", &RunConfig::train, &TrainConfig::beta2));
  k.push_back(num("train.adam_eps", "Adam epsilon", &RunConfig::train, &TrainConfig::adam_eps));
  k.push_back(num("train.batch", "segments per batch", &RunConfig::train, &TrainConfig::batch));
  k.push_back(num("train.epochs", "maximum epochs", &RunConfig::train, &TrainConfig::epochs));
  k.push_back(num("train.plateau_patience", "epochs without a new best before the rate is cut", &RunConfig::train,
                  &TrainConfig::plateau_patience));
  k.push_back(num("train.lr_factor", "learning-rate multiplier on plateau", &RunConfig::train,
                  &TrainConfig::lr_factor));
  k.push_back(num("train.max_steps", "optimizer step cap (0 = none)", &RunConfig::train, &TrainConfig::max_steps));

  k.push_back(num("mc.passes", "MC-dropout forward passes", &RunConfig::mc_passes));
  k.push_back(num("mc.batch", "segments per MC forward batch", &RunConfig::mc_batch));
  k.push_back({"split", "", "split used by predict (train, validation, test)",
               [](const RunConfig& c) { return std::string(to_string(c.split)); },
               [](RunConfig& c, const std::string& v) { c.split = parse_split(trim(v)); }});
  k.push_back({"calibration.refit_patient", "", "fit a separate temperature for patient-level confidence",
               [](const RunConfig& c) { return std::string(c.refit_patient ? "true" : "false"); },
               [](RunConfig& c, const std::string& v) {
                 c.refit_patient = parse_bool("calibration.refit_patient", v);
               }});

  k.push_back(path("manifest", "dataset manifest CSV", &RunConfig::manifest));
  k.push_back(path("cache_dir", "feature cache directory", &RunConfig::cache_dir));
  k.push_back(path("out", "output directory", &RunConfig::out));
  k.push_back(path("checkpoint", "checkpoint file, or a train output directory (uses its best entry)",
                   &RunConfig::checkpoint));
  k.push_back(path("predictions", "predict output directory", &RunConfig::predictions));
  k.push_back(path("calibration", "calibration.json written by calibrate", &RunConfig::calibration));
  return k;
}

}  // namespace

std::size_t RunConfig::worker_threads() const {
  if (threads > 0) return threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

void RunConfig::finalize() {
  synth.seed = seed;
  train.seed = seed;
  features.validate();
  model.validate();
  train.validate();
  if (model.n_mels != features.n_mels) {
    throw Error("config conflict: model.n_mels=" + std::to_string(model.n_mels) +
                " but features.n_mels=" + std::to_string(features.n_mels));
  }
  if (mc_passes == 0) throw Error("config: mc.passes must be >= 1");
  if (mc_batch == 0) throw Error("config: mc.batch must be >= 1");
}

const std::vector<KeySpec>& keys() {
  static const std::vector<KeySpec> k = build_keys();
  return k;
}

const KeySpec* find_key(std::string_view name) {
  for (const auto& k : keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

void apply(RunConfig& cfg, std::string_view key, const std::string& value) {
  const KeySpec* k = find_key(key);
  if (!k) throw Error("config: unknown key '" + std::string(key) + "'");
  k->set(cfg, value);
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text, std::string_view origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(std::string(origin) + ":" + std::to_string(n) + ": expected key=value");
    }
    out.emplace_back(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string env_name(std::string_view key) {
  std::string s = "HM_";
  for (char c : key) s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

void apply_env(RunConfig& cfg, const std::function<const char*(const char*)>& getenv_fn) {
  for (const auto& k : keys()) {
    if (const char* v = getenv_fn(env_name(k.name).c_str())) k.set(cfg, v);
  }
}

std::string serialize(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : keys()) s += k.name + "=" + k.get(cfg) + "\n";
  return s;
}

std::map<std::string, std::string> to_map(const RunConfig& cfg) {
  std::map<std::string, std::string> m;
  for (const auto& k : keys()) m[k.name] = k.get(cfg);
  return m;
}

}  // namespace hm::cli
