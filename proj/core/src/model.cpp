#include "hm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hm/rng.hpp"

namespace hm::model {

using ad::Tensor;

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0) throw Error("model config: layers, heads and head_dim must be positive");
  if (model_dim != heads * head_dim) {
    throw Error("model config: model_dim (" + std::to_string(model_dim) + ") must equal heads x head_dim (" +
                std::to_string(heads * head_dim) + ")");
  }
  if (conv_kernel % 2 == 0) throw Error("model config: conv_kernel must be odd");
  if (mlp_expand == 0 || (mlp_expand * model_dim) % 2 != 0) throw Error("model config: mlp_expand x model_dim must be even");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error("model config: dropout_p must be in [0, 1)");
  if (n_classes != kNumClasses) throw Error("model config: n_classes must be 3");
  if (n_mels == 0 || subsample_channels == 0) throw Error("model config: n_mels and subsample_channels must be positive");
}

std::uint64_t ModelConfig::hash() const {
  std::ostringstream s;
  s << "layers=" << layers << ";heads=" << heads << ";head_dim=" << head_dim << ";model_dim=" << model_dim
    << ";conv_kernel=" << conv_kernel << ";mlp_expand=" << mlp_expand << ";n_classes=" << n_classes
    << ";n_mels=" << n_mels << ";subsample_channels=" << subsample_channels << ";rel_clip=" << rel_clip;
  // dropout_p does not affect the parameter set and is excluded.
  return hash_name(s.str());
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 16;
  c.model_dim = 32;
  c.conv_kernel = 15;
  c.subsample_channels = 8;
  return c;
}

std::size_t subsampled_length(std::size_t frames) { return ((frames + 1) / 2 + 1) / 2; }

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t C = cfg.subsample_channels, F4 = subsampled_length(cfg.n_mels), D = cfg.model_dim;
  const std::size_t E = cfg.mlp_expand * D, half = E / 2, K = cfg.conv_kernel, R = 2 * cfg.rel_clip + 1;
  const std::size_t N = cfg.n_classes, H = cfg.heads;
  const std::size_t front = (9 * C + C) + (9 * C * C + C) + (C * F4 * D + D);
  const std::size_t per_layer = 2 * D                  // attention LayerNorm
                                + 4 * (D * D + D)      // q, k, v, out projections
                                + H * R                // relative position bias
                                + 2 * D                // conv-branch LayerNorm
                                + (D * E + E)          // up-projection
                                + (half * K + half)    // depthwise conv
                                + (half * D + D)       // down-projection
                                + (2 * D * D + D);     // merge
  const std::size_t tail = 2 * D + D * N + N;
  return front + cfg.layers * per_layer + tail;
}

RunMode RunMode::train(std::vector<std::uint64_t> row_seeds, std::uint64_t step) {
  return {Mode::Train, std::move(row_seeds), step};
}

RunMode RunMode::mc(std::uint64_t seed, std::size_t batch, std::uint64_t pass) {
  return {Mode::Mc, std::vector<std::uint64_t>(batch, derive_seed(seed, "mc", pass)), 0};
}

// ---------------------------------------------------------------- construction

namespace {

void fill_uniform(Tensor& t, double bound, std::uint64_t seed) {
  CounterRng rng(seed);
  for (auto& v : t.mutable_data()) v = static_cast<ad::Real>((2.0 * rng.uniform() - 1.0) * bound);
}

double xavier(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

std::size_t Model::add_param(std::string name, ad::Shape shape) {
  const std::size_t i = params_.size();
  by_name_.emplace(name, i);
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
  return i;
}

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t C = cfg_.subsample_channels, D = cfg_.model_dim, E = cfg_.mlp_expand * D, half = E / 2;
  const std::size_t F4 = subsampled_length(cfg_.n_mels);

  conv1_w_ = add_param("subsample.conv1.weight", {C, 1, 3, 3});
  conv1_b_ = add_param("subsample.conv1.bias", {C});
  conv2_w_ = add_param("subsample.conv2.weight", {C, C, 3, 3});
  conv2_b_ = add_param("subsample.conv2.bias", {C});
  sub_w_ = add_param("subsample.linear.weight", {C * F4, D});
  sub_b_ = add_param("subsample.linear.bias", {D});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerIndex li{};
    li.attn_gamma = add_param(pre + "attn_norm.gamma", {D});
    li.attn_beta = add_param(pre + "attn_norm.beta", {D});
    li.wq = add_param(pre + "attn.q.weight", {D, D});
    li.bq = add_param(pre + "attn.q.bias", {D});
    li.wk = add_param(pre + "attn.k.weight", {D, D});
    li.bk = add_param(pre + "attn.k.bias", {D});
    li.wv = add_param(pre + "attn.v.weight", {D, D});
    li.bv = add_param(pre + "attn.v.bias", {D});
    li.wo = add_param(pre + "attn.out.weight", {D, D});
    li.bo = add_param(pre + "attn.out.bias", {D});
    li.rel = add_param(pre + "attn.rel_bias", {cfg_.heads, 2 * cfg_.rel_clip + 1});
    li.conv_gamma = add_param(pre + "conv_norm.gamma", {D});
    li.conv_beta = add_param(pre + "conv_norm.beta", {D});
    li.up_w = add_param(pre + "cgmlp.up.weight", {D, E});
    li.up_b = add_param(pre + "cgmlp.up.bias", {E});
    li.dw_w = add_param(pre + "cgmlp.dwconv.weight", {half, cfg_.conv_kernel});
    li.dw_b = add_param(pre + "cgmlp.dwconv.bias", {half});
    li.down_w = add_param(pre + "cgmlp.down.weight", {half, D});
    li.down_b = add_param(pre + "cgmlp.down.bias", {D});
    li.merge_w = add_param(pre + "merge.weight", {2 * D, D});
    li.merge_b = add_param(pre + "merge.bias", {D});
    layers_.push_back(li);
  }
  final_gamma_ = add_param("final_norm.gamma", {D});
  final_beta_ = add_param("final_norm.beta", {D});
  head_w_ = add_param("head.weight", {D, cfg_.n_classes});
  head_b_ = add_param("head.bias", {cfg_.n_classes});
  rebuild_index();

  // Weights get Xavier-uniform draws, LayerNorm gains start at one, and
  // biases (including the relative-position table) start at zero.
  for (auto& prm : params_) {
    const auto& name = prm.name;
    const auto& s = prm.tensor.shape();
    const std::uint64_t seed = derive_seed(init_seed, name);
    const bool ends_gamma = name.ends_with(".gamma");
    if (ends_gamma) {
      for (auto& v : prm.tensor.mutable_data()) v = 1;
    } else if (name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("rel_bias")) {
      continue;
    } else if (name.ends_with("dwconv.weight")) {
      fill_uniform(prm.tensor, 1.0 / std::sqrt(static_cast<double>(s[1])), seed);
    } else if (s.size() == 4) {
      const std::size_t fan_in = s[1] * s[2] * s[3], fan_out = s[0] * s[2] * s[3];
      fill_uniform(prm.tensor, xavier(fan_in, fan_out), seed);
    } else {
      fill_uniform(prm.tensor, xavier(s[0], s[1]), seed);
    }
  }
}

void Model::rebuild_index() {
  site_names_.clear();
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    site_names_.push_back("layers." + std::to_string(l) + ".attn_dropout");
    site_names_.push_back("layers." + std::to_string(l) + ".conv_dropout");
  }
}

Model::Model(const Model& other)
    : cfg_(other.cfg_),
      by_name_(other.by_name_),
      conv1_w_(other.conv1_w_), conv1_b_(other.conv1_b_), conv2_w_(other.conv2_w_), conv2_b_(other.conv2_b_),
      sub_w_(other.sub_w_), sub_b_(other.sub_b_), final_gamma_(other.final_gamma_), final_beta_(other.final_beta_),
      head_w_(other.head_w_), head_b_(other.head_b_), layers_(other.layers_), site_names_(other.site_names_) {
  params_.reserve(other.params_.size());
  for (const auto& prm : other.params_) {
    Tensor t = prm.tensor.clone();
    t.set_requires_grad(prm.tensor.requires_grad());
    params_.push_back({prm.name, std::move(t)});
  }
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

const Tensor& Model::param(std::string_view name) const {
  const auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw Error("model: no parameter named " + std::string(name));
  return params_[it->second].tensor;
}

Tensor& Model::param(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const Model&>(*this).param(name));
}

// ---------------------------------------------------------------- forward

Tensor Model::drop(const Tensor& x, std::string_view site, const RunMode& mode) const {
  if (!mode.dropout_active() || cfg_.dropout_p == 0.0) return x;
  if (mode.row_seeds.size() != x.dim(0)) {
    throw Error("model: run mode carries " + std::to_string(mode.row_seeds.size()) + " row seeds for a batch of " +
                std::to_string(x.dim(0)));
  }
  std::vector<std::uint64_t> keys(mode.row_seeds.size());
  for (std::size_t b = 0; b < keys.size(); ++b) keys[b] = derive_seed(mode.row_seeds[b], site, mode.step);
  return ad::dropout(x, cfg_.dropout_p, keys);
}

Tensor Model::subsample(const Tensor& feats) const {
  if (feats.rank() != 3 || feats.dim(0) == 0) {
    throw ad::ShapeError("subsample: expected a non-empty [B, mel, frames] batch, got " + ad::shape_str(feats.shape()));
  }
  if (feats.dim(1) != cfg_.n_mels) {
    throw ad::ShapeError("subsample: expected " + std::to_string(cfg_.n_mels) + " mel bins, got " +
                         std::to_string(feats.dim(1)));
  }
  const std::size_t B = feats.dim(0);
  Tensor x = ad::reshape(feats, {B, 1, feats.dim(1), feats.dim(2)});
  x = ad::gelu(ad::conv2d(x, p(conv1_w_), p(conv1_b_), 2, 1));
  x = ad::conv2d(x, p(conv2_w_), p(conv2_b_), 2, 1);  // [B, C, F4, T']
  const std::size_t C = x.dim(1), F4 = x.dim(2), T = x.dim(3);
  x = ad::permute(x, {0, 3, 1, 2});  // [B, T', C, F4]
  x = ad::reshape(x, {B, T, C * F4});
  return ad::linear(x, p(sub_w_), p(sub_b_));
}

namespace {

/// [B, T, H*hd] -> [B, H, T, hd]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), T = x.dim(1), hd = x.dim(2) / heads;
  return ad::permute(ad::reshape(x, {B, T, heads, hd}), {0, 2, 1, 3});
}

}  // namespace

Tensor Model::attention_logits(const Tensor& x, std::size_t layer) const {
  const LayerIndex& li = layers_.at(layer);
  const Tensor h = ad::layer_norm(x, p(li.attn_gamma), p(li.attn_beta));
  const Tensor q = split_heads(ad::linear(h, p(li.wq), p(li.bq)), cfg_.heads);
  const Tensor k = split_heads(ad::linear(h, p(li.wk), p(li.bk)), cfg_.heads);
  const auto inv_sqrt = static_cast<ad::Real>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim)));
  const Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last2(k)), inv_sqrt);
  return ad::add(scores, ad::relative_position_bias(p(li.rel), x.dim(1), cfg_.rel_clip));
}

Tensor Model::encode_layer(const Tensor& x, std::size_t layer, const RunMode& mode) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.model_dim) {
    throw ad::ShapeError("encode_layer: expected [B, T, " + std::to_string(cfg_.model_dim) + "], got " +
                         ad::shape_str(x.shape()));
  }
  const LayerIndex& li = layers_.at(layer);
  const std::size_t B = x.dim(0), T = x.dim(1), D = cfg_.model_dim;

  // Global branch: multi-head self-attention with relative position bias.
  const Tensor h = ad::layer_norm(x, p(li.attn_gamma), p(li.attn_beta));
  const Tensor q = split_heads(ad::linear(h, p(li.wq), p(li.bq)), cfg_.heads);
  const Tensor k = split_heads(ad::linear(h, p(li.wk), p(li.bk)), cfg_.heads);
  const Tensor v = split_heads(ad::linear(h, p(li.wv), p(li.bv)), cfg_.heads);
  const auto inv_sqrt = static_cast<ad::Real>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim)));
  Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last2(k)), inv_sqrt);
  scores = ad::add(scores, ad::relative_position_bias(p(li.rel), T, cfg_.rel_clip));
  const Tensor ctx = ad::matmul(ad::softmax_last(scores), v);  // [B, H, T, hd]
  Tensor attn = ad::reshape(ad::permute(ctx, {0, 2, 1, 3}), {B, T, D});
  attn = drop(ad::linear(attn, p(li.wo), p(li.bo)), site_names_[2 * layer], mode);

  // Local branch: convolutional gating MLP.
  const std::size_t half = cfg_.mlp_expand * D / 2;
  const Tensor u = ad::gelu(ad::linear(ad::layer_norm(x, p(li.conv_gamma), p(li.conv_beta)), p(li.up_w), p(li.up_b)));
  const Tensor gate = ad::depthwise_conv1d(ad::slice_last(u, half, half), p(li.dw_w), p(li.dw_b));
  Tensor local = ad::mul(ad::slice_last(u, 0, half), gate);
  local = drop(ad::linear(local, p(li.down_w), p(li.down_b)), site_names_[2 * layer + 1], mode);

  const Tensor merged = ad::linear(ad::concat_last(attn, local), p(li.merge_w), p(li.merge_b));
  return ad::add(merged, x);
}

Tensor Model::forward(const Tensor& feats, const RunMode& mode) const {
  Tensor x = subsample(feats);
  for (std::size_t l = 0; l < cfg_.layers; ++l) x = encode_layer(x, l, mode);
  x = ad::layer_norm(x, p(final_gamma_), p(final_beta_));
  x = ad::mean_axis(x, 1);
  return ad::linear(x, p(head_w_), p(head_b_));
}

std::vector<Logits> Model::predict_logits(std::span<const features::FeatureMap> maps, const RunMode& mode) const {
  ad::NoGradGuard guard;
  const Tensor z = forward(to_batch(maps), mode);
  std::vector<Logits> out(maps.size());
  const auto v = z.data();
  for (std::size_t b = 0; b < out.size(); ++b) {
    for (std::size_t c = 0; c < kNumClasses; ++c) out[b][c] = static_cast<double>(v[b * kNumClasses + c]);
  }
  return out;
}

Tensor to_batch(std::span<const features::FeatureMap> maps) {
  if (maps.empty()) throw ad::ShapeError("to_batch: batch of zero segments");
  const std::size_t mel = maps[0].mel_bins, frames = maps[0].frames;
  std::vector<ad::Real> data;
  data.reserve(maps.size() * mel * frames);
  for (const auto& m : maps) {
    if (m.mel_bins != mel || m.frames != frames || m.values.size() != mel * frames) {
      throw ad::ShapeError("to_batch: feature maps must share one shape");
    }
    data.insert(data.end(), m.values.begin(), m.values.end());
  }
  return Tensor::from({maps.size(), mel, frames}, std::move(data));
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[4] = {'H', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  const auto& c = m.config();
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  for (std::size_t v : {c.layers, c.heads, c.head_dim, c.model_dim, c.conv_kernel, c.mlp_expand, c.n_classes,
                        c.n_mels, c.subsample_channels, c.rel_clip}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  put<double>(out, c.dropout_p);
  put<std::uint64_t>(out, c.hash());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.parameters().size()));
  for (const auto& prm : m.parameters()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.name.size()));
    out.write(prm.name.data(), static_cast<std::streamsize>(prm.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.tensor.rank()));
    for (std::size_t e : prm.tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (ad::Real v : prm.tensor.data()) put<float>(out, static_cast<float>(v));
  }
  if (!out) throw Error("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw Error("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  for (std::size_t* f : {&c.layers, &c.heads, &c.head_dim, &c.model_dim, &c.conv_kernel, &c.mlp_expand, &c.n_classes,
                         &c.n_mels, &c.subsample_channels, &c.rel_clip}) {
    *f = get<std::uint32_t>(in);
  }
  c.dropout_p = get<double>(in);
  const auto stored_hash = get<std::uint64_t>(in);
  if (stored_hash != c.hash()) throw Error("checkpoint: config hash does not match stored config");
  Model m(c, 0);
  const auto count = get<std::uint32_t>(in);
  if (count != m.parameters().size()) throw Error("checkpoint: parameter count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error("checkpoint: truncated file");
    Tensor& t = m.param(name);
    const auto rank = get<std::uint32_t>(in);
    ad::Shape shape(rank);
    for (auto& e : shape) e = get<std::uint32_t>(in);
    if (shape != t.shape()) {
      throw Error("checkpoint: shape mismatch for " + name + ": " + ad::shape_str(shape) + " vs " + ad::shape_str(t.shape()));
    }
    for (auto& v : t.mutable_data()) v = static_cast<ad::Real>(get<float>(in));
  }
  return m;
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Model m = load_checkpoint(path);
  if (m.config().hash() != expected.hash()) {
    throw Error("checkpoint/config mismatch: " + path.string() + " was trained with a different model config");
  }
  return m;
}

}  // namespace hm::model
