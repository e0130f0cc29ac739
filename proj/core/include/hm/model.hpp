#pragma once

// Parallel-attentive encoder: conv2d subsampling (x4 in time), a stack of
// two-branch layers (self-attention with relative position bias alongside a
// convolutional gating MLP), mean pooling and a linear class head.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hm/autodiff.hpp"
#include "hm/features.hpp"
#include "hm/types.hpp"

namespace hm::model {

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t head_dim = 128;
  std::size_t model_dim = 512;
  std::size_t conv_kernel = 31;
  std::size_t mlp_expand = 2;
  double dropout_p = 0.1;
  std::size_t n_classes = kNumClasses;
  std::size_t n_mels = 128;
  std::size_t subsample_channels = 32;
  std::size_t rel_clip = 64;

  void validate() const;
  std::uint64_t hash() const;
  bool operator==(const ModelConfig&) const = default;

  /// A small variant that trains in minutes on one CPU core.
  static ModelConfig desk();
};

/// Closed form: see the parameter inventory in model.cpp.
std::size_t parameter_count(const ModelConfig& cfg);
/// Time extent after subsampling: ceil(ceil(frames / 2) / 2).
std::size_t subsampled_length(std::size_t frames);

enum class Mode { Train, Eval, Mc };

/// Dropout policy for one forward pass. In Train and Mc modes every batch
/// row carries its own seed; the mask at a dropout site is drawn from
/// derive_seed(row_seed, site_name, step).
struct RunMode {
  Mode mode = Mode::Eval;
  std::vector<std::uint64_t> row_seeds;
  std::uint64_t step = 0;

  static RunMode eval() { return {}; }
  static RunMode train(std::vector<std::uint64_t> row_seeds, std::uint64_t step);
  /// Pass `pass` of an MC-dropout run: every row uses derive_seed(seed, "mc", pass).
  static RunMode mc(std::uint64_t seed, std::size_t batch, std::uint64_t pass);

  bool dropout_active() const { return mode != Mode::Eval; }
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t init_seed);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  std::span<ad::Parameter> parameters() { return params_; }
  std::span<const ad::Parameter> parameters() const { return params_; }
  const ad::Tensor& param(std::string_view name) const;
  ad::Tensor& param(std::string_view name);

  /// [B, n_mels, frames] -> [B, T', model_dim].
  ad::Tensor subsample(const ad::Tensor& feats) const;
  /// [B, T', D] -> [B, T', D].
  ad::Tensor encode_layer(const ad::Tensor& x, std::size_t layer, const RunMode& mode) const;
  /// Pre-softmax attention scores of one layer, [B, H, T', T'].
  ad::Tensor attention_logits(const ad::Tensor& x, std::size_t layer) const;
  /// [B, n_mels, frames] -> logits [B, n_classes].
  ad::Tensor forward(const ad::Tensor& feats, const RunMode& mode) const;

  /// Convenience inference without gradient recording.
  std::vector<Logits> predict_logits(std::span<const features::FeatureMap> maps, const RunMode& mode) const;

 private:
  struct LayerIndex {
    std::size_t attn_gamma, attn_beta, wq, bq, wk, bk, wv, bv, wo, bo, rel;
    std::size_t conv_gamma, conv_beta, up_w, up_b, dw_w, dw_b, down_w, down_b, merge_w, merge_b;
  };

  std::size_t add_param(std::string name, ad::Shape shape);
  const ad::Tensor& p(std::size_t i) const { return params_[i].tensor; }
  ad::Tensor drop(const ad::Tensor& x, std::string_view site, const RunMode& mode) const;
  void rebuild_index();

  ModelConfig cfg_;
  std::vector<ad::Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::size_t conv1_w_ = 0, conv1_b_ = 0, conv2_w_ = 0, conv2_b_ = 0, sub_w_ = 0, sub_b_ = 0;
  std::size_t final_gamma_ = 0, final_beta_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<LayerIndex> layers_;
  std::vector<std::string> site_names_;  // two dropout sites per layer
};

/// Stacks feature maps into a [B, mel_bins, frames] tensor.
ad::Tensor to_batch(std::span<const features::FeatureMap> maps);

/// Binary checkpoint: "HMCK", u32 version, config block, u64 config hash,
/// u32 parameter count, then per parameter (u32 name length, name bytes,
/// u32 rank, u32 extents, f32 values). Little endian.
void save_checkpoint(const std::filesystem::path& path, const Model& m);
Model load_checkpoint(const std::filesystem::path& path);
/// Loads a checkpoint and checks its stored config hash against `expected`.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace hm::model
