#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hm/autodiff.hpp"
#include "hm/features.hpp"
#include "hm/model.hpp"
#include "hm/types.hpp"

namespace hm::training {

struct TrainConfig {
  std::array<double, kNumClasses> class_weights{1.0, 5.0, 3.0};  // absent, present, unknown
  double lr0 = 1e-4;
  double weight_decay = 1e-5;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 128;
  std::size_t epochs = 30;
  std::size_t plateau_patience = 5;
  double lr_factor = 0.5;
  /// Stop after this many optimizer steps (0 = no cap).
  std::size_t max_steps = 0;
  std::uint64_t seed = 7;

  void validate() const;
};

struct TrainLogEntry {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool is_best = false;
  std::size_t steps = 0;  // cumulative optimizer steps
};

std::string to_json_line(const TrainLogEntry& e);

/// Weighted mean of per-sample cross entropy:
///   sum_b w[y_b] * -log softmax(z_b)[y_b] / sum_b w[y_b].
ad::Tensor weighted_ce(const ad::Tensor& logits, std::span<const ClassLabel> labels,
                       const std::array<double, kNumClasses>& weights);

/// Same loss evaluated on plain logits.
double weighted_ce_value(std::span<const Logits> logits, std::span<const ClassLabel> labels,
                         const std::array<double, kNumClasses>& weights);

/// Adam with decoupled weight decay.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps, double weight_decay);
  void step(std::span<ad::Parameter> params, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LabeledSet {
  std::span<const features::FeatureMap> features;
  std::span<const ClassLabel> labels;
};

/// Plateau scheduler: the rate is multiplied by `factor` once `patience`
/// consecutive epochs pass without a new strict minimum.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, std::size_t patience, double factor);
  /// Records an epoch's validation loss; returns true if it is a new best.
  bool observe(double val_loss);
  double lr() const { return lr_; }
  double best() const { return best_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_;
  std::size_t since_best_ = 0;
};

struct TrainResult {
  model::Model best;
  std::vector<TrainLogEntry> log;
  std::size_t steps = 0;
};

/// Called after every epoch with the log entry and the current model.
using EpochCallback = std::function<void(const TrainLogEntry&, const model::Model&)>;

/// Deterministic given cfg.seed: segment shuffles and dropout masks are
/// drawn from streams derived from it.
TrainResult train(model::Model init, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Eval-mode loss over a whole set, in chunks of `batch`.
double evaluate_loss(const model::Model& m, const LabeledSet& set, const std::array<double, kNumClasses>& weights,
                     std::size_t batch);
/// Eval-mode argmax accuracy.
double evaluate_accuracy(const model::Model& m, const LabeledSet& set, std::size_t batch);

}  // namespace hm::training
