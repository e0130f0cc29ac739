#include "hm/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "hm/rng.hpp"

namespace hm::training {

using ad::Tensor;

void TrainConfig::validate() const {
  for (double w : class_weights) {
    if (!(w > 0.0)) throw Error("train config: class weights must be positive");
  }
  if (!(lr0 > 0.0)) throw Error("train config: lr0 must be positive");
  if (weight_decay < 0.0) throw Error("train config: weight_decay must be non-negative");
  if (batch == 0 || epochs == 0 || plateau_patience == 0) throw Error("train config: batch, epochs and patience must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw Error("train config: lr_factor must be in (0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
    throw Error("train config: invalid Adam hyperparameters");
  }
}

std::string to_json_line(const TrainLogEntry& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  j["val_loss"] = e.val_loss;
  j["lr"] = e.lr;
  j["is_best"] = e.is_best;
  j["steps"] = e.steps;
  return j.dump();
}

Tensor weighted_ce(const Tensor& logits, std::span<const ClassLabel> labels,
                   const std::array<double, kNumClasses>& weights) {
  if (logits.rank() != 2 || logits.dim(1) != kNumClasses || logits.dim(0) != labels.size()) {
    throw ad::ShapeError("weighted_ce: logits " + ad::shape_str(logits.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = labels.size();
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * kNumClasses);
  double total_w = 0.0, loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double mx = std::max({static_cast<double>(z[b * 3]), static_cast<double>(z[b * 3 + 1]),
                                static_cast<double>(z[b * 3 + 2])});
    double s = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) s += std::exp(static_cast<double>(z[b * 3 + c]) - mx);
    const double log_s = std::log(s) + mx;
    for (std::size_t c = 0; c < kNumClasses; ++c) (*probs)[b * 3 + c] = std::exp(static_cast<double>(z[b * 3 + c]) - log_s);
    const auto y = static_cast<std::size_t>(to_index(labels[b]));
    const double w = weights[y];
    total_w += w;
    loss += w * (log_s - static_cast<double>(z[b * 3 + y]));
  }
  loss /= total_w;
  std::vector<double> sample_w(B);
  std::vector<std::size_t> targets(B);
  for (std::size_t b = 0; b < B; ++b) {
    targets[b] = static_cast<std::size_t>(to_index(labels[b]));
    sample_w[b] = weights[targets[b]] / total_w;
  }
  return Tensor::make({}, {static_cast<ad::Real>(loss)}, {logits},
                      [probs, sample_w, targets](ad::Node& o) {
                        auto& g = o.parents[0]->grad;
                        const double up = static_cast<double>(o.grad[0]);
                        for (std::size_t b = 0; b < targets.size(); ++b) {
                          for (std::size_t c = 0; c < kNumClasses; ++c) {
                            const double d = (*probs)[b * 3 + c] - (c == targets[b] ? 1.0 : 0.0);
                            g[b * 3 + c] += static_cast<ad::Real>(up * sample_w[b] * d);
                          }
                        }
                      },
                      "weighted_ce");
}

double weighted_ce_value(std::span<const Logits> logits, std::span<const ClassLabel> labels,
                         const std::array<double, kNumClasses>& weights) {
  if (logits.size() != labels.size() || logits.empty()) throw Error("weighted_ce: size mismatch or empty input");
  double total_w = 0.0, loss = 0.0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    const auto& z = logits[b];
    const double mx = std::max({z[0], z[1], z[2]});
    const double log_s = std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx) + std::exp(z[2] - mx)) + mx;
    const auto y = static_cast<std::size_t>(to_index(labels[b]));
    total_w += weights[y];
    loss += weights[y] * (log_s - z[y]);
  }
  return loss / total_w;
}

// ---------------------------------------------------------------- Adam

Adam::Adam(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(std::span<ad::Parameter> params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw Error("adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].tensor.mutable_data();
    const auto grad = params[i].tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      const double w = static_cast<double>(value[k]);
      value[k] = static_cast<ad::Real>(w - lr * (update + weight_decay_ * w));
    }
  }
}

// ---------------------------------------------------------------- scheduler

PlateauScheduler::PlateauScheduler(double lr0, std::size_t patience, double factor)
    : lr_(lr0), patience_(patience), factor_(factor), best_(std::numeric_limits<double>::infinity()) {}

bool PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_) {
    best_ = val_loss;
    since_best_ = 0;
    return true;
  }
  if (++since_best_ >= patience_) {
    lr_ *= factor_;
    since_best_ = 0;
  }
  return false;
}

// ---------------------------------------------------------------- loop

namespace {

std::vector<Logits> eval_logits(const model::Model& m, std::span<const features::FeatureMap> x, std::size_t batch) {
  std::vector<Logits> out;
  out.reserve(x.size());
  for (std::size_t s = 0; s < x.size(); s += batch) {
    const auto chunk = m.predict_logits(x.subspan(s, std::min(batch, x.size() - s)), model::RunMode::eval());
    out.insert(out.end(), chunk.begin(), chunk.end());
  }
  return out;
}

}  // namespace

double evaluate_loss(const model::Model& m, const LabeledSet& set, const std::array<double, kNumClasses>& weights,
                     std::size_t batch) {
  const auto z = eval_logits(m, set.features, batch);
  return weighted_ce_value(z, set.labels, weights);
}

double evaluate_accuracy(const model::Model& m, const LabeledSet& set, std::size_t batch) {
  if (set.features.empty()) throw Error("evaluate_accuracy: empty set");
  const auto z = eval_logits(m, set.features, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < z.size(); ++i) correct += argmax(z[i]) == set.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(z.size());
}

TrainResult train(model::Model init, const LabeledSet& train_set, const LabeledSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.features.empty()) throw Error("train: empty train split");
  if (val_set.features.empty()) throw Error("train: empty validation split");
  if (train_set.features.size() != train_set.labels.size() || val_set.features.size() != val_set.labels.size()) {
    throw Error("train: features and labels differ in length");
  }

  model::Model m = std::move(init);
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(true);
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  PlateauScheduler sched(cfg.lr0, cfg.plateau_patience, cfg.lr_factor);
  TrainResult result{m, {}, 0};

  const std::size_t n = train_set.features.size();
  std::vector<std::size_t> order(n);
  std::vector<features::FeatureMap> batch_x;
  std::vector<ClassLabel> batch_y;
  std::size_t steps = 0;
  bool capped = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !capped; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle(derive_seed(cfg.seed, "shuffle", epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);

    const double lr = sched.lr();
    double loss_sum = 0.0, weight_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      if (cfg.max_steps != 0 && steps >= cfg.max_steps) {
        capped = true;
        break;
      }
      const std::size_t len = std::min(cfg.batch, n - start);
      batch_x.clear();
      batch_y.clear();
      std::vector<std::uint64_t> row_seeds(len);
      double batch_w = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        batch_x.push_back(train_set.features[order[start + j]]);
        batch_y.push_back(train_set.labels[order[start + j]]);
        row_seeds[j] = derive_seed(cfg.seed, "train.dropout", j);
        batch_w += cfg.class_weights[static_cast<std::size_t>(to_index(batch_y.back()))];
      }
      for (auto& p : m.parameters()) p.tensor.zero_grad();
      const Tensor logits = m.forward(model::to_batch(batch_x), model::RunMode::train(std::move(row_seeds), steps));
      const Tensor loss = weighted_ce(logits, batch_y, cfg.class_weights);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps) +
                    " (lr " + std::to_string(lr) + ")");
      }
      loss.backward();
      opt.step(m.parameters(), lr);
      ++steps;
      loss_sum += lv * batch_w;
      weight_sum += batch_w;
    }
    if (weight_sum == 0.0) break;  // step cap reached exactly at an epoch boundary

    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / weight_sum;
    entry.val_loss = evaluate_loss(m, val_set, cfg.class_weights, cfg.batch);
    if (!std::isfinite(entry.val_loss)) throw Error("train: non-finite validation loss at epoch " + std::to_string(epoch));
    entry.lr = lr;
    entry.steps = steps;
    entry.is_best = sched.observe(entry.val_loss);
    if (entry.is_best) result.best = m;
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry, m);
  }
  result.steps = steps;
  return result;
}

}  // namespace hm::training
