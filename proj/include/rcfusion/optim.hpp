// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcfusion/layers.hpp"

namespace rcf {

/// param <- param - lr * grad
template <Scalar T>
void sgd_step(std::span<T> param, std::span<const T> grad, T learning_rate) {
  if (param.size() != grad.size()) {
    throw ShapeError("sgd_step: parameter has " + std::to_string(param.size()) +
                     " values but gradient has " + std::to_string(grad.size()));
  }
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= learning_rate * grad[i];
}

struct RmspropConfig {
  double learning_rate = 1e-3;
  double alpha = 0.9;  // squared-gradient decay
  double momentum = 0.9;
  double weight_decay = 2e-4;
  double eps = 1e-8;
};

template <Scalar T>
struct RmspropSlot {
  std::vector<T> square_avg;
  std::vector<T> momentum_buf;

  explicit RmspropSlot(std::size_t n = 0) : square_avg(n, T(0)), momentum_buf(n, T(0)) {}
};

/// One RMSprop update with coupled weight decay and momentum on the
/// preconditioned step:
///   g   = grad + wd * param
///   s   = alpha * s + (1 - alpha) * g^2
///   m   = momentum * m + g / (sqrt(s) + eps)
///   param -= lr * m
template <Scalar T>
void rmsprop_step(RmspropSlot<T>& slot, const RmspropConfig& cfg, std::span<T> param,
                  std::span<const T> grad) {
  if (param.size() != grad.size() || slot.square_avg.size() != param.size()) {
    throw ShapeError("rmsprop_step: parameter, gradient and state sizes disagree");
  }
  const T lr = static_cast<T>(cfg.learning_rate);
  const T alpha = static_cast<T>(cfg.alpha);
  const T momentum = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    T& s = slot.square_avg[i];
    s = alpha * s + (T(1) - alpha) * g * g;
    T& m = slot.momentum_buf[i];
    m = momentum * m + g / (std::sqrt(s) + eps);
    param[i] -= lr * m;
  }
}

struct MaxNormConfig {
  double max_norm = 4.0;
};

/// Rescales the whole tensor onto the L2 ball of radius max_norm when it lies outside.
template <Scalar T>
void max_norm_constraint(std::span<T> param, const MaxNormConfig& cfg) {
  if (!(cfg.max_norm > 0.0)) throw ValueError("max_norm must be positive");
  double sq = 0.0;
  for (T v : param) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  // A rescaled tensor can come back an ulp or two outside the ball; leave it
  // alone so the constraint stays idempotent.
  const double slack = 8.0 * static_cast<double>(std::numeric_limits<T>::epsilon());
  if (norm <= cfg.max_norm * (1.0 + slack)) return;
  const T scale = static_cast<T>(cfg.max_norm / norm);
  for (auto& v : param) v *= scale;
}

/// RMSprop over a fixed, ordered parameter list, with the max-norm
/// constraint applied to weight tensors (rank >= 2) after every step.
template <Scalar T>
class Rmsprop {
 public:
  Rmsprop(ParamList<T> params, RmspropConfig cfg, std::optional<MaxNormConfig> max_norm = MaxNormConfig{})
      : params_(std::move(params)), cfg_(cfg), max_norm_(max_norm) {
    for (const auto& p : params_) slots_.emplace_back(p.tensor.size());
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    std::vector<T> zeros;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      std::span<const T> grad = t.grad_data();
      if (!t.has_grad()) {
        zeros.assign(t.size(), T(0));
        grad = zeros;
      }
      rmsprop_step(slots_[i], cfg_, t.mutable_data(), grad);
      if (max_norm_ && t.rank() >= 2) max_norm_constraint(t.mutable_data(), *max_norm_);
    }
  }

  const RmspropConfig& config() const { return cfg_; }
  const ParamList<T>& params() const { return params_; }

  /// square_avg / momentum buffers per parameter, plus a hyperparameter record.
  ParamList<T> state() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& shape = params_[i].tensor.shape();
      out.push_back({"square_avg/" + params_[i].name, Tensor<T>(shape, slots_[i].square_avg)});
      out.push_back({"momentum/" + params_[i].name, Tensor<T>(shape, slots_[i].momentum_buf)});
    }
    out.push_back({"hyper", Tensor<T>({5}, {static_cast<T>(cfg_.learning_rate), static_cast<T>(cfg_.alpha),
                                            static_cast<T>(cfg_.momentum), static_cast<T>(cfg_.weight_decay),
                                            static_cast<T>(cfg_.eps)})});
    return out;
  }

  void load_state(const ParamList<T>& state) {
    if (state.size() != 2 * params_.size() + 1) throw ConfigError("optimizer state size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& sq = state[2 * i];
      const auto& mo = state[2 * i + 1];
      if (sq.name != "square_avg/" + params_[i].name || mo.name != "momentum/" + params_[i].name ||
          sq.tensor.size() != slots_[i].square_avg.size() || mo.tensor.size() != slots_[i].momentum_buf.size()) {
        throw ConfigError("optimizer state does not match parameter '" + params_[i].name + "'");
      }
      slots_[i].square_avg.assign(sq.tensor.data().begin(), sq.tensor.data().end());
      slots_[i].momentum_buf.assign(mo.tensor.data().begin(), mo.tensor.data().end());
    }
  }

 private:
  ParamList<T> params_;
  RmspropConfig cfg_;
  std::optional<MaxNormConfig> max_norm_;
  std::vector<RmspropSlot<T>> slots_;
};

template <typename Model>
struct MultiStartResult {
  Model model;
  std::uint64_t seed;
  std::vector<double> scores;  // one per candidate, in seed order
};

/// Builds one candidate per seed, trains each for exactly one epoch and keeps
/// the best-scoring one. Ties go to the earliest (lowest) seed.
template <typename Model>
MultiStartResult<Model> multi_start_init(const std::function<Model(std::uint64_t)>& factory,
                                         std::vector<std::uint64_t> seeds,
                                         const std::function<void(Model&)>& train_one_epoch,
                                         const std::function<double(Model&)>& score) {
  if (seeds.empty()) throw ValueError("multi_start_init needs at least one start");
  std::sort(seeds.begin(), seeds.end());
  std::optional<Model> best;
  std::uint64_t best_seed = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<double> scores;
  for (auto seed : seeds) {
    Model candidate = factory(seed);
    train_one_epoch(candidate);
    const double s = score(candidate);
    scores.push_back(s);
    if (!best || s > best_score) {
      best.emplace(std::move(candidate));
      best_seed = seed;
      best_score = s;
    }
  }
  return {std::move(*best), best_seed, std::move(scores)};
}

}  // namespace rcf
