// SPDX-License-Identifier: Apache-2.0
//
// Recurrent convolutional fusion of an RGB and a depth stream.
//
// Each stream is a residual backbone exposing five taps. For the selected
// tap range, every tap is mapped into a common pd-dimensional space by a
// projection block, the RGB and depth projections are concatenated, and the
// resulting sequence (lowest tap first) is folded by a single GRU layer.
// A linear classifier on the final hidden state produces the logits.
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcfusion/layers.hpp"

namespace rcf {

/// Which streams contribute features. Masked streams feed zeros to the fusion
/// and are not evaluated.
enum class ModalityMask { Both, RgbOnly, DepthOnly };

struct ModelConfig {
  std::size_t tap_first = 3;
  std::size_t tap_last = 5;
  bool pooled_output = false;  // use the globally pooled final output as the only step
  std::size_t pd = 512;
  std::size_t mn = 50;
  std::size_t num_classes = 2;
  double lambda_base = 1e-4;
  double lambda_decay = 0.5;
  std::size_t lambda_zero_above = 4;
  ModalityMask modality = ModalityMask::Both;
  BackboneConfig backbone = BackboneConfig::desk_scale();

  std::size_t sequence_length() const { return pooled_output ? 1 : tap_last - tap_first + 1; }

  void validate() const {
    if (tap_first < 1 || tap_last > 5 || tap_first > tap_last) {
      throw ConfigError("tap range must satisfy 1 <= tap_first <= tap_last <= 5, got " +
                        std::to_string(tap_first) + ".." + std::to_string(tap_last));
    }
    if (pooled_output && (tap_first != 5 || tap_last != 5)) {
      throw ConfigError("pooled_output requires tap_first = tap_last = 5");
    }
    if (pd == 0 || mn == 0 || num_classes == 0) throw ConfigError("pd, mn and num_classes must be positive");
    if (lambda_base < 0.0) throw ConfigError("lambda_base must be >= 0");
    if (!(lambda_decay > 0.0 && lambda_decay <= 1.0)) throw ConfigError("lambda_decay must be in (0, 1]");
    backbone.validate();
  }
};

/// lambda_i = base * decay^(i - tap_first) for stages up to lambda_zero_above, 0 beyond.
inline std::vector<double> lambda_schedule(const ModelConfig& config) {
  std::vector<double> out;
  if (config.pooled_output) return {0.0};
  for (std::size_t i = config.tap_first; i <= config.tap_last; ++i) {
    out.push_back(i <= config.lambda_zero_above
                      ? config.lambda_base *
                            std::pow(config.lambda_decay, static_cast<double>(i - config.tap_first))
                      : 0.0);
  }
  return out;
}

/// conv 7x7 (pd filters, same padding) -> ReLU -> conv 1x1 (pd) -> ReLU -> global max pool.
template <Scalar T>
struct ProjectionBlock {
  Conv2dParams<T> spatial;
  Conv2dParams<T> depthwise;

  static ProjectionBlock make(std::size_t in_channels, std::size_t pd, SeedSequence& seeds) {
    return {Conv2dParams<T>::make(in_channels, pd, 7, 1, 3, true, seeds),
            Conv2dParams<T>::make(pd, pd, 1, 1, 0, true, seeds)};
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    spatial.parameters(prefix + ".spatial", out);
    depthwise.parameters(prefix + ".pointwise", out);
  }
};

template <Scalar T>
Tensor<T> projection_block_forward(const ProjectionBlock<T>& block, const Tensor<T>& features) {
  auto h = relu(block.spatial.forward(features));
  h = relu(block.depthwise.forward(h));
  return global_max_pool(h);
}

/// [p_rgb ; p_d] along the feature axis.
template <Scalar T>
Tensor<T> concat_modalities(const Tensor<T>& rgb, const Tensor<T>& depth) {
  if (rgb.shape() != depth.shape() || rgb.rank() != 2) {
    throw ShapeError("concat_modalities: " + shape_str(rgb.shape()) + " vs " +
                     shape_str(depth.shape()));
  }
  return concat<T>({rgb, depth}, 1);
}

template <Scalar T>
struct FusionOutputs {
  std::vector<Tensor<T>> projected_rgb;    // N x pd per step
  std::vector<Tensor<T>> projected_depth;  // N x pd per step
  std::vector<Tensor<T>> fused_sequence;   // N x 2pd per step
  Tensor<T> hidden;                        // final GRU state, N x mn
  Tensor<T> logits;                        // N x K
  Tensor<T> probabilities;                 // softmax(logits)
};

template <Scalar T>
class FusionModel {
 public:
  FusionModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    SeedSequence seeds(seed);
    rgb_ = std::make_unique<Backbone<T>>(config_.backbone, seeds);
    depth_ = std::make_unique<Backbone<T>>(config_.backbone, seeds);
    for (std::size_t tap : taps()) {
      const std::size_t channels = config_.pooled_output ? config_.backbone.stages.back().out_channels
                                                         : config_.backbone.tap_channels(tap);
      proj_rgb_.push_back(ProjectionBlock<T>::make(channels, config_.pd, seeds));
      proj_depth_.push_back(ProjectionBlock<T>::make(channels, config_.pd, seeds));
    }
    gru_ = GruParams<T>::make(2 * config_.pd, config_.mn, seeds);
    classifier_ = LinearParams<T>::make(config_.mn, config_.num_classes, seeds);
  }

  FusionModel(FusionModel&&) noexcept = default;
  FusionModel& operator=(FusionModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  /// Tap stages feeding the GRU, ascending.
  std::vector<std::size_t> taps() const {
    std::vector<std::size_t> out;
    for (std::size_t i = config_.tap_first; i <= config_.tap_last; ++i) out.push_back(i);
    return out;
  }

  FusionOutputs<T> forward(const Tensor<T>& rgb, const Tensor<T>& depth, bool training) {
    if (rgb.rank() != 4 || depth.rank() != 4 || rgb.dim(0) != depth.dim(0) ||
        rgb.dim(2) != depth.dim(2) || rgb.dim(3) != depth.dim(3)) {
      throw ShapeError("fusion: RGB " + shape_str(rgb.shape()) + " and depth " +
                       shape_str(depth.shape()) + " must share N, H and W");
    }
    const std::size_t N = rgb.dim(0);
    FusionOutputs<T> out;
    out.projected_rgb = project_stream(*rgb_, proj_rgb_, rgb, training, ModalityMask::DepthOnly);
    out.projected_depth = project_stream(*depth_, proj_depth_, depth, training, ModalityMask::RgbOnly);
    for (std::size_t i = 0; i < out.projected_rgb.size(); ++i)
      out.fused_sequence.push_back(concat_modalities(out.projected_rgb[i], out.projected_depth[i]));
    out.hidden = gru_sequence(gru_, out.fused_sequence, Tensor<T>::zeros({N, config_.mn}));
    out.logits = linear_forward(classifier_, out.hidden);
    out.probabilities = softmax(out.logits);
    return out;
  }

  void parameters(ParamList<T>& out) const {
    rgb_->parameters("rgb", out);
    depth_->parameters("depth", out);
    const auto tap_ids = taps();
    for (std::size_t i = 0; i < tap_ids.size(); ++i) {
      const std::string suffix = config_.pooled_output ? "output" : "tap" + std::to_string(tap_ids[i]);
      proj_rgb_[i].parameters("proj_rgb." + suffix, out);
      proj_depth_[i].parameters("proj_depth." + suffix, out);
    }
    gru_.parameters("gru", out);
    classifier_.parameters("classifier", out);
  }
  ParamList<T> parameters() const {
    ParamList<T> out;
    parameters(out);
    return out;
  }
  ParamList<T> buffers() const {
    ParamList<T> out;
    rgb_->buffers("rgb", out);
    depth_->buffers("depth", out);
    return out;
  }
  std::vector<BatchNormParams<T>*> batch_norms() {
    std::vector<BatchNormParams<T>*> out;
    rgb_->batch_norms(out);
    depth_->batch_norms(out);
    return out;
  }
  /// Parameters followed by buffers: everything a checkpoint stores.
  ParamList<T> state() const {
    auto out = parameters();
    auto b = buffers();
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  GruParams<T>& gru() { return gru_; }
  LinearParams<T>& classifier() { return classifier_; }
  Backbone<T>& rgb_backbone() { return *rgb_; }
  Backbone<T>& depth_backbone() { return *depth_; }
  ProjectionBlock<T>& rgb_projection(std::size_t step) { return proj_rgb_.at(step); }
  ProjectionBlock<T>& depth_projection(std::size_t step) { return proj_depth_.at(step); }

 private:
  std::vector<Tensor<T>> project_stream(Backbone<T>& backbone,
                                        const std::vector<ProjectionBlock<T>>& blocks,
                                        const Tensor<T>& input, bool training,
                                        ModalityMask disabled_by) {
    std::vector<Tensor<T>> out;
    const std::size_t N = input.dim(0);
    if (config_.modality == disabled_by) {
      for (std::size_t i = 0; i < blocks.size(); ++i) out.push_back(Tensor<T>::zeros({N, config_.pd}));
      return out;
    }
    auto features = backbone.forward(input, training);
    if (config_.pooled_output) {
      const auto& pooled = features.output;
      out.push_back(projection_block_forward(blocks[0], reshape(pooled, {N, pooled.dim(1), 1, 1})));
      return out;
    }
    const auto tap_ids = taps();
    for (std::size_t i = 0; i < tap_ids.size(); ++i)
      out.push_back(projection_block_forward(blocks[i], features.taps[tap_ids[i] - 1]));
    return out;
  }

  ModelConfig config_;
  std::unique_ptr<Backbone<T>> rgb_;
  std::unique_ptr<Backbone<T>> depth_;
  std::vector<ProjectionBlock<T>> proj_rgb_;
  std::vector<ProjectionBlock<T>> proj_depth_;
  GruParams<T> gru_;
  LinearParams<T> classifier_;
};

// ---------------------------------------------------------------------------
// Losses

/// Batch mean of -log p[label] on probability rows.
template <Scalar T>
Tensor<T> classification_loss(const Tensor<T>& probabilities, std::span<const std::size_t> labels) {
  return nll_from_probabilities(probabilities, labels);
}

/// Same quantity computed from logits through a fused log-softmax.
template <Scalar T>
Tensor<T> classification_loss_from_logits(const Tensor<T>& logits,
                                          std::span<const std::size_t> labels) {
  return cross_entropy(logits, labels);
}

/// sum_i lambda_i * ||P_rgb_i^T P_d_i||_F^2 / N
template <Scalar T>
Tensor<T> orthogonality_loss(const std::vector<Tensor<T>>& projected_rgb,
                             const std::vector<Tensor<T>>& projected_depth,
                             std::span<const double> lambdas) {
  if (projected_rgb.size() != projected_depth.size() || projected_rgb.size() != lambdas.size()) {
    throw ShapeError("orthogonality_loss: " + std::to_string(projected_rgb.size()) + " RGB, " +
                     std::to_string(projected_depth.size()) + " depth feature sets and " +
                     std::to_string(lambdas.size()) + " weights");
  }
  std::optional<Tensor<T>> total;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const auto& a = projected_rgb[i];
    const auto& b = projected_depth[i];
    if (a.shape() != b.shape() || a.rank() != 2) {
      throw ShapeError("orthogonality_loss: feature shapes " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    if (lambdas[i] == 0.0) continue;
    const T weight = static_cast<T>(lambdas[i]) / static_cast<T>(a.dim(0));
    auto term = affine(sum_squares(matmul(transpose(a), b)), weight);
    total = total ? add(*total, term) : term;
  }
  return total ? *total : Tensor<T>::scalar(T(0));
}

/// L = L_cls + L_orth
template <Scalar T>
Tensor<T> total_loss(const Tensor<T>& cls, const Tensor<T>& orth) {
  if (!std::isfinite(cls.item()) || !std::isfinite(orth.item())) {
    throw ValueError("total_loss: non-finite component (cls=" + std::to_string(cls.item()) +
                     ", orth=" + std::to_string(orth.item()) + ")");
  }
  return add(cls, orth);
}

/// Row-wise argmax, lowest index on ties.
template <Scalar T>
std::vector<std::size_t> predict(const Tensor<T>& scores) {
  if (scores.rank() != 2) throw ShapeError("predict expects N x K scores");
  const std::size_t N = scores.dim(0), K = scores.dim(1);
  std::vector<std::size_t> out(N, 0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 1; k < K; ++k)
      if (scores[n * K + k] > scores[n * K + out[n]]) out[n] = k;
  return out;
}

}  // namespace rcf
