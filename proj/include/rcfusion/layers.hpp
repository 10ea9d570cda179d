// SPDX-License-Identifier: Apache-2.0
//
// Trainable layer primitives: linear, convolution, batch norm, residual
// blocks and stages, the GRU cell, dropout and Xavier initialization.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rcfusion/ops.hpp"
#include "rcfusion/random.hpp"
#include "rcfusion/tensor.hpp"

namespace rcf {

template <Scalar T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <Scalar T>
using ParamList = std::vector<NamedTensor<T>>;

/// Uniform samples in [-a, a] with a = sqrt(6 / (fan_in + fan_out)), where
/// fan_in = shape[1] * receptive field and fan_out = shape[0] * receptive field.
template <Scalar T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed) {
  if (shape.size() < 2) {
    throw ShapeError("xavier_init needs rank >= 2, got " + shape_str(shape));
  }
  std::size_t receptive = 1;
  for (std::size_t d = 2; d < shape.size(); ++d) receptive *= shape[d];
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(seed);
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(shape, std::move(values), true);
}

/// Hands out distinct seeds to the parameters of one model.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t next() { return derive_seed(seed_, counter_++); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------

template <Scalar T>
struct LinearParams {
  Tensor<T> weight;  // out x in
  Tensor<T> bias;    // out

  static LinearParams make(std::size_t in, std::size_t out, SeedSequence& seeds) {
    return {xavier_init<T>({out, in}, seeds.next()), Tensor<T>::zeros({out}, true)};
  }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// x * W^T + b
template <Scalar T>
Tensor<T> linear_forward(const LinearParams<T>& p, const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != p.in_features()) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " for weight " +
                     shape_str(p.weight.shape()));
  }
  return add_row_vector(matmul(x, transpose(p.weight)), p.bias);
}

template <Scalar T>
struct Conv2dParams {
  Tensor<T> weight;  // F x C x k x k
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2dParams make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                           std::size_t padding, bool with_bias, SeedSequence& seeds) {
    Conv2dParams p{xavier_init<T>({out, in, kernel, kernel}, seeds.next()), std::nullopt, stride,
                   padding};
    if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
    return p;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
  }
};

template <Scalar T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  static BatchNormParams make(std::size_t channels) {
    return {Tensor<T>::ones({channels}, true), Tensor<T>::zeros({channels}, true),
            Tensor<T>::zeros({channels}), Tensor<T>::ones({channels})};
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void buffers(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

/// Training mode normalizes with batch statistics and folds them into the
/// running averages; inference mode uses the running averages.
template <Scalar T>
Tensor<T> batch_norm_forward(BatchNormParams<T>& p, const Tensor<T>& x, bool training) {
  if (!training) {
    return batch_norm_infer(x, p.gamma, p.beta, p.running_mean.data(), p.running_var.data(),
                            p.eps);
  }
  BatchStats<T> stats;
  auto y = batch_norm_train(x, p.gamma, p.beta, p.eps, &stats);
  auto rm = p.running_mean.mutable_data();
  auto rv = p.running_var.mutable_data();
  const T unbias = static_cast<T>(stats.count) / static_cast<T>(stats.count - 1);
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] = (T(1) - p.momentum) * rm[c] + p.momentum * stats.mean[c];
    rv[c] = (T(1) - p.momentum) * rv[c] + p.momentum * stats.variance[c] * unbias;
  }
  return y;
}

// ---------------------------------------------------------------------------

struct ResidualStageConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t num_blocks = 1;
  std::size_t downsample_stride = 1;

  bool needs_projection() const { return in_channels != out_channels || downsample_stride != 1; }
};

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus shortcut, then ReLU.
template <Scalar T>
struct ResidualBlock {
  Conv2dParams<T> conv1;
  BatchNormParams<T> bn1;
  Conv2dParams<T> conv2;
  BatchNormParams<T> bn2;
  std::optional<Conv2dParams<T>> shortcut;  // 1x1, strided

  static ResidualBlock make(std::size_t in, std::size_t out, std::size_t stride,
                            SeedSequence& seeds) {
    ResidualBlock b{Conv2dParams<T>::make(in, out, 3, stride, 1, false, seeds),
                    BatchNormParams<T>::make(out),
                    Conv2dParams<T>::make(out, out, 3, 1, 1, false, seeds),
                    BatchNormParams<T>::make(out), std::nullopt};
    if (in != out || stride != 1) b.shortcut = Conv2dParams<T>::make(in, out, 1, stride, 0, true, seeds);
    return b;
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    conv1.parameters(prefix + ".conv1", out);
    bn1.parameters(prefix + ".bn1", out);
    conv2.parameters(prefix + ".conv2", out);
    bn2.parameters(prefix + ".bn2", out);
    if (shortcut) shortcut->parameters(prefix + ".shortcut", out);
  }
  void buffers(const std::string& prefix, ParamList<T>& out) const {
    bn1.buffers(prefix + ".bn1", out);
    bn2.buffers(prefix + ".bn2", out);
  }
};

template <Scalar T>
Tensor<T> residual_block_forward(ResidualBlock<T>& block, const Tensor<T>& x, bool training) {
  auto f = relu(batch_norm_forward(block.bn1, block.conv1.forward(x), training));
  f = batch_norm_forward(block.bn2, block.conv2.forward(f), training);
  const auto skip = block.shortcut ? block.shortcut->forward(x) : x;
  if (skip.shape() != f.shape()) {
    throw ShapeError("residual block: shortcut " + shape_str(skip.shape()) + " vs residual " +
                     shape_str(f.shape()));
  }
  return relu(add(f, skip));
}

// ---------------------------------------------------------------------------

/// Update (z), reset (r) and candidate (h~) gate parameters of one GRU layer.
template <Scalar T>
struct GruParams {
  Tensor<T> w_update, w_reset, w_candidate;  // mn x in
  Tensor<T> u_update, u_reset, u_candidate;  // mn x mn
  Tensor<T> b_update, b_reset, b_candidate;  // mn

  static GruParams make(std::size_t in, std::size_t mn, SeedSequence& seeds) {
    auto w = [&] { return xavier_init<T>({mn, in}, seeds.next()); };
    auto u = [&] { return xavier_init<T>({mn, mn}, seeds.next()); };
    auto b = [&] { return Tensor<T>::zeros({mn}, true); };
    return {w(), w(), w(), u(), u(), u(), b(), b(), b()};
  }
  static GruParams zeros(std::size_t in, std::size_t mn) {
    auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
    return {z({mn, in}), z({mn, in}), z({mn, in}), z({mn, mn}), z({mn, mn}),
            z({mn, mn}), z({mn}),     z({mn}),     z({mn})};
  }

  std::size_t input_size() const { return w_update.dim(1); }
  std::size_t memory() const { return w_update.dim(0); }

  /// 3 * (mn * in + mn * mn + mn)
  std::size_t parameter_count() const {
    ParamList<T> list;
    parameters("", list);
    std::size_t total = 0;
    for (const auto& p : list) total += p.tensor.size();
    return total;
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".w_update", w_update});
    out.push_back({prefix + ".w_reset", w_reset});
    out.push_back({prefix + ".w_candidate", w_candidate});
    out.push_back({prefix + ".u_update", u_update});
    out.push_back({prefix + ".u_reset", u_reset});
    out.push_back({prefix + ".u_candidate", u_candidate});
    out.push_back({prefix + ".b_update", b_update});
    out.push_back({prefix + ".b_reset", b_reset});
    out.push_back({prefix + ".b_candidate", b_candidate});
  }
};

/// One GRU step:
///   z  = sigmoid(x Wz^T + h Uz^T + bz)
///   r  = sigmoid(x Wr^T + h Ur^T + br)
///   h~ = tanh(x Wh^T + (r * h) Uh^T + bh)
///   h' = (1 - z) * h + z * h~
template <Scalar T>
Tensor<T> gru_cell_step(const GruParams<T>& p, const Tensor<T>& x, const Tensor<T>& h_prev) {
  const std::size_t mn = p.memory();
  if (x.rank() != 2 || x.dim(1) != p.input_size()) {
    throw ShapeError("gru: input " + shape_str(x.shape()) + " for input size " +
                     std::to_string(p.input_size()));
  }
  if (h_prev.rank() != 2 || h_prev.dim(0) != x.dim(0) || h_prev.dim(1) != mn) {
    throw ShapeError("gru: hidden state " + shape_str(h_prev.shape()) + " for batch " +
                     std::to_string(x.dim(0)) + " and memory " + std::to_string(mn));
  }
  auto gate = [&](const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& b,
                  const Tensor<T>& h) {
    return add_row_vector(add(matmul(x, transpose(w)), matmul(h, transpose(u))), b);
  };
  const auto z = sigmoid(gate(p.w_update, p.u_update, p.b_update, h_prev));
  const auto r = sigmoid(gate(p.w_reset, p.u_reset, p.b_reset, h_prev));
  const auto candidate = tanh(gate(p.w_candidate, p.u_candidate, p.b_candidate, mul(r, h_prev)));
  return add(h_prev, mul(z, sub(candidate, h_prev)));
}

/// Folds gru_cell_step over the sequence and returns the final hidden state.
template <Scalar T>
Tensor<T> gru_sequence(const GruParams<T>& p, const std::vector<Tensor<T>>& sequence,
                       const Tensor<T>& h0) {
  if (sequence.empty()) throw ValueError("gru_sequence: empty input sequence");
  for (const auto& x : sequence) {
    if (x.shape() != sequence.front().shape()) {
      throw ShapeError("gru_sequence: non-uniform step shapes " +
                       shape_str(sequence.front().shape()) + " and " + shape_str(x.shape()));
    }
  }
  auto h = h0;
  for (const auto& x : sequence) h = gru_cell_step(p, x, h);
  return h;
}

// ---------------------------------------------------------------------------

/// Training mode zeroes each element with probability phi. Inference mode
/// scales by the keep probability (1 - phi).
template <Scalar T>
Tensor<T> dropout(const Tensor<T>& x, double phi, bool training, std::uint64_t seed) {
  if (phi < 0.0 || phi >= 1.0) throw ValueError("dropout probability must be in [0, 1)");
  if (phi == 0.0) return x;
  if (!training) return affine(x, static_cast<T>(1.0 - phi));
  Rng rng(seed);
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(phi) ? T(0) : T(1);
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 8;
  std::vector<ResidualStageConfig> stages;  // exactly four, after the stem

  /// ResNet-18 silhouette at desk scale: stem 8, stages 8/16/32/64.
  static BackboneConfig desk_scale(std::size_t blocks_per_stage = 1) {
    return {3, 8,
            {{8, 8, blocks_per_stage, 1},
             {8, 16, blocks_per_stage, 2},
             {16, 32, blocks_per_stage, 2},
             {32, 64, blocks_per_stage, 2}}};
  }
  /// Every stage 8 channels wide.
  static BackboneConfig micro(std::size_t blocks_per_stage = 1) {
    return {3, 8,
            {{8, 8, blocks_per_stage, 1},
             {8, 8, blocks_per_stage, 2},
             {8, 8, blocks_per_stage, 2},
             {8, 8, blocks_per_stage, 2}}};
  }

  std::size_t tap_channels(std::size_t tap) const {
    if (tap < 1 || tap > 5) throw ValueError("tap index must be in [1, 5]");
    return tap == 1 ? stem_channels : stages[tap - 2].out_channels;
  }

  void validate() const {
    if (in_channels == 0 || stem_channels == 0) throw ConfigError("backbone: zero channel count");
    if (stages.size() != 4) {
      throw ConfigError("backbone: expected 4 residual stages after the stem, got " +
                        std::to_string(stages.size()));
    }
    std::size_t prev = stem_channels;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (s.in_channels != prev) {
        throw ConfigError("backbone: stage " + std::to_string(i + 2) + " expects " +
                          std::to_string(s.in_channels) + " input channels but receives " +
                          std::to_string(prev));
      }
      if (s.out_channels == 0 || s.num_blocks == 0) {
        throw ConfigError("backbone: stage " + std::to_string(i + 2) + " is empty");
      }
      if (s.downsample_stride != 1 && s.downsample_stride != 2) {
        throw ConfigError("backbone: downsample stride must be 1 or 2");
      }
      prev = s.out_channels;
    }
  }
};

template <Scalar T>
struct BackboneOutputs {
  std::array<Tensor<T>, 5> taps;  // after the stem and after each stage
  Tensor<T> output;               // global average of the last tap, N x C
};

/// Stem (conv3x3 -> BN -> ReLU) followed by four residual stages; each of
/// the five exposes its post-activation output as a tap.
template <Scalar T>
class Backbone {
 public:
  Backbone(BackboneConfig config, SeedSequence& seeds) : config_(std::move(config)) {
    config_.validate();
    stem_conv_ = Conv2dParams<T>::make(config_.in_channels, config_.stem_channels, 3, 1, 1, false,
                                       seeds);
    stem_bn_ = BatchNormParams<T>::make(config_.stem_channels);
    for (const auto& s : config_.stages) {
      std::vector<ResidualBlock<T>> blocks;
      for (std::size_t b = 0; b < s.num_blocks; ++b) {
        blocks.push_back(ResidualBlock<T>::make(b == 0 ? s.in_channels : s.out_channels,
                                                s.out_channels,
                                                b == 0 ? s.downsample_stride : 1, seeds));
      }
      stages_.push_back(std::move(blocks));
    }
  }

  BackboneOutputs<T> forward(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
      throw ShapeError("backbone: input " + shape_str(x.shape()) + " needs " +
                       std::to_string(config_.in_channels) + " channels");
    }
    BackboneOutputs<T> out;
    auto h = relu(batch_norm_forward(stem_bn_, stem_conv_.forward(x), training));
    out.taps[0] = h;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (auto& block : stages_[s]) h = residual_block_forward(block, h, training);
      out.taps[s + 1] = h;
    }
    out.output = global_avg_pool(h);
    return out;
  }

  const BackboneConfig& config() const { return config_; }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    stem_conv_.parameters(prefix + ".stem.conv", out);
    stem_bn_.parameters(prefix + ".stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].parameters(prefix + ".stage" + std::to_string(s + 2) + ".block" +
                                     std::to_string(b),
                                 out);
  }
  void buffers(const std::string& prefix, ParamList<T>& out) const {
    stem_bn_.buffers(prefix + ".stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].buffers(prefix + ".stage" + std::to_string(s + 2) + ".block" +
                                  std::to_string(b),
                              out);
  }
  void batch_norms(std::vector<BatchNormParams<T>*>& out) {
    out.push_back(&stem_bn_);
    for (auto& stage : stages_)
      for (auto& block : stage) {
        out.push_back(&block.bn1);
        out.push_back(&block.bn2);
      }
  }

 private:
  BackboneConfig config_;
  Conv2dParams<T> stem_conv_;
  BatchNormParams<T> stem_bn_;
  std::vector<std::vector<ResidualBlock<T>>> stages_;
};

template <Scalar T>
Backbone<T> build_backbone(const BackboneConfig& config, SeedSequence& seeds) {
  return Backbone<T>(config, seeds);
}

template <Scalar T>
std::size_t count_parameters(const ParamList<T>& list) {
  std::size_t total = 0;
  for (const auto& p : list) total += p.tensor.size();
  return total;
}

}  // namespace rcf
