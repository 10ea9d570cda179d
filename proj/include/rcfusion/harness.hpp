// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation, ablation and feature export on top of the fusion
// model. Everything here is deterministic for a fixed config: shuffles are
// seeded per epoch and reductions run in a fixed order.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rcfusion/checkpoint.hpp"
#include "rcfusion/config.hpp"
#include "rcfusion/data.hpp"
#include "rcfusion/fusion.hpp"
#include "rcfusion/optim.hpp"
#include "rcfusion/parallel.hpp"
#include "rcfusion/rcft.hpp"

namespace rcf {

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  std::vector<ColorizedSample> train;
  std::vector<ColorizedSample> test;
  std::vector<std::string> class_names;
  SplitSpec split;

  std::size_t num_classes() const { return class_names.size(); }
};

/// Loads or synthesizes samples, splits them by instance, colorizes depth and
/// (optionally) augments the training side.
inline PreparedData prepare_data(const RunConfig& config) {
  std::vector<Sample> samples;
  PreparedData out;
  if (config.dataset == DatasetSource::Synthetic) {
    samples = make_synthetic_dataset(config.synthetic);
    for (std::size_t k = 0; k < config.synthetic.num_classes; ++k) out.class_names.push_back("class" + std::to_string(k));
  } else {
    auto loaded = load_dataset(config.dataset_path);
    samples = std::move(loaded.samples);
    out.class_names = std::move(loaded.class_names);
  }
  if (samples.empty()) throw ConfigError("dataset is empty");
  auto split = make_split(samples, config.split_index, config.split_seed);
  out.split = split.spec;
  out.train = colorize(split.train);
  out.test = colorize(split.test);
  if (config.augment) out.train = augment(out.train);
  return out;
}

/// Standardized network inputs for a whole split, built once.
template <Scalar T>
struct TensorDataset {
  Shape sample_shape;  // 3 x S x S
  std::vector<T> rgb;
  std::vector<T> depth;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }

  static TensorDataset build(const std::vector<ColorizedSample>& samples, std::size_t input_size) {
    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto batch = make_batch<T>(samples, all, input_size);
    TensorDataset out;
    out.sample_shape = {3, input_size, input_size};
    out.rgb.assign(batch.rgb.data().begin(), batch.rgb.data().end());
    out.depth.assign(batch.depth.data().begin(), batch.depth.data().end());
    out.labels = std::move(batch.labels);
    return out;
  }

  Batch<T> gather(std::span<const std::size_t> indices) const {
    const std::size_t plane = numel(sample_shape);
    std::vector<T> r(indices.size() * plane), d(indices.size() * plane);
    Batch<T> b;
    for (std::size_t n = 0; n < indices.size(); ++n) {
      std::copy_n(rgb.begin() + static_cast<std::ptrdiff_t>(indices[n] * plane), plane, r.begin() + static_cast<std::ptrdiff_t>(n * plane));
      std::copy_n(depth.begin() + static_cast<std::ptrdiff_t>(indices[n] * plane), plane, d.begin() + static_cast<std::ptrdiff_t>(n * plane));
      b.labels.push_back(labels[indices[n]]);
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    b.rgb = Tensor<T>(shape, std::move(r));
    b.depth = Tensor<T>(shape, std::move(d));
    return b;
  }
};

// ---------------------------------------------------------------------------
// Model + optimizer

template <Scalar T>
struct TrainState {
  FusionModel<T> model;
  Rmsprop<T> optimizer;

  static TrainState make(const RunConfig& config, std::size_t num_classes, std::uint64_t seed) {
    FusionModel<T> model(config.model_config(num_classes), seed);
    auto params = model.parameters();
    std::optional<MaxNormConfig> max_norm;
    if (config.max_norm > 0.0) max_norm = MaxNormConfig{config.max_norm};
    return {std::move(model), Rmsprop<T>(std::move(params), config.optimizer, max_norm)};
  }
};

struct EpochStats {
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_orth = 0.0;
  double train_accuracy = 0.0;
};

/// One pass over the training split in a shuffled order seeded by shuffle_seed.
/// The last partial batch is kept. Reported losses are sample-weighted means
/// of the per-batch means.
template <Scalar T>
EpochStats run_epoch(TrainState<T>& state, const TensorDataset<T>& data, const RunConfig& config,
                     std::uint64_t shuffle_seed) {
  if (data.size() == 0) throw ConfigError("training split is empty");
  if (config.batch_size == 0) throw ConfigError("optim.batch_size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(shuffle_seed);
  rng.shuffle(order);

  const auto lambdas = lambda_schedule(state.model.config());
  EpochStats stats;
  std::size_t correct = 0;
  for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
    const std::size_t stop = std::min(order.size(), start + config.batch_size);
    const std::span<const std::size_t> idx(order.data() + start, stop - start);
    const auto batch = data.gather(idx);
    try {
      auto out = state.model.forward(batch.rgb, batch.depth, true);
      auto cls = classification_loss_from_logits(out.logits, batch.labels);
      auto orth = config.orthogonality ? orthogonality_loss(out.projected_rgb, out.projected_depth, lambdas)
                                       : Tensor<T>::scalar(T(0));
      auto total = total_loss(cls, orth);
      state.optimizer.zero_grad();
      backward(total);
      state.optimizer.step();

      const double w = static_cast<double>(idx.size());
      stats.loss_total += w * static_cast<double>(total.item());
      stats.loss_cls += w * static_cast<double>(cls.item());
      stats.loss_orth += w * static_cast<double>(orth.item());
      const auto pred = predict(out.logits);
      for (std::size_t n = 0; n < pred.size(); ++n) correct += pred[n] == batch.labels[n];
    } catch (const ValueError& e) {
      throw ValueError("batch " + std::to_string(b) + ": " + e.what());
    }
  }
  const double n = static_cast<double>(data.size());
  stats.loss_total /= n;
  stats.loss_cls /= n;
  stats.loss_orth /= n;
  stats.train_accuracy = static_cast<double>(correct) / n;
  return stats;
}

/// Replaces the batch-norm running averages with population statistics of
/// the current weights: the mean over batches of the batch means and of the
/// unbiased batch variances. The exponential averages kept during training
/// lag behind weights that are still moving, which can leave inference mode
/// far from what the network saw.
template <Scalar T>
void recompute_batch_norm_statistics(FusionModel<T>& model, const TensorDataset<T>& data,
                                     std::size_t batch_size) {
  if (data.size() == 0 || batch_size == 0) return;
  auto layers = model.batch_norms();
  std::vector<T> momentum;
  for (auto* bn : layers) {
    momentum.push_back(bn->momentum);
    std::fill(bn->running_mean.mutable_data().begin(), bn->running_mean.mutable_data().end(), T(0));
    std::fill(bn->running_var.mutable_data().begin(), bn->running_var.mutable_data().end(), T(0));
  }
  NoGradGuard no_grad;
  std::vector<std::size_t> idx;
  std::size_t k = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t stop = std::min(data.size(), start + batch_size);
    if (stop - start < 2 && k > 0) break;  // a lone sample has no variance to add
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    ++k;
    for (auto* bn : layers) bn->momentum = T(1) / static_cast<T>(k);
    const auto batch = data.gather(idx);
    model.forward(batch.rgb, batch.depth, true);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->momentum = momentum[i];
}

// ---------------------------------------------------------------------------
// Evaluation

struct ClassAccuracy {
  std::string name;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<ClassAccuracy> per_class;
  std::vector<std::size_t> predictions;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Inference-mode accuracy; no parameter or buffer is modified.
template <Scalar T>
EvalResult evaluate(FusionModel<T>& model, const TensorDataset<T>& data,
                    const std::vector<std::string>& class_names, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  EvalResult r;
  for (const auto& name : class_names) r.per_class.push_back({name, 0, 0});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(data.size(), start + batch_size) - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = data.gather(idx);
    const auto out = model.forward(batch.rgb, batch.depth, false);
    for (std::size_t n = 0; const auto p : predict(out.logits)) {
      const auto label = batch.labels[n++];
      if (label >= r.per_class.size()) throw ValueError("label " + std::to_string(label) + " has no class name");
      r.predictions.push_back(p);
      r.per_class[label].total += 1;
      r.per_class[label].correct += p == label;
    }
  }
  for (const auto& c : r.per_class) {
    r.correct += c.correct;
    r.total += c.total;
  }
  return r;
}

/// Mean |cos| between paired projected RGB and depth vectors, over samples and
/// over the steps the orthogonality schedule can reach (all steps if none).
template <Scalar T>
double mean_abs_cosine(FusionModel<T>& model, const TensorDataset<T>& data, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const auto taps = model.taps();
  std::vector<std::size_t> steps;
  if (!cfg.pooled_output)
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (taps[i] <= cfg.lambda_zero_above) steps.push_back(i);
  if (steps.empty())
    for (std::size_t i = 0; i < cfg.sequence_length(); ++i) steps.push_back(i);

  double sum = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(data.size(), start + batch_size) - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = data.gather(idx);
    const auto out = model.forward(batch.rgb, batch.depth, false);
    for (auto s : steps) {
      const auto& a = out.projected_rgb[s];
      const auto& b = out.projected_depth[s];
      const std::size_t N = a.dim(0), D = a.dim(1);
      for (std::size_t n = 0; n < N; ++n) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          const double x = a[n * D + d], y = b[n * D + d];
          dot += x * y;
          na += x * x;
          nb += y * y;
        }
        sum += (na > 0.0 && nb > 0.0) ? std::abs(dot) / std::sqrt(na * nb) : 0.0;
        ++count;
      }
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Training driver

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_orth = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double wall_time_s = 0.0;
};

inline std::string metrics_header() { return "epoch,loss_total,loss_cls,loss_orth,train_acc,test_acc,wall_time_s\n"; }

inline std::string format_metrics_row(const MetricsRecord& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.loss_total, m.loss_cls,
                m.loss_orth, m.train_accuracy, m.test_accuracy, m.wall_time_s);
  return buf;
}

template <Scalar T>
struct TrainResult {
  TrainState<T> state;
  std::uint64_t chosen_seed = 0;
  std::vector<double> start_scores;
  std::vector<MetricsRecord> metrics;
  EvalResult final_eval;
};

/// Multi-start selection (one epoch per candidate, seeds seed..seed+num_starts-1,
/// scored on training accuracy) followed by `epochs` recorded epochs.
template <Scalar T>
TrainResult<T> train_model(const RunConfig& config, const PreparedData& data,
                           const std::function<void(const MetricsRecord&)>& on_epoch = {}) {
  if (config.num_starts == 0) throw ConfigError("train.num_starts must be >= 1");
  const auto train_set = TensorDataset<T>::build(data.train, config.input_size);
  const auto test_set = TensorDataset<T>::build(data.test, config.input_size);

  struct Candidate {
    TrainState<T> state;
    double score = 0.0;
  };
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < config.num_starts; ++k) seeds.push_back(config.seed + k);
  const std::uint64_t selection_shuffle = derive_seed(config.seed, 0);
  auto chosen = multi_start_init<Candidate>(
      [&](std::uint64_t s) { return Candidate{TrainState<T>::make(config, data.num_classes(), s), 0.0}; }, seeds,
      [&](Candidate& c) {
        c.score = run_epoch(c.state, train_set, config, selection_shuffle).train_accuracy;
        recompute_batch_norm_statistics(c.state.model, train_set, config.batch_size);
      },
      [](Candidate& c) { return c.score; });

  TrainResult<T> result{std::move(chosen.model.state), chosen.seed, std::move(chosen.scores), {}, {}};
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto stats = run_epoch(result.state, train_set, config, derive_seed(config.seed, epoch));
    recompute_batch_norm_statistics(result.state.model, train_set, config.batch_size);
    MetricsRecord m;
    m.epoch = epoch;
    m.loss_total = stats.loss_total;
    m.loss_cls = stats.loss_cls;
    m.loss_orth = stats.loss_orth;
    m.train_accuracy = stats.train_accuracy;
    m.test_accuracy = evaluate(result.state.model, test_set, data.class_names, config.batch_size).accuracy();
    if (config.record_wall_time)
      m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.final_eval = evaluate(result.state.model, test_set, data.class_names, config.batch_size);
  return result;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string format_per_class(const EvalResult& r) {
  std::string out = "class,correct,total,accuracy\n";
  char buf[64];
  for (const auto& c : r.per_class) {
    std::snprintf(buf, sizeof buf, ",%zu,%zu,%.17g\n", c.correct, c.total, c.accuracy());
    out += c.name + buf;
  }
  return out;
}

/// Runs train_model and writes metrics.csv, per_class.csv, model.ckpt,
/// optimizer.ckpt and config.txt into config.output_dir.
template <Scalar T>
TrainResult<T> train(const RunConfig& config, const PreparedData& data) {
  std::filesystem::create_directories(config.output_dir);
  const auto metrics_path = config.output_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw IoError("cannot open for writing: " + metrics_path.string());
  metrics << metrics_header() << std::flush;
  auto result = train_model<T>(config, data, [&](const MetricsRecord& m) { metrics << format_metrics_row(m) << std::flush; });
  write_text(config.output_dir / "per_class.csv", format_per_class(result.final_eval));
  save_checkpoint(config.output_dir / "model.ckpt", result.state.model.state());
  save_checkpoint(config.output_dir / "optimizer.ckpt", result.state.optimizer.state());
  write_text(config.output_dir / "config.txt", format_config(config));
  return result;
}

/// Rebuilds the model described by config and fills it from a checkpoint.
template <Scalar T>
FusionModel<T> load_model(const RunConfig& config, std::size_t num_classes, const std::filesystem::path& checkpoint) {
  FusionModel<T> model(config.model_config(num_classes), config.seed);
  auto targets = model.state();
  assign_checkpoint(targets, load_checkpoint<T>(checkpoint));
  return model;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationColumn {
  std::string name;
  std::size_t tap_first;
  std::size_t tap_last;
  bool pooled_output;
};

inline std::vector<AblationColumn> ablation_columns() {
  return {{"res1-5", 1, 5, false}, {"res2-5", 2, 5, false}, {"res3-5", 3, 5, false},
          {"res4-5", 4, 5, false}, {"res5", 5, 5, false},   {"output", 5, 5, true}};
}

struct AblationCell {
  bool blank = false;  // orthogonality term cannot act on this tap range
  std::optional<double> accuracy;
  std::string error;
};

struct AblationTable {
  std::vector<std::string> columns;
  std::vector<std::string> rows{"with_orth", "without_orth"};
  std::vector<std::vector<AblationCell>> cells;  // [row][column]
};

inline std::string format_ablation(const AblationTable& t) {
  std::string out = "setting";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  char buf[32];
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out += t.rows[r];
    for (const auto& cell : t.cells[r]) {
      out += ",";
      if (cell.accuracy) {
        std::snprintf(buf, sizeof buf, "%.17g", *cell.accuracy);
        out += buf;
      } else if (!cell.blank) {
        out += "error";
      }
    }
    out += "\n";
  }
  return out;
}

/// Trains every tap range with and without the orthogonality term. Cells whose
/// schedule is identically zero are left blank; a failing cell is recorded and
/// the rest still run. Each cell writes into its own subdirectory.
template <Scalar T>
AblationTable run_ablation(const RunConfig& config, const PreparedData& data) {
  AblationTable table;
  table.cells.assign(2, {});
  for (const auto& col : ablation_columns()) {
    table.columns.push_back(col.name);
    for (std::size_t row = 0; row < 2; ++row) {
      RunConfig cell_cfg = config;
      cell_cfg.model.tap_first = col.tap_first;
      cell_cfg.model.tap_last = col.tap_last;
      cell_cfg.model.pooled_output = col.pooled_output;
      cell_cfg.orthogonality = row == 0;
      if (row == 1) cell_cfg.model.lambda_base = 0.0;
      cell_cfg.output_dir = config.output_dir / "ablation" / (table.rows[row] + "_" + col.name);
      AblationCell cell;
      const auto lambdas = lambda_schedule(cell_cfg.model);
      const bool any_weight = std::any_of(lambdas.begin(), lambdas.end(), [](double l) { return l > 0.0; });
      if (row == 0 && !any_weight) {
        cell.blank = true;
      } else {
        try {
          cell.accuracy = train<T>(cell_cfg, data).final_eval.accuracy();
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
      table.cells[row].push_back(cell);
    }
  }
  std::filesystem::create_directories(config.output_dir);
  write_text(config.output_dir / "ablation.csv", format_ablation(table));
  return table;
}

// ---------------------------------------------------------------------------
// Feature export

template <Scalar T>
struct ExportedFeatures {
  Tensor<T> rgb;    // N x pd, projected RGB vector of the last step
  Tensor<T> depth;  // N x pd, projected depth vector of the last step
  Tensor<T> fused;  // N x mn, final GRU state
  Tensor<T> labels; // N
};

template <Scalar T>
ExportedFeatures<T> extract_features(FusionModel<T>& model, const TensorDataset<T>& data, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  std::vector<T> rgb, depth, fused, labels;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(data.size(), start + batch_size) - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = data.gather(idx);
    const auto out = model.forward(batch.rgb, batch.depth, false);
    const auto r = out.projected_rgb.back().values();
    const auto d = out.projected_depth.back().values();
    const auto h = out.hidden.values();
    rgb.insert(rgb.end(), r.begin(), r.end());
    depth.insert(depth.end(), d.begin(), d.end());
    fused.insert(fused.end(), h.begin(), h.end());
    for (auto l : batch.labels) labels.push_back(static_cast<T>(l));
  }
  const std::size_t N = data.size();
  return {Tensor<T>({N, cfg.pd}, std::move(rgb)), Tensor<T>({N, cfg.pd}, std::move(depth)),
          Tensor<T>({N, cfg.mn}, std::move(fused)), Tensor<T>({N}, std::move(labels))};
}

/// Writes rgb_features.rcft, depth_features.rcft, fused_features.rcft and
/// labels.rcft for the training split followed by the test split.
template <Scalar T>
ExportedFeatures<T> export_features(const RunConfig& config, const PreparedData& data,
                                    const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir) {
  auto model = load_model<T>(config, data.num_classes(), checkpoint);
  auto all = data.train;
  all.insert(all.end(), data.test.begin(), data.test.end());
  const auto set = TensorDataset<T>::build(all, config.input_size);
  auto features = extract_features(model, set, config.batch_size);
  std::filesystem::create_directories(out_dir);
  save_rcft(out_dir / "rgb_features.rcft", features.rgb);
  save_rcft(out_dir / "depth_features.rcft", features.depth);
  save_rcft(out_dir / "fused_features.rcft", features.fused);
  save_rcft(out_dir / "labels.rcft", features.labels);
  return features;
}

}  // namespace rcf
