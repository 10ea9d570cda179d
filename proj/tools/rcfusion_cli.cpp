// SPDX-License-Identifier: Apache-2.0
//
// rcfusion_cli: train / eval / ablate / export-features / make-synthetic.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rcfusion/rcfusion.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> precision;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> split_index;
  std::string checkpoint;
  std::vector<std::string> overrides;  // key=value
};

rcf::RunConfig resolve_config(const Options& o) {
  rcf::RunConfig config = o.config_path.empty() ? rcf::RunConfig{} : rcf::load_config(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw rcf::ConfigError("--set expects key=value, got '" + kv + "'");
    rcf::set_config_value(config, rcf::detail::trim(kv.substr(0, eq)), rcf::detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) config.seed = *o.seed;
  if (o.out) config.output_dir = *o.out;
  if (o.precision) rcf::set_config_value(config, "precision", *o.precision);
  if (o.threads) config.threads = *o.threads;
  if (o.split_index) config.split_index = *o.split_index;
  if (config.dataset == rcf::DatasetSource::Directory && !std::filesystem::is_directory(config.dataset_path)) {
    throw rcf::ConfigError("dataset.path does not exist: " + config.dataset_path.string());
  }
  rcf::set_num_threads(config.threads);
  return config;
}

std::filesystem::path checkpoint_path(const Options& o, const rcf::RunConfig& config) {
  return o.checkpoint.empty() ? config.output_dir / "model.ckpt" : std::filesystem::path(o.checkpoint);
}

template <rcf::Scalar T>
int do_train(const rcf::RunConfig& config) {
  const auto data = rcf::prepare_data(config);
  std::printf("train: %zu samples, test: %zu samples, %zu classes\n", data.train.size(), data.test.size(),
              data.num_classes());
  auto result = rcf::train<T>(config, data);
  for (const auto& m : result.metrics) {
    std::printf("epoch %3zu  loss %.5f (cls %.5f, orth %.5f)  train %.4f  test %.4f\n", m.epoch, m.loss_total,
                m.loss_cls, m.loss_orth, m.train_accuracy, m.test_accuracy);
  }
  std::printf("selected start seed %llu; final test accuracy %.4f\n",
              static_cast<unsigned long long>(result.chosen_seed), result.final_eval.accuracy());
  return 0;
}

template <rcf::Scalar T>
int do_eval(const rcf::RunConfig& config, const std::filesystem::path& ckpt) {
  const auto data = rcf::prepare_data(config);
  auto model = rcf::load_model<T>(config, data.num_classes(), ckpt);
  const auto test_set = rcf::TensorDataset<T>::build(data.test, config.input_size);
  const auto r = rcf::evaluate(model, test_set, data.class_names, config.batch_size);
  std::filesystem::create_directories(config.output_dir);
  rcf::write_text(config.output_dir / "per_class.csv", rcf::format_per_class(r));
  for (const auto& c : r.per_class) std::printf("%-20s %zu/%zu  %.4f\n", c.name.c_str(), c.correct, c.total, c.accuracy());
  std::printf("accuracy %.4f (%zu/%zu)\n", r.accuracy(), r.correct, r.total);
  return 0;
}

template <rcf::Scalar T>
int do_ablate(const rcf::RunConfig& config) {
  const auto data = rcf::prepare_data(config);
  const auto table = rcf::run_ablation<T>(config, data);
  std::cout << rcf::format_ablation(table);
  int failures = 0;
  for (const auto& row : table.cells)
    for (const auto& cell : row)
      if (!cell.error.empty()) {
        std::cerr << "cell failed: " << cell.error << "\n";
        ++failures;
      }
  return failures ? 1 : 0;
}

template <rcf::Scalar T>
int do_export(const rcf::RunConfig& config, const std::filesystem::path& ckpt) {
  const auto data = rcf::prepare_data(config);
  const auto f = rcf::export_features<T>(config, data, ckpt, config.output_dir);
  std::printf("wrote %zu feature rows to %s\n", f.labels.size(), config.output_dir.string().c_str());
  return 0;
}

int do_make_synthetic(const rcf::RunConfig& config) {
  const auto samples = rcf::make_synthetic_dataset(config.synthetic);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < config.synthetic.num_classes; ++k) names.push_back("class" + std::to_string(k));
  rcf::export_dataset(samples, config.output_dir, names);
  std::printf("wrote %zu samples to %s\n", samples.size(), config.output_dir.string().c_str());
  return 0;
}

template <typename Fn>
int dispatch(const rcf::RunConfig& config, Fn&& fn) {
  return config.precision == rcf::Precision::F64 ? fn(double{}) : fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-D recurrent convolutional fusion: training and evaluation driver"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Run configuration file (key = value lines)");
    sub->add_option("--seed", o.seed, "Overrides train.seed");
    sub->add_option("--out", o.out, "Overrides output.dir");
    sub->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--threads", o.threads, "Worker threads for convolution kernels");
    sub->add_option("--split-index", o.split_index, "Leave-one-instance-out split index");
    sub->add_option("--set", o.overrides, "Extra key=value config overrides (repeatable)");
  };

  auto* train = app.add_subcommand("train", "Train a model and write metrics, checkpoints and per-class accuracy");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  auto* ablate = app.add_subcommand("ablate", "Run the tap-range x orthogonality ablation grid");
  auto* exportf = app.add_subcommand("export-features", "Export RGB, depth and fused features as RCFT files");
  auto* synth = app.add_subcommand("make-synthetic", "Write the configured synthetic dataset as PNG files");
  for (auto* sub : {train, eval, ablate, exportf, synth}) add_common(sub);
  for (auto* sub : {eval, exportf}) sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint (default <out>/model.ckpt)");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve_config(o);
    if (train->parsed()) return dispatch(config, [&]<typename T>(T) { return do_train<T>(config); });
    if (eval->parsed()) return dispatch(config, [&]<typename T>(T) { return do_eval<T>(config, checkpoint_path(o, config)); });
    if (ablate->parsed()) return dispatch(config, [&]<typename T>(T) { return do_ablate<T>(config); });
    if (exportf->parsed()) return dispatch(config, [&]<typename T>(T) { return do_export<T>(config, checkpoint_path(o, config)); });
    if (synth->parsed()) return do_make_synthetic(config);
  } catch (const rcf::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
