// SPDX-License-Identifier: Apache-2.0
//
// RGB-D samples, surface-normal colorization of depth, augmentation,
// leave-one-instance-out splits, synthetic datasets and batching into
// N x 3 x H x W tensors.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rcfusion/png_io.hpp"
#include "rcfusion/random.hpp"
#include "rcfusion/tensor.hpp"

namespace rcf {

struct Sample {
  Image8 rgb;
  DepthMap depth_raw;
  std::size_t label = 0;
  std::string instance_id;
};

/// A sample whose depth has already been colorized to three channels.
struct ColorizedSample {
  Image8 rgb;
  Image8 depth;
  std::size_t label = 0;
  std::string instance_id;
};

/// Unit normals, three doubles per pixel.
struct NormalMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  std::array<double, 3> at(std::size_t y, std::size_t x) const {
    const auto* p = values.data() + 3 * (y * width + x);
    return {p[0], p[1], p[2]};
  }
};

/// Replaces missing (0) pixels by the value of the nearest valid pixel,
/// found by a 4-connected BFS seeded with valid pixels in row-major order.
inline DepthMap fill_missing_depth(const DepthMap& depth) {
  DepthMap out = depth;
  std::vector<bool> done(depth.values.size(), false);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    if (depth.values[i] != 0) {
      done[i] = true;
      queue.push_back(i);
    }
  }
  if (queue.empty()) throw ValueError("depth image has no valid pixels");
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t y = i / depth.width, x = i % depth.width;
    const std::size_t neighbours[4][2] = {{y - 1, x}, {y, x - 1}, {y, x + 1}, {y + 1, x}};
    for (const auto& nb : neighbours) {
      if (nb[0] >= depth.height || nb[1] >= depth.width) continue;  // wraps for -1
      const std::size_t j = nb[0] * depth.width + nb[1];
      if (done[j]) continue;
      done[j] = true;
      out.values[j] = out.values[i];
      queue.push_back(j);
    }
  }
  return out;
}

/// Per-pixel normals n = normalize(-dz/dx, -dz/dy, 1) from central
/// differences on raw depth values (one-sided at the borders).
inline NormalMap depth_to_surface_normals(const DepthMap& depth, bool fill_missing) {
  if (depth.height < 3 || depth.width < 3) throw ValueError("depth image must be at least 3x3");
  if (std::all_of(depth.values.begin(), depth.values.end(), [](auto v) { return v == 0; })) {
    throw ValueError("depth image has no valid pixels");
  }
  const DepthMap z = fill_missing ? fill_missing_depth(depth) : depth;
  const std::size_t H = z.height, W = z.width;
  auto val = [&](std::size_t y, std::size_t x) { return static_cast<double>(z.at(y, x)); };
  NormalMap out{H, W, std::vector<double>(H * W * 3)};
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double dx, dy;
      if (x == 0) dx = val(y, 1) - val(y, 0);
      else if (x == W - 1) dx = val(y, W - 1) - val(y, W - 2);
      else dx = 0.5 * (val(y, x + 1) - val(y, x - 1));
      if (y == 0) dy = val(1, x) - val(0, x);
      else if (y == H - 1) dy = val(H - 1, x) - val(H - 2, x);
      else dy = 0.5 * (val(y + 1, x) - val(y - 1, x));
      const double inv = 1.0 / std::sqrt(dx * dx + dy * dy + 1.0);
      double* n = out.values.data() + 3 * (y * W + x);
      n[0] = -dx * inv;
      n[1] = -dy * inv;
      n[2] = inv;
    }
  }
  return out;
}

/// channel = round_half_up((n + 1) / 2 * 255)
inline Image8 colorize_normals(const NormalMap& normals) {
  Image8 img(normals.height, normals.width, 3);
  for (std::size_t i = 0; i < normals.values.size(); ++i) {
    const double n = normals.values[i];
    if (!(n >= -1.0 && n <= 1.0)) {
      throw ValueError("normal component " + std::to_string(n) + " outside [-1, 1]");
    }
    img.pixels[i] = static_cast<std::uint8_t>(std::floor((n + 1.0) * 0.5 * 255.0 + 0.5));
  }
  return img;
}

/// Inverse of colorize_normals up to quantization.
inline NormalMap decode_colorized_normals(const Image8& img) {
  NormalMap out{img.height, img.width, std::vector<double>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = img.pixels[i] / 255.0 * 2.0 - 1.0;
  return out;
}

inline Image8 colorize_depth(const DepthMap& depth) {
  return colorize_normals(depth_to_surface_normals(depth, true));
}

inline ColorizedSample colorize(const Sample& s) {
  return {s.rgb, colorize_depth(s.depth_raw), s.label, s.instance_id};
}

inline std::vector<ColorizedSample> colorize(const std::vector<Sample>& samples) {
  std::vector<ColorizedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(colorize(s));
  return out;
}

// ---------------------------------------------------------------------------
// Geometric transforms on interleaved 8-bit images

namespace transform {

inline Image8 flip_horizontal(const Image8& img) {
  Image8 out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

inline Image8 flip_vertical(const Image8& img) {
  Image8 out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
  return out;
}

/// Quarter turns, clockwise as displayed (y axis pointing down). Square
/// images are permuted exactly; other shapes are rotated about the centre
/// inside the original frame with nearest-neighbour sampling and edge
/// clamping.
inline Image8 rotate90(const Image8& img, int quarter_turns) {
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  if (quarter_turns == 0) return img;
  const std::size_t H = img.height, W = img.width;
  Image8 out(H, W, img.channels);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // inverse map: source = R^-1 (dest - centre) + centre
      double sy = static_cast<double>(y) - cy, sx = static_cast<double>(x) - cx;
      for (int t = 0; t < quarter_turns; ++t) {
        const double ny = -sx, nx = sy;
        sy = ny;
        sx = nx;
      }
      const long iy = std::clamp(std::lround(sy + cy), 0L, static_cast<long>(H) - 1);
      const long ix = std::clamp(std::lround(sx + cx), 0L, static_cast<long>(W) - 1);
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c);
    }
  }
  return out;
}

/// Bilinear sample with edge clamping.
inline double sample_bilinear(const Image8& img, double y, double x, std::size_t c) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
  const double bottom = (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
  return (1 - fy) * top + fy * bottom;
}

/// Zoom about the centre by `factor`, keeping the original frame
/// (factor > 1 crops, factor < 1 pads with edge pixels).
inline Image8 scale(const Image8& img, double factor) {
  Image8 out(img.height, img.width, img.channels);
  const double cy = (static_cast<double>(img.height) - 1) / 2;
  const double cx = (static_cast<double>(img.width) - 1) / 2;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = sample_bilinear(img, cy + (static_cast<double>(y) - cy) / factor,
                                         cx + (static_cast<double>(x) - cx) / factor, c);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
  return out;
}

/// Bilinear resize to height x width (align-corners mapping).
inline Image8 resize(const Image8& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  Image8 out(height, width, img.channels);
  const double sy = height > 1 ? static_cast<double>(img.height - 1) / static_cast<double>(height - 1) : 0.0;
  const double sx = width > 1 ? static_cast<double>(img.width - 1) / static_cast<double>(width - 1) : 0.0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = sample_bilinear(img, static_cast<double>(y) * sy, static_cast<double>(x) * sx, c);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
  return out;
}

}  // namespace transform

/// The seven training variants: original, scale 0.9, scale 1.1, horizontal
/// flip, vertical flip, rotation by 90 and by 270 degrees. The same
/// transform is applied to both modalities; labels are preserved.
inline std::vector<ColorizedSample> augment(const ColorizedSample& s) {
  auto variant = [&](auto&& fn) {
    return ColorizedSample{fn(s.rgb), fn(s.depth), s.label, s.instance_id};
  };
  return {
      s,
      variant([](const Image8& i) { return transform::scale(i, 0.9); }),
      variant([](const Image8& i) { return transform::scale(i, 1.1); }),
      variant([](const Image8& i) { return transform::flip_horizontal(i); }),
      variant([](const Image8& i) { return transform::flip_vertical(i); }),
      variant([](const Image8& i) { return transform::rotate90(i, 1); }),
      variant([](const Image8& i) { return transform::rotate90(i, 3); }),
  };
}

inline std::vector<ColorizedSample> augment(const std::vector<ColorizedSample>& samples) {
  std::vector<ColorizedSample> out;
  out.reserve(samples.size() * 7);
  for (const auto& s : samples) {
    auto v = augment(s);
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-instance-out splits

struct SplitSpec {
  std::map<std::size_t, std::string> held_out_instances;  // class -> instance
  std::size_t split_index = 0;
};

template <typename S>
struct Split {
  std::vector<S> train;
  std::vector<S> test;
  SplitSpec spec;
};

/// Holds out one instance per class, chosen from a seeded per-class offset
/// advanced by split_index.
template <typename S>
Split<S> make_split(const std::vector<S>& samples, std::size_t split_index, std::uint64_t seed) {
  std::map<std::size_t, std::set<std::string>> instances;
  for (const auto& s : samples) instances[s.label].insert(s.instance_id);
  Split<S> out;
  out.spec.split_index = split_index;
  for (const auto& [label, ids] : instances) {
    if (ids.size() < 2) {
      throw ValueError("class " + std::to_string(label) + " has a single instance; cannot hold one out");
    }
    const std::vector<std::string> sorted(ids.begin(), ids.end());
    const std::size_t offset = derive_seed(seed, label) % sorted.size();
    out.spec.held_out_instances[label] = sorted[(offset + split_index) % sorted.size()];
  }
  for (const auto& s : samples) {
    const bool held = out.spec.held_out_instances.at(s.label) == s.instance_id;
    (held ? out.test : out.train).push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic two-modality datasets

enum class SyntheticKind {
  Xor,         // label = orientation bit of RGB xor orientation bit of depth
  Correlated,  // both modalities show the class pattern
};

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Xor;
  std::size_t num_classes = 2;
  std::size_t samples_per_class = 1024;
  std::size_t instances_per_class = 2;
  std::size_t image_size = 16;
  double noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) throw ValueError("synthetic image_size must be >= 8");
    if (samples_per_class == 0 || instances_per_class == 0) throw ValueError("synthetic sizes must be positive");
    if (noise < 0.0 || noise > 1.0) throw ValueError("synthetic noise must be in [0, 1]");
    if (kind == SyntheticKind::Xor && num_classes != 2) throw ValueError("XOR dataset needs exactly 2 classes");
    if (kind == SyntheticKind::Correlated && (num_classes < 2 || num_classes > 4)) {
      throw ValueError("correlated dataset supports 2 to 4 classes");
    }
  }
};

namespace detail {

// pattern 0: horizontal bar, 1: vertical bar, 2: diagonal, 3: anti-diagonal
inline bool on_pattern(std::size_t pattern, long y, long x, long offset, long half_width) {
  switch (pattern) {
    case 0: return std::abs(y - offset) <= half_width;
    case 1: return std::abs(x - offset) <= half_width;
    case 2: return std::abs((y - x) - (offset - 8)) <= half_width;
    default: return std::abs((y + x) - (offset + 8)) <= half_width;
  }
}

inline Image8 render_rgb(std::size_t pattern, std::size_t size, double noise, Rng& rng) {
  Image8 img(size, size, 3);
  const long offset = 2 + static_cast<long>(rng.below(size - 4));
  std::array<double, 3> bar{}, background{};
  for (auto& v : bar) v = rng.uniform(150, 255);
  for (auto& v : background) v = rng.uniform(0, 100);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = on_pattern(pattern, static_cast<long>(y), static_cast<long>(x), offset, 1);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (on ? bar[c] : background[c]) + noise * 255.0 * rng.normal();
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  return img;
}

inline DepthMap render_depth(std::size_t pattern, std::size_t size, double noise, Rng& rng) {
  DepthMap depth(size, size);
  const long offset = 2 + static_cast<long>(rng.below(size - 4));
  const auto base = static_cast<long>(800 + rng.below(400));
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = on_pattern(pattern, static_cast<long>(y), static_cast<long>(x), offset, 1);
      long v = base - (on ? 3 : 0);
      if (rng.bernoulli(noise)) v += rng.bernoulli(0.5) ? 1 : -1;
      if (rng.bernoulli(noise * 0.25)) v = 0;  // dropout of the sensor
      depth.at(y, x) = static_cast<std::uint16_t>(v);
    }
  if (std::all_of(depth.values.begin(), depth.values.end(), [](auto v) { return v == 0; })) depth.at(0, 0) = 1000;
  return depth;
}

}  // namespace detail

/// Samples ordered by class; within a class the RGB bit alternates so both
/// modality marginals are exactly uniform, and instance k holds samples
/// 2k, 2k+1, 2k + 2m, ... (m = instances_per_class).
inline std::vector<Sample> make_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  std::uint64_t index = 0;
  for (std::size_t label = 0; label < spec.num_classes; ++label) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i, ++index) {
      Rng rng(derive_seed(spec.seed, index));
      std::size_t rgb_pattern, depth_pattern;
      if (spec.kind == SyntheticKind::Xor) {
        rgb_pattern = i % 2;
        depth_pattern = rgb_pattern ^ label;
      } else {
        rgb_pattern = depth_pattern = label;
      }
      Sample s;
      s.rgb = detail::render_rgb(rgb_pattern, spec.image_size, spec.noise, rng);
      s.depth_raw = detail::render_depth(depth_pattern, spec.image_size, spec.noise, rng);
      s.label = label;
      s.instance_id = "c" + std::to_string(label) + "_i" + std::to_string((i / 2) % spec.instances_per_class);
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::vector<Sample> make_synthetic_xor_dataset(SyntheticSpec spec) {
  spec.kind = SyntheticKind::Xor;
  return make_synthetic_dataset(spec);
}

// ---------------------------------------------------------------------------
// Directory datasets: root/<class>/<instance>/<frame>_rgb.png + <frame>_depth.png

namespace detail {

inline std::vector<std::filesystem::path> sorted_subdirs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

struct LoadedDataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;  // index = label
};

inline LoadedDataset load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  LoadedDataset out;
  for (const auto& class_dir : detail::sorted_subdirs(root)) {
    const std::size_t label = out.class_names.size();
    out.class_names.push_back(class_dir.filename().string());
    for (const auto& inst_dir : detail::sorted_subdirs(class_dir)) {
      std::set<std::string> rgb_frames, depth_frames;
      for (const auto& e : std::filesystem::directory_iterator(inst_dir)) {
        const auto name = e.path().filename().string();
        if (detail::ends_with(name, "_rgb.png")) rgb_frames.insert(name.substr(0, name.size() - 8));
        else if (detail::ends_with(name, "_depth.png")) depth_frames.insert(name.substr(0, name.size() - 10));
      }
      for (const auto& f : rgb_frames)
        if (!depth_frames.count(f)) throw IoError("missing depth image for " + (inst_dir / (f + "_rgb.png")).string());
      for (const auto& f : depth_frames)
        if (!rgb_frames.count(f)) throw IoError("missing RGB image for " + (inst_dir / (f + "_depth.png")).string());
      for (const auto& f : rgb_frames) {
        Sample s;
        s.rgb = read_png_rgb8(inst_dir / (f + "_rgb.png"));
        s.depth_raw = read_png_gray16(inst_dir / (f + "_depth.png"));
        if (s.rgb.height != s.depth_raw.height || s.rgb.width != s.depth_raw.width) {
          throw IoError("RGB and depth sizes differ for frame " + (inst_dir / f).string());
        }
        s.label = label;
        s.instance_id = out.class_names.back() + "/" + inst_dir.filename().string();
        out.samples.push_back(std::move(s));
      }
    }
  }
  return out;
}

/// Writes samples in the directory layout read by load_dataset.
inline void export_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root,
                           const std::vector<std::string>& class_names) {
  std::map<std::string, std::size_t> frame_counter;
  for (const auto& s : samples) {
    if (s.label >= class_names.size()) throw ValueError("label without a class name");
    auto inst = s.instance_id;
    std::replace(inst.begin(), inst.end(), '/', '_');
    const auto dir = root / class_names[s.label] / inst;
    std::filesystem::create_directories(dir);
    char frame[16];
    std::snprintf(frame, sizeof frame, "%06zu", frame_counter[dir.string()]++);
    write_png_rgb8(dir / (std::string(frame) + "_rgb.png"), s.rgb);
    write_png_gray16(dir / (std::string(frame) + "_depth.png"), s.depth_raw);
  }
}

// ---------------------------------------------------------------------------
// Batching

/// Standardizes each channel of one image to zero mean and unit variance
/// (constant channels become zero) and writes it planar into `dst`.
template <Scalar T>
void standardize_into(const Image8& img, T* dst) {
  const std::size_t HW = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < HW; ++i) mean += img.pixels[i * img.channels + c];
    mean /= static_cast<double>(HW);
    double var = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      const double d = img.pixels[i * img.channels + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(HW);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (std::size_t i = 0; i < HW; ++i)
      dst[c * HW + i] = static_cast<T>((img.pixels[i * img.channels + c] - mean) * inv);
  }
}

template <Scalar T>
struct Batch {
  Tensor<T> rgb;    // N x 3 x S x S
  Tensor<T> depth;  // N x 3 x S x S
  std::vector<std::size_t> labels;
};

/// Resizes to input_size, standardizes, and stacks the selected samples.
template <Scalar T>
Batch<T> make_batch(const std::vector<ColorizedSample>& samples, std::span<const std::size_t> indices,
                    std::size_t input_size) {
  const std::size_t N = indices.size(), plane = 3 * input_size * input_size;
  std::vector<T> rgb(N * plane), depth(N * plane);
  Batch<T> batch;
  for (std::size_t n = 0; n < N; ++n) {
    const auto& s = samples.at(indices[n]);
    standardize_into<T>(transform::resize(s.rgb, input_size, input_size), rgb.data() + n * plane);
    standardize_into<T>(transform::resize(s.depth, input_size, input_size), depth.data() + n * plane);
    batch.labels.push_back(s.label);
  }
  batch.rgb = Tensor<T>({N, 3, input_size, input_size}, std::move(rgb));
  batch.depth = Tensor<T>({N, 3, input_size, input_size}, std::move(depth));
  return batch;
}

}  // namespace rcf
