// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "oracles.hpp"
#include "rcfusion/checkpoint.hpp"
#include "rcfusion/data.hpp"
#include "rcfusion/png_io.hpp"
#include "rcfusion/rcft.hpp"

namespace fs = std::filesystem;
using T64 = rcf::Tensor<double>;
using T32 = rcf::Tensor<float>;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("rcfusion_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

rcf::Image8 random_image(std::size_t H, std::size_t W, std::uint64_t seed) {
  rcf::Image8 img(H, W, 3);
  rcf::Rng rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

rcf::DepthMap random_depth(std::size_t H, std::size_t W, std::uint64_t seed) {
  rcf::DepthMap d(H, W);
  rcf::Rng rng(seed);
  for (auto& v : d.values) v = static_cast<std::uint16_t>(rng.below(65536));
  return d;
}

void write_frame(const fs::path& dir, const std::string& frame, std::uint64_t seed) {
  fs::create_directories(dir);
  rcf::write_png_rgb8(dir / (frame + "_rgb.png"), random_image(4, 5, seed));
  rcf::write_png_gray16(dir / (frame + "_depth.png"), random_depth(4, 5, seed + 1000));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

// ---------------------------------------------------------------------------
// PNG

TEST(Png, RgbRoundTrip) {
  TempDir tmp;
  const auto img = random_image(7, 9, 1);
  rcf::write_png_rgb8(tmp.path() / "a.png", img);
  EXPECT_EQ(rcf::read_png_rgb8(tmp.path() / "a.png"), img);
}

TEST(Png, Gray16RoundTripIncludingExtremes) {
  TempDir tmp;
  auto d = random_depth(6, 3, 2);
  d.at(0, 0) = 0;
  d.at(0, 1) = 65535;
  d.at(0, 2) = 256;
  rcf::write_png_gray16(tmp.path() / "d.png", d);
  EXPECT_EQ(rcf::read_png_gray16(tmp.path() / "d.png"), d);
}

TEST(Png, ErrorsNameThePath) {
  TempDir tmp;
  const auto missing = tmp.path() / "nope.png";
  try {
    rcf::read_png_rgb8(missing);
    FAIL() << "expected IoError";
  } catch (const rcf::IoError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.png"), std::string::npos);
  }
  std::ofstream(tmp.path() / "junk.png") << "not a png";
  EXPECT_THROW(rcf::read_png_rgb8(tmp.path() / "junk.png"), rcf::IoError);
}

// ---------------------------------------------------------------------------
// Directory datasets

TEST(LoadDataset, EmptyRoot) {
  TempDir tmp;
  const auto d = rcf::load_dataset(tmp.path());
  EXPECT_TRUE(d.samples.empty());
  EXPECT_TRUE(d.class_names.empty());
  EXPECT_THROW(rcf::load_dataset(tmp.path() / "absent"), rcf::IoError);
}

TEST(LoadDataset, LabelsFollowSortedClassOrder) {
  TempDir tmp;
  // Created out of order on purpose.
  write_frame(tmp.path() / "zebra" / "z1", "0001", 1);
  write_frame(tmp.path() / "zebra" / "z1", "0000", 2);
  write_frame(tmp.path() / "apple" / "a1", "0000", 3);
  write_frame(tmp.path() / "apple" / "a1", "0001", 4);
  const auto d = rcf::load_dataset(tmp.path());
  ASSERT_EQ(d.samples.size(), 4u);
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"apple", "zebra"}));
  std::vector<std::size_t> labels;
  for (const auto& s : d.samples) labels.push_back(s.label);
  EXPECT_EQ(labels, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_EQ(d.samples[0].rgb, random_image(4, 5, 3));
  EXPECT_EQ(d.samples[2].rgb, random_image(4, 5, 2));
  EXPECT_EQ(d.samples[2].depth_raw, random_depth(4, 5, 1002));
  EXPECT_EQ(d.samples[0].instance_id, "apple/a1");

  const auto again = rcf::load_dataset(tmp.path());
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(again.samples[i].rgb, d.samples[i].rgb);
    EXPECT_EQ(again.samples[i].instance_id, d.samples[i].instance_id);
  }
}

TEST(LoadDataset, MissingPairRejected) {
  TempDir tmp;
  write_frame(tmp.path() / "c" / "i", "0000", 1);
  rcf::write_png_rgb8(tmp.path() / "c" / "i" / "0001_rgb.png", random_image(4, 5, 9));
  EXPECT_THROW(rcf::load_dataset(tmp.path()), rcf::IoError);
}

TEST(LoadDataset, SyntheticExportRoundTrip) {
  TempDir tmp;
  rcf::SyntheticSpec spec;
  spec.samples_per_class = 6;
  spec.instances_per_class = 3;
  spec.image_size = 8;
  spec.seed = 5;
  const auto samples = rcf::make_synthetic_dataset(spec);
  rcf::export_dataset(samples, tmp.path(), {"class0", "class1"});
  const auto loaded = rcf::load_dataset(tmp.path());
  ASSERT_EQ(loaded.samples.size(), samples.size());
  // Loading order is class, instance, frame; match by content.
  std::size_t matched = 0;
  for (const auto& s : samples)
    for (const auto& l : loaded.samples)
      if (l.rgb == s.rgb && l.depth_raw == s.depth_raw && l.label == s.label) {
        ++matched;
        break;
      }
  EXPECT_EQ(matched, samples.size());
}

// ---------------------------------------------------------------------------
// RCFT

TEST(Rcft, ByteLayout) {
  std::stringstream buf;
  rcf::write_rcft(buf, T64({2, 1}, {1.5, -2.0}));
  std::string expected = "RCFT";
  expected.push_back(1);  // f64
  expected.push_back(2);  // rank
  append_u64(expected, 2);
  append_u64(expected, 1);
  append_u64(expected, std::bit_cast<std::uint64_t>(1.5));
  append_u64(expected, std::bit_cast<std::uint64_t>(-2.0));
  EXPECT_EQ(buf.str(), expected);

  std::stringstream fbuf;
  rcf::write_rcft(fbuf, T32({1}, {1.0f}));
  const auto s = fbuf.str();
  ASSERT_EQ(s.size(), 4u + 2u + 8u + 4u);
  EXPECT_EQ(s[4], 0);
  EXPECT_EQ(std::memcmp(s.data() + 14, "\x00\x00\x80\x3f", 4), 0);
}

TEST(Rcft, BitExactRoundTrip) {
  std::vector<double> v = oracle::random_vec(30, 3, -1e6, 1e6);
  v[0] = -0.0;
  v[1] = std::numeric_limits<double>::infinity();
  v[2] = std::numeric_limits<double>::denorm_min();
  v[3] = std::numeric_limits<double>::quiet_NaN();
  const T64 t({2, 3, 5}, v);
  std::stringstream buf;
  rcf::write_rcft(buf, t);
  const auto back = rcf::read_rcft<double>(buf);
  EXPECT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < v.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(v[i]));

  std::stringstream fbuf;
  const T32 f({4}, {1.25f, -3.5f, 0.1f, 1e-30f});
  rcf::write_rcft(fbuf, f);
  EXPECT_EQ(rcf::read_rcft<float>(fbuf).values(), f.values());

  std::stringstream sbuf;
  rcf::write_rcft(sbuf, T64::scalar(4.0));
  EXPECT_EQ(rcf::read_rcft<double>(sbuf).item(), 4.0);
}

TEST(Rcft, FileRoundTripAndErrors) {
  TempDir tmp;
  const auto t = oracle::random_tensor({3, 4}, 2);
  rcf::save_rcft(tmp.path() / "t.rcft", t);
  EXPECT_EQ(rcf::load_rcft<double>(tmp.path() / "t.rcft").values(), t.values());
  EXPECT_THROW(rcf::load_rcft<float>(tmp.path() / "t.rcft"), rcf::IoError);
  EXPECT_THROW(rcf::load_rcft<double>(tmp.path() / "none.rcft"), rcf::IoError);

  std::stringstream bad("RCFX\x01\x00");
  EXPECT_THROW(rcf::read_rcft<double>(bad), rcf::IoError);
  std::stringstream full;
  rcf::write_rcft(full, t);
  std::stringstream truncated(full.str().substr(0, full.str().size() - 3));
  EXPECT_THROW(rcf::read_rcft<double>(truncated), rcf::IoError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripPreservesNamesOrderAndBits) {
  rcf::ParamList<double> entries{{"b.weight", oracle::random_tensor({3, 2}, 1)},
                                 {"a.bias", oracle::random_tensor({3}, 2)},
                                 {"scalar", T64::scalar(-0.0)}};
  std::stringstream buf;
  rcf::write_checkpoint(buf, entries);
  const std::string first = buf.str();
  const auto loaded = rcf::read_checkpoint<double>(buf);
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].name, entries[i].name);
    EXPECT_EQ(loaded[i].tensor.shape(), entries[i].tensor.shape());
    for (std::size_t k = 0; k < entries[i].tensor.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(loaded[i].tensor[k]), std::bit_cast<std::uint64_t>(entries[i].tensor[k]));
  }
  std::stringstream again;
  rcf::write_checkpoint(again, loaded);
  EXPECT_EQ(again.str(), first);
  EXPECT_EQ(first.substr(0, 4), "RCFC");
}

TEST(Checkpoint, AssignCopiesIntoLiveTensors) {
  auto w = T64::zeros({2, 2}, true);
  auto b = T64::zeros({2}, true);
  rcf::ParamList<double> targets{{"w", w}, {"b", b}};
  const rcf::ParamList<double> loaded{{"w", T64::matrix({{1, 2}, {3, 4}})}, {"b", T64::vector({5, 6})}};
  rcf::assign_checkpoint(targets, loaded);
  EXPECT_EQ(w.values(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(b.values(), (std::vector<double>{5, 6}));
}

TEST(Checkpoint, MismatchesRejected) {
  rcf::ParamList<double> targets{{"w", T64::zeros({2, 2}, true)}};
  EXPECT_THROW(rcf::assign_checkpoint(targets, {{"w", T64::zeros({2, 3})}}), rcf::ConfigError);
  EXPECT_THROW(rcf::assign_checkpoint(targets, {{"v", T64::zeros({2, 2})}}), rcf::ConfigError);
  EXPECT_THROW(rcf::assign_checkpoint(targets, {}), rcf::ConfigError);

  std::stringstream buf;
  rcf::write_checkpoint(buf, targets);
  EXPECT_THROW(rcf::read_checkpoint<float>(buf), rcf::IoError);
  std::stringstream junk("RCFC\x02\x00\x00\x00");
  EXPECT_THROW(rcf::read_checkpoint<double>(junk), rcf::IoError);
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir tmp;
  const rcf::ParamList<float> entries{{"x", oracle::random_tensor<float>({4, 4}, 3)}};
  rcf::save_checkpoint(tmp.path() / "m.ckpt", entries);
  EXPECT_EQ(rcf::load_checkpoint<float>(tmp.path() / "m.ckpt")[0].tensor.values(), entries[0].tensor.values());
  EXPECT_THROW(rcf::load_checkpoint<float>(tmp.path() / "none.ckpt"), rcf::IoError);
}
