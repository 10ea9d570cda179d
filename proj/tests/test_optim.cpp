// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "rcfusion/checkpoint.hpp"
#include "rcfusion/optim.hpp"

using T64 = rcf::Tensor<double>;

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// SGD

TEST(Sgd, Examples) {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> zero{0.0, 0.0};
  rcf::sgd_step<double>(p, zero, 0.1);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));

  std::vector<double> q{1.0};
  const std::vector<double> g{2.0};
  rcf::sgd_step<double>(q, g, 0.1);
  EXPECT_NEAR(q[0], 0.8, 1e-15);

  std::vector<double> r{1.0};
  EXPECT_THROW(rcf::sgd_step<double>(r, zero, 0.1), rcf::ShapeError);
}

TEST(Sgd, QuadraticFollowsClosedForm) {
  // f(w) = w^2, grad 2w, lr 0.1: w_k = 0.8^k.
  std::vector<double> w{1.0};
  double prev = 1.0;
  for (int k = 1; k <= 50; ++k) {
    const std::vector<double> g{2.0 * w[0]};
    rcf::sgd_step<double>(w, g, 0.1);
    EXPECT_NEAR(w[0], std::pow(0.8, k), 1e-14);
    EXPECT_LT(w[0] * w[0], prev * prev);
    prev = w[0];
  }
}

TEST(Sgd, ConvexQuadraticDecreasesBelowStabilityLimit) {
  // f(w) = 0.5 * sum c_i w_i^2, largest curvature 3; lr 0.6 < 2/3.
  const std::vector<double> c{0.5, 1.0, 3.0};
  std::vector<double> w{1.0, -2.0, 0.5};
  auto f = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += 0.5 * c[i] * w[i] * w[i];
    return s;
  };
  double prev = f();
  for (int k = 0; k < 40; ++k) {
    std::vector<double> g(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) g[i] = c[i] * w[i];
    rcf::sgd_step<double>(w, g, 0.6);
    const double now = f();
    EXPECT_LT(now, prev);
    prev = now;
  }
}

// ---------------------------------------------------------------------------
// RMSprop

TEST(Rmsprop, SingleStepHandValue) {
  rcf::RmspropConfig cfg{1e-3, 0.9, 0.0, 0.0, 1e-8};
  rcf::RmspropSlot<double> slot(1);
  std::vector<double> p{0.0};
  const std::vector<double> g{1.0};
  rcf::rmsprop_step<double>(slot, cfg, p, g);
  EXPECT_NEAR(slot.square_avg[0], 0.1, 1e-15);
  EXPECT_NEAR(p[0], -3.1623e-3, 1e-7);
  EXPECT_NEAR(p[0], -1e-3 / (std::sqrt(0.1) + 1e-8), 1e-15);
}

TEST(Rmsprop, MatchesScalarOracle) {
  const rcf::RmspropConfig cfg{1e-2, 0.9, 0.9, 2e-4, 1e-8};
  const auto p0 = oracle::random_vec(6, 1);
  const auto g1 = oracle::random_vec(6, 2);
  const auto g2 = oracle::random_vec(6, 3);
  rcf::RmspropSlot<double> slot(6);
  auto p = p0;
  rcf::rmsprop_step<double>(slot, cfg, p, g1);
  rcf::rmsprop_step<double>(slot, cfg, p, g2);
  for (std::size_t i = 0; i < 6; ++i) {
    oracle::RmspropScalar ref{cfg.learning_rate, cfg.alpha, cfg.momentum, cfg.weight_decay, cfg.eps};
    double v = ref.step(p0[i], g1[i]);
    v = ref.step(v, g2[i]);
    EXPECT_NEAR(p[i], v, 1e-15);
    EXPECT_NEAR(slot.square_avg[i], ref.s, 1e-15);
    EXPECT_NEAR(slot.momentum_buf[i], ref.m, 1e-15);
    EXPECT_GE(slot.square_avg[i], 0.0);
  }
}

TEST(Rmsprop, NoSignalNoMovement) {
  const rcf::RmspropConfig cfg{1e-3, 0.9, 0.9, 0.0, 1e-8};
  rcf::RmspropSlot<double> slot(3);
  std::vector<double> p{1.0, -2.0, 3.0};
  const std::vector<double> g(3, 0.0);
  for (int k = 0; k < 100; ++k) rcf::rmsprop_step<double>(slot, cfg, p, g);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Rmsprop, SizeMismatchRejected) {
  rcf::RmspropSlot<double> slot(2);
  std::vector<double> p{1.0};
  const std::vector<double> g{1.0};
  EXPECT_THROW(rcf::rmsprop_step<double>(slot, {}, p, g), rcf::ShapeError);
}

TEST(Rmsprop, OptimizerAppliesMaxNormToWeightsOnly) {
  auto w = T64::matrix({{100, 0}, {0, 0}}, true);
  auto b = T64::vector({100, 0}, true);
  rcf::Rmsprop<double> opt({{"w", w}, {"b", b}}, {1e-3, 0.9, 0.0, 0.0, 1e-8});
  rcf::backward(rcf::add(rcf::sum(w), rcf::sum(b)));
  opt.step();
  EXPECT_LE(norm2(w.data()), 4.0 + 1e-9);
  EXPECT_GT(norm2(b.data()), 99.0);
}

TEST(Rmsprop, MissingGradientTreatedAsZero) {
  auto w = T64::matrix({{1, 2}}, true);
  rcf::Rmsprop<double> opt({{"w", w}}, {1e-3, 0.9, 0.9, 0.0, 1e-8});
  opt.step();
  EXPECT_EQ(w.values(), (std::vector<double>{1, 2}));
}

TEST(Rmsprop, StateRoundTripsThroughCheckpoint) {
  auto w = oracle::random_tensor({3, 2}, 1, true);
  auto b = oracle::random_tensor({3}, 2, true);
  rcf::Rmsprop<double> opt({{"w", w}, {"b", b}}, {});
  for (int k = 0; k < 3; ++k) {
    opt.zero_grad();
    rcf::backward(rcf::add(rcf::sum_squares(w), rcf::sum_squares(b)));
    opt.step();
  }
  std::stringstream buf;
  rcf::write_checkpoint(buf, opt.state());
  const auto loaded = rcf::read_checkpoint<double>(buf);

  auto w2 = T64(w.shape(), w.values(), true);
  auto b2 = T64(b.shape(), b.values(), true);
  rcf::Rmsprop<double> restored({{"w", w2}, {"b", b2}}, {});
  restored.load_state(loaded);
  const auto a = opt.state(), c = restored.state();
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, c[i].name);
    EXPECT_EQ(a[i].tensor.values(), c[i].tensor.values());
  }
  // Both continue identically.
  for (auto* o : {&opt, &restored}) o->zero_grad();
  rcf::backward(rcf::add(rcf::sum_squares(w), rcf::sum_squares(b)));
  rcf::backward(rcf::add(rcf::sum_squares(w2), rcf::sum_squares(b2)));
  opt.step();
  restored.step();
  EXPECT_EQ(w.values(), w2.values());
  EXPECT_EQ(b.values(), b2.values());

  rcf::Rmsprop<double> other({{"w", w2}}, {});
  EXPECT_THROW(other.load_state(loaded), rcf::ConfigError);
}

// ---------------------------------------------------------------------------
// Max norm

TEST(MaxNorm, Examples) {
  std::vector<double> inside{2.0, 0.0};
  rcf::max_norm_constraint<double>(inside, {4.0});
  EXPECT_EQ(inside, (std::vector<double>{2.0, 0.0}));
  std::vector<double> outside{8.0, 0.0};
  rcf::max_norm_constraint<double>(outside, {4.0});
  EXPECT_EQ(outside, (std::vector<double>{4.0, 0.0}));
  EXPECT_THROW(rcf::max_norm_constraint<double>(outside, {0.0}), rcf::ValueError);
}

TEST(MaxNorm, ProjectsOntoBallAndIsIdempotent) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    auto v = oracle::random_vec(20, seed, -5, 5);
    rcf::max_norm_constraint<double>(v, {4.0});
    EXPECT_LE(norm2(v), 4.0 + 1e-6);
    auto twice = v;
    rcf::max_norm_constraint<double>(twice, {4.0});
    EXPECT_EQ(twice, v);
  }
}

// ---------------------------------------------------------------------------
// Multi-start

namespace {

struct Toy {
  std::uint64_t seed;
  int epochs = 0;
};

rcf::MultiStartResult<Toy> pick(std::vector<std::uint64_t> seeds, std::function<double(Toy&)> score) {
  return rcf::multi_start_init<Toy>([](std::uint64_t s) { return Toy{s}; }, std::move(seeds),
                                    [](Toy& t) { ++t.epochs; }, score);
}

}  // namespace

TEST(MultiStart, SingleCandidate) {
  const auto r = pick({7}, [](Toy&) { return 0.3; });
  EXPECT_EQ(r.seed, 7u);
  EXPECT_EQ(r.model.seed, 7u);
  EXPECT_EQ(r.model.epochs, 1);
  EXPECT_EQ(r.scores.size(), 1u);
}

TEST(MultiStart, RiggedScorePicksFavourite) {
  for (std::uint64_t fav : {10u, 11u, 12u, 13u}) {
    const auto r = pick({10, 11, 12, 13}, [fav](Toy& t) { return t.seed == fav ? 1.0 : 0.0; });
    EXPECT_EQ(r.seed, fav);
    EXPECT_EQ(r.model.seed, fav);
    EXPECT_EQ(r.model.epochs, 1);
  }
}

TEST(MultiStart, TiesGoToLowestSeed) {
  const auto r = pick({5, 3, 9}, [](Toy&) { return 0.5; });
  EXPECT_EQ(r.seed, 3u);
  EXPECT_EQ(r.scores, (std::vector<double>{0.5, 0.5, 0.5}));
}

TEST(MultiStart, Deterministic) {
  auto score = [](Toy& t) {
    rcf::Rng rng(t.seed);
    return rng.uniform();
  };
  const auto a = pick({1, 2, 3, 4}, score);
  const auto b = pick({1, 2, 3, 4}, score);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_THROW(pick({}, score), rcf::ValueError);
}
