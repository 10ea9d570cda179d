// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <thread>

#include "oracles.hpp"
#include "rcfusion/ops.hpp"
#include "rcfusion/parallel.hpp"
#include "rcfusion/random.hpp"
#include "rcfusion/tensor.hpp"

using rcf::Shape;
using rcf::Tensor;
using T64 = Tensor<double>;

TEST(Tensor, SizeMatchesShape) {
  T64 t({2, 3, 4}, std::vector<double>(24, 1.0));
  EXPECT_EQ(t.size(), rcf::numel(t.shape()));
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(T64({2, 3}, std::vector<double>(5)), rcf::ShapeError);
}

TEST(Tensor, FactoriesAndIndexing) {
  auto m = T64::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.shape(), (Shape{2, 3}));
  EXPECT_EQ(m.at({1, 2}), 6.0);
  EXPECT_EQ(T64::full({2}, 3.5)[1], 3.5);
  EXPECT_EQ(T64::scalar(2.0).item(), 2.0);
  EXPECT_EQ(T64::vector({1, 2}).shape(), (Shape{2}));
}

TEST(Tensor, MutableDataOnlyOnLeaves) {
  auto a = T64::vector({1, 2}, true);
  auto b = rcf::affine(a, 2.0);
  EXPECT_NO_THROW(a.mutable_data());
  EXPECT_THROW(b.mutable_data(), rcf::Error);
}

TEST(Tape, InputsPrecedeOutputs) {
  auto a = T64::vector({1, 2}, true);
  auto b = rcf::mul(a, a);
  auto c = rcf::sum(b);
  EXPECT_LT(a.id(), b.id());
  EXPECT_LT(b.id(), c.id());
  for (const auto& in : c.node()->inputs) EXPECT_LT(in->id, c.id());
}

TEST(Backward, SumGivesOnes) {
  auto x = oracle::random_tensor({2, 3, 2}, 1, true);
  rcf::backward(rcf::sum(x));
  for (double g : x.grad_data()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(x.grad()->shape(), x.shape());
}

TEST(Backward, SquareGivesTwiceInput) {
  auto x = T64::vector({1, 2, 3}, true);
  rcf::backward(rcf::sum(rcf::mul(x, x)));
  EXPECT_EQ(oracle::to_vec(*x.grad()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarRootRejected) {
  auto x = T64::vector({1, 2}, true);
  EXPECT_THROW(rcf::backward(rcf::affine(x, 2.0)), rcf::ShapeError);
}

TEST(Backward, DetachedRootRejected) {
  auto x = T64::vector({1, 2}, true);
  EXPECT_THROW(rcf::backward(rcf::sum(x).detach()), rcf::ValueError);
  EXPECT_THROW(rcf::backward(rcf::sum(T64::vector({1, 2}))), rcf::ValueError);
}

TEST(Backward, BranchesAccumulateBySum) {
  const auto x0 = oracle::random_tensor({3, 2}, 7);
  auto branch_a = [](const T64& x) { return rcf::sum(rcf::tanh(x)); };
  auto branch_b = [](const T64& x) { return rcf::sum_squares(rcf::sigmoid(x)); };

  T64 xa(x0.shape(), x0.values(), true), xb(x0.shape(), x0.values(), true), x(x0.shape(), x0.values(), true);
  rcf::backward(branch_a(xa));
  rcf::backward(branch_b(xb));
  rcf::backward(rcf::add(branch_a(x), branch_b(x)));
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(x.grad_data()[i], xa.grad_data()[i] + xb.grad_data()[i], 1e-15);
}

TEST(Backward, LeafGradAccumulatesUntilZeroed) {
  auto x = T64::vector({1, 2}, true);
  rcf::backward(rcf::sum(x));
  rcf::backward(rcf::sum(x));
  EXPECT_EQ(x.grad_data()[0], 2.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, GraphReleasedAfterSweep) {
  auto x = T64::vector({1, 2}, true);
  auto y = rcf::mul(x, x);
  auto root = rcf::sum(y);
  rcf::backward(root);
  EXPECT_TRUE(y.node()->inputs.empty());
  EXPECT_FALSE(y.has_grad());
}

TEST(GradMode, NoGradGuardStopsRecording) {
  auto x = T64::vector({1, 2}, true);
  {
    rcf::NoGradGuard guard;
    auto y = rcf::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(rcf::mul(x, x).requires_grad());
}

TEST(Rng, Reproducible) {
  rcf::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  rcf::Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(c.below(7), 7u);
  }
}

TEST(Rng, ShuffleIsPermutation) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rcf::Rng rng(3);
  auto w = v;
  rng.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_NE(rcf::derive_seed(1, 0), rcf::derive_seed(1, 1));
  EXPECT_NE(rcf::derive_seed(1, 0), rcf::derive_seed(2, 0));
  EXPECT_EQ(rcf::derive_seed(5, 9), rcf::derive_seed(5, 9));
}

TEST(Parallel, ConvResultIndependentOfThreadCount) {
  const auto x = oracle::random_tensor({5, 3, 9, 9}, 11, true);
  const auto w = oracle::random_tensor({4, 3, 3, 3}, 12, true);
  std::vector<std::vector<double>> outputs, grads;
  for (std::size_t threads : {1u, 2u, 3u}) {
    rcf::set_num_threads(threads);
    x.node()->grad.clear();
    w.node()->grad.clear();
    auto y = rcf::conv2d<double>(x, w, std::nullopt, 2, 1);
    outputs.push_back(oracle::to_vec(y));
    rcf::backward(rcf::sum_squares(y));
    grads.push_back(std::vector<double>(w.grad_data().begin(), w.grad_data().end()));
  }
  rcf::set_num_threads(1);
  EXPECT_EQ(outputs[0], outputs[1]);
  EXPECT_EQ(outputs[0], outputs[2]);
  EXPECT_EQ(grads[0], grads[1]);
  EXPECT_EQ(grads[0], grads[2]);
}

TEST(Determinism, RepeatedForwardBitIdentical) {
  auto run = [] {
    const auto x = oracle::random_tensor({2, 2, 6, 6}, 5);
    const auto w = oracle::random_tensor({3, 2, 3, 3}, 6);
    return oracle::to_vec(rcf::softmax(rcf::reshape(rcf::conv2d<double>(x, w, std::nullopt, 1, 0), {2, 48})));
  };
  EXPECT_EQ(run(), run());
}
