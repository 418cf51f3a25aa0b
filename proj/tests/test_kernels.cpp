/*
 * Copyright (c) 2026 The qv2x Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "qv2x/kernels.hpp"
#include "qv2x/numerics.hpp"

namespace qv2x::kernels {
namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double zero_fraction = 0.0) {
  RngStream rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform01() < zero_fraction ? 0.0 : rng.normal();
  return v;
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-11 * (1.0 + std::abs(b[i]))) << "index " << i;
  }
}

class ConvAgreement : public ::testing::TestWithParam<ConvShape> {};

TEST_P(ConvAgreement, ForwardMatchesReference) {
  const ConvShape s = GetParam();
  const auto in = random_vec(s.height * s.width * s.in_ch, 1, 0.3);
  const auto w = random_vec(s.weight_count(), 2);
  const auto b = random_vec(s.out_ch, 3);
  std::vector<double> out(s.height * s.width * s.out_ch), ref(out.size());
  conv_forward(s, in.data(), w.data(), b.data(), out.data());
  reference::conv_forward(s, in.data(), w.data(), b.data(), ref.data());
  expect_close(out, ref);
}

TEST_P(ConvAgreement, BackwardInputMatchesReference) {
  const ConvShape s = GetParam();
  const auto g = random_vec(s.height * s.width * s.out_ch, 4);
  const auto w = random_vec(s.weight_count(), 5);
  std::vector<double> gi(s.height * s.width * s.in_ch, 7.0), ref(gi.size());
  conv_backward_input(s, g.data(), w.data(), gi.data());
  reference::conv_backward_input(s, g.data(), w.data(), ref.data());
  expect_close(gi, ref);
}

TEST_P(ConvAgreement, BackwardWeightsMatchesReference) {
  const ConvShape s = GetParam();
  const auto in = random_vec(s.height * s.width * s.in_ch, 6, 0.3);
  const auto g = random_vec(s.height * s.width * s.out_ch, 7);
  // Both accumulate onto the same non-zero starting buffers.
  std::vector<double> gw(s.weight_count(), 0.5), gb(s.out_ch, -0.25);
  std::vector<double> rw = gw, rb = gb;
  conv_backward_weights(s, in.data(), g.data(), gw.data(), gb.data());
  reference::conv_backward_weights(s, in.data(), g.data(), rw.data(), rb.data());
  expect_close(gw, rw);
  expect_close(gb, rb);
}

TEST_P(ConvAgreement, AdjointIdentity) {
  // <conv(x), y> = <x, conv_backward_input(y)> without bias.
  const ConvShape s = GetParam();
  const auto x = random_vec(s.height * s.width * s.in_ch, 8);
  const auto y = random_vec(s.height * s.width * s.out_ch, 9);
  const auto w = random_vec(s.weight_count(), 10);
  std::vector<double> cx(y.size()), aty(x.size());
  conv_forward(s, x.data(), w.data(), nullptr, cx.data());
  conv_backward_input(s, y.data(), w.data(), aty.data());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
  EXPECT_NEAR(lhs, rhs, 1e-9 * (1 + std::abs(lhs)));
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvAgreement,
                         ::testing::Values(ConvShape{1, 1, 1, 1, 3}, ConvShape{5, 7, 3, 4, 3},
                                           ConvShape{8, 8, 1, 8, 3}, ConvShape{6, 9, 16, 3, 1},
                                           ConvShape{2, 3, 2, 2, 3}, ConvShape{13, 11, 8, 16, 3}));

TEST(ConvThreads, ResultsIndependentOfThreadCount) {
  const ConvShape s{24, 20, 8, 16, 3};
  const auto in = random_vec(s.height * s.width * s.in_ch, 11, 0.2);
  const auto w = random_vec(s.weight_count(), 12);
  const auto g = random_vec(s.height * s.width * s.out_ch, 13);
  const int saved = max_threads();
  std::vector<std::vector<double>> fwd, bwi, bww;
  for (int t : {1, 3, 4}) {
    set_threads(t);
    std::vector<double> o(s.height * s.width * s.out_ch), gi(in.size()), gw(w.size(), 0.0);
    conv_forward(s, in.data(), w.data(), nullptr, o.data());
    conv_backward_input(s, g.data(), w.data(), gi.data());
    conv_backward_weights(s, in.data(), g.data(), gw.data(), nullptr);
    fwd.push_back(o);
    bwi.push_back(gi);
    bww.push_back(gw);
  }
  set_threads(saved);
  for (std::size_t k = 1; k < fwd.size(); ++k) {
    EXPECT_EQ(fwd[k], fwd[0]);
    EXPECT_EQ(bwi[k], bwi[0]);
    EXPECT_EQ(bww[k], bww[0]);
  }
}

}  // namespace
}  // namespace qv2x::kernels
