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

// Serial reference vs OpenMP convolution kernels on the toy model's shapes.
// On a single-core host the OpenMP numbers only show the threading overhead.

#include <benchmark/benchmark.h>

#include <vector>

#include "qv2x/kernels.hpp"
#include "qv2x/numerics.hpp"

namespace {

using qv2x::kernels::ConvShape;

struct Buffers {
  explicit Buffers(const ConvShape& s)
      : in(s.height * s.width * s.in_ch), w(s.weight_count()), b(s.out_ch), out(s.height * s.width * s.out_ch) {
    qv2x::RngStream rng(1);
    for (double& v : in) v = rng.normal();
    for (double& v : w) v = 0.1 * rng.normal();
    for (double& v : b) v = 0.1 * rng.normal();
  }
  std::vector<double> in, w, b, out;
};

ConvShape shape(const benchmark::State& st) {
  return ConvShape{96, 96, static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
                   static_cast<int>(st.range(2))};
}

void BM_ConvForwardSerial(benchmark::State& st) {
  const auto s = shape(st);
  Buffers buf(s);
  for (auto _ : st) {
    qv2x::kernels::reference::conv_forward(s, buf.in.data(), buf.w.data(), buf.b.data(), buf.out.data());
    benchmark::DoNotOptimize(buf.out.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(s.height * s.width));
}

void BM_ConvForwardOmp(benchmark::State& st) {
  const auto s = shape(st);
  Buffers buf(s);
  qv2x::kernels::set_threads(static_cast<int>(st.range(3)));
  for (auto _ : st) {
    qv2x::kernels::conv_forward(s, buf.in.data(), buf.w.data(), buf.b.data(), buf.out.data());
    benchmark::DoNotOptimize(buf.out.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<long>(s.height * s.width));
}

void BM_ConvBackwardWeightsSerial(benchmark::State& st) {
  const auto s = shape(st);
  Buffers buf(s);
  std::vector<double> gw(s.weight_count()), gb(s.out_ch);
  for (auto _ : st) {
    qv2x::kernels::reference::conv_backward_weights(s, buf.in.data(), buf.out.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

void BM_ConvBackwardWeightsOmp(benchmark::State& st) {
  const auto s = shape(st);
  Buffers buf(s);
  std::vector<double> gw(s.weight_count()), gb(s.out_ch);
  qv2x::kernels::set_threads(static_cast<int>(st.range(3)));
  for (auto _ : st) {
    qv2x::kernels::conv_backward_weights(s, buf.in.data(), buf.out.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

// (in_ch, out_ch, kernel): encoder conv1, encoder conv2, fusion conv.
#define QV2X_SHAPES ->UseRealTime()->Args({1, 8, 3})->Args({8, 16, 3})->Args({16, 16, 3})
#define QV2X_SHAPES_T ->UseRealTime()->Args({1, 8, 3, 1})->Args({8, 16, 3, 1})->Args({16, 16, 3, 1})->Args({16, 16, 3, 2})->Args({16, 16, 3, 4})

BENCHMARK(BM_ConvForwardSerial) QV2X_SHAPES;
BENCHMARK(BM_ConvForwardOmp) QV2X_SHAPES_T;
BENCHMARK(BM_ConvBackwardWeightsSerial) QV2X_SHAPES;
BENCHMARK(BM_ConvBackwardWeightsOmp) QV2X_SHAPES_T;

}  // namespace

BENCHMARK_MAIN();
