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

#include <algorithm>
#include <cstddef>

#include "qv2x/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qv2x::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

namespace {

// Valid output-column range [lo, hi) for a tap offset dx = kx - pad.
inline void col_range(std::ptrdiff_t width, std::ptrdiff_t dx, std::ptrdiff_t& lo,
                      std::ptrdiff_t& hi) {
  lo = std::max<std::ptrdiff_t>(0, -dx);
  hi = std::min<std::ptrdiff_t>(width, width - dx);
}

}  // namespace

void conv_forward(const ConvShape& s, const double* in, const double* weight, const double* bias,
                  double* out) {
  const auto H = static_cast<std::ptrdiff_t>(s.height);
  const auto W = static_cast<std::ptrdiff_t>(s.width);
  const std::size_t cin = s.in_ch, cout = s.out_ch;
  const int k = s.kernel, pad = (s.kernel - 1) / 2;

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t h = 0; h < H; ++h) {
    double* orow = out + static_cast<std::size_t>(h * W) * cout;
    for (std::ptrdiff_t w = 0; w < W; ++w) {
      double* o = orow + static_cast<std::size_t>(w) * cout;
      for (std::size_t co = 0; co < cout; ++co) o[co] = bias ? bias[co] : 0.0;
    }
    for (int ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t ih = h + ky - pad;
      if (ih < 0 || ih >= H) continue;
      for (int kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dx = kx - pad;
        std::ptrdiff_t lo, hi;
        col_range(W, dx, lo, hi);
        const double* wk = weight + static_cast<std::size_t>(ky * k + kx) * cin * cout;
        for (std::ptrdiff_t w = lo; w < hi; ++w) {
          const double* x = in + static_cast<std::size_t>(ih * W + w + dx) * cin;
          double* o = orow + static_cast<std::size_t>(w) * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = x[ci];
            if (xv == 0.0) continue;
            const double* wr = wk + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wr[co];
          }
        }
      }
    }
  }
}

void conv_backward_input(const ConvShape& s, const double* grad_out, const double* weight,
                         double* grad_in) {
  const auto H = static_cast<std::ptrdiff_t>(s.height);
  const auto W = static_cast<std::ptrdiff_t>(s.width);
  const std::size_t cin = s.in_ch, cout = s.out_ch;
  const int k = s.kernel, pad = (s.kernel - 1) / 2;

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ih = 0; ih < H; ++ih) {
    double* irow = grad_in + static_cast<std::size_t>(ih * W) * cin;
    std::fill(irow, irow + static_cast<std::size_t>(W) * cin, 0.0);
    for (int ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t oh = ih - ky + pad;
      if (oh < 0 || oh >= H) continue;
      for (int kx = 0; kx < k; ++kx) {
        // ow = iw - dx
        const std::ptrdiff_t dx = kx - pad;
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, dx);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(W, W + dx);
        const double* wk = weight + static_cast<std::size_t>(ky * k + kx) * cin * cout;
        for (std::ptrdiff_t iw = lo; iw < hi; ++iw) {
          const double* g = grad_out + static_cast<std::size_t>(oh * W + iw - dx) * cout;
          double* gi = irow + static_cast<std::size_t>(iw) * cin;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* wr = wk + ci * cout;
            double acc = 0.0;
            for (std::size_t co = 0; co < cout; ++co) acc += g[co] * wr[co];
            gi[ci] += acc;
          }
        }
      }
    }
  }
}

void conv_backward_weights(const ConvShape& s, const double* in, const double* grad_out,
                           double* grad_weight, double* grad_bias) {
  const auto H = static_cast<std::ptrdiff_t>(s.height);
  const auto W = static_cast<std::ptrdiff_t>(s.width);
  const std::size_t cin = s.in_ch, cout = s.out_ch;
  const int k = s.kernel, pad = (s.kernel - 1) / 2;
  const auto tasks = static_cast<std::ptrdiff_t>(k * k) * static_cast<std::ptrdiff_t>(cin);

  // Each task owns one (tap, input channel) slice of the weight gradient.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < tasks; ++t) {
    const int tap = static_cast<int>(t / static_cast<std::ptrdiff_t>(cin));
    const std::size_t ci = static_cast<std::size_t>(t % static_cast<std::ptrdiff_t>(cin));
    const int ky = tap / k, kx = tap % k;
    const std::ptrdiff_t dy = ky - pad, dx = kx - pad;
    double* gw = grad_weight + (static_cast<std::size_t>(tap) * cin + ci) * cout;
    std::ptrdiff_t lo, hi;
    col_range(W, dx, lo, hi);
    for (std::ptrdiff_t h = std::max<std::ptrdiff_t>(0, -dy);
         h < std::min<std::ptrdiff_t>(H, H - dy); ++h) {
      for (std::ptrdiff_t w = lo; w < hi; ++w) {
        const double xv = in[static_cast<std::size_t>((h + dy) * W + w + dx) * cin + ci];
        if (xv == 0.0) continue;
        const double* g = grad_out + static_cast<std::size_t>(h * W + w) * cout;
        for (std::size_t co = 0; co < cout; ++co) gw[co] += xv * g[co];
      }
    }
  }

  if (grad_bias) {
    const std::size_t n = s.height * s.width;
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = grad_out + i * cout;
      for (std::size_t co = 0; co < cout; ++co) grad_bias[co] += g[co];
    }
  }
}

}  // namespace qv2x::kernels
