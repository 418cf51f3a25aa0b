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

#pragma once

#include <cstddef>

namespace qv2x::kernels {

/// Stride-1 convolution over an HWC grid with zero padding (kernel-1)/2.
/// Weights are laid out [ky][kx][in_ch][out_ch]; kernel is 1 or 3.
struct ConvShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  int kernel = 3;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kernel * kernel) * in_ch * out_ch;
  }
};

// OpenMP kernels. Work is split over output rows (or weight slices) and each
// output element is reduced in a fixed order, so results do not depend on the
// thread count.
void conv_forward(const ConvShape& s, const double* in, const double* weight, const double* bias,
                  double* out);
void conv_backward_input(const ConvShape& s, const double* grad_out, const double* weight,
                         double* grad_in);
// Accumulates into grad_weight / grad_bias.
void conv_backward_weights(const ConvShape& s, const double* in, const double* grad_out,
                           double* grad_weight, double* grad_bias);

int max_threads();
void set_threads(int n);

namespace reference {

// Straightforward serial loops over the defining sums. Kept for tests and
// the benchmark; not used on any production path.
void conv_forward(const ConvShape& s, const double* in, const double* weight, const double* bias,
                  double* out);
void conv_backward_input(const ConvShape& s, const double* grad_out, const double* weight,
                         double* grad_in);
void conv_backward_weights(const ConvShape& s, const double* in, const double* grad_out,
                           double* grad_weight, double* grad_bias);

}  // namespace reference

}  // namespace qv2x::kernels
