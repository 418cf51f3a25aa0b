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

#include <cstddef>

#include "qv2x/kernels.hpp"

namespace qv2x::kernels::reference {

namespace {

inline std::size_t widx(const ConvShape& s, int ky, int kx, std::size_t ci, std::size_t co) {
  return ((static_cast<std::size_t>(ky * s.kernel + kx)) * s.in_ch + ci) * s.out_ch + co;
}

}  // namespace

void conv_forward(const ConvShape& s, const double* in, const double* weight, const double* bias,
                  double* out) {
  const int pad = (s.kernel - 1) / 2;
  for (std::size_t h = 0; h < s.height; ++h) {
    for (std::size_t w = 0; w < s.width; ++w) {
      for (std::size_t co = 0; co < s.out_ch; ++co) {
        double acc = bias ? bias[co] : 0.0;
        for (int ky = 0; ky < s.kernel; ++ky) {
          for (int kx = 0; kx < s.kernel; ++kx) {
            const long ih = static_cast<long>(h) + ky - pad;
            const long iw = static_cast<long>(w) + kx - pad;
            if (ih < 0 || iw < 0 || ih >= static_cast<long>(s.height) ||
                iw >= static_cast<long>(s.width)) {
              continue;
            }
            for (std::size_t ci = 0; ci < s.in_ch; ++ci) {
              acc += in[(static_cast<std::size_t>(ih) * s.width + static_cast<std::size_t>(iw)) *
                            s.in_ch +
                        ci] *
                     weight[widx(s, ky, kx, ci, co)];
            }
          }
        }
        out[(h * s.width + w) * s.out_ch + co] = acc;
      }
    }
  }
}

void conv_backward_input(const ConvShape& s, const double* grad_out, const double* weight,
                         double* grad_in) {
  const int pad = (s.kernel - 1) / 2;
  for (std::size_t i = 0; i < s.height * s.width * s.in_ch; ++i) grad_in[i] = 0.0;
  for (std::size_t h = 0; h < s.height; ++h) {
    for (std::size_t w = 0; w < s.width; ++w) {
      for (int ky = 0; ky < s.kernel; ++ky) {
        for (int kx = 0; kx < s.kernel; ++kx) {
          const long ih = static_cast<long>(h) + ky - pad;
          const long iw = static_cast<long>(w) + kx - pad;
          if (ih < 0 || iw < 0 || ih >= static_cast<long>(s.height) ||
              iw >= static_cast<long>(s.width)) {
            continue;
          }
          for (std::size_t ci = 0; ci < s.in_ch; ++ci) {
            for (std::size_t co = 0; co < s.out_ch; ++co) {
              grad_in[(static_cast<std::size_t>(ih) * s.width + static_cast<std::size_t>(iw)) *
                          s.in_ch +
                      ci] += grad_out[(h * s.width + w) * s.out_ch + co] *
                             weight[widx(s, ky, kx, ci, co)];
            }
          }
        }
      }
    }
  }
}

void conv_backward_weights(const ConvShape& s, const double* in, const double* grad_out,
                           double* grad_weight, double* grad_bias) {
  const int pad = (s.kernel - 1) / 2;
  for (std::size_t h = 0; h < s.height; ++h) {
    for (std::size_t w = 0; w < s.width; ++w) {
      for (std::size_t co = 0; co < s.out_ch; ++co) {
        const double g = grad_out[(h * s.width + w) * s.out_ch + co];
        if (grad_bias) grad_bias[co] += g;
        for (int ky = 0; ky < s.kernel; ++ky) {
          for (int kx = 0; kx < s.kernel; ++kx) {
            const long ih = static_cast<long>(h) + ky - pad;
            const long iw = static_cast<long>(w) + kx - pad;
            if (ih < 0 || iw < 0 || ih >= static_cast<long>(s.height) ||
                iw >= static_cast<long>(s.width)) {
              continue;
            }
            for (std::size_t ci = 0; ci < s.in_ch; ++ci) {
              grad_weight[widx(s, ky, kx, ci, co)] +=
                  g * in[(static_cast<std::size_t>(ih) * s.width + static_cast<std::size_t>(iw)) *
                             s.in_ch +
                         ci];
            }
          }
        }
      }
    }
  }
}

}  // namespace qv2x::kernels::reference
