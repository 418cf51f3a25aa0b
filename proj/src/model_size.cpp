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

#include <stdexcept>

#include "qv2x/pipeline.hpp"
#include "qv2x/quantizer.hpp"

namespace qv2x {

std::uint64_t model_size_bytes(const ModelParams& params, int bits) {
  if (bits != 4 && bits != 8 && bits != 16 && bits != 32) {
    throw std::invalid_argument("model_size_bytes: bits must be 4, 8, 16 or 32");
  }
  std::uint64_t total = 0;
  for (const auto& l : params.layers) total += tensor_size_bytes(l.weight.size(), l.spec.out_channels, bits);
  return total;
}

}  // namespace qv2x
