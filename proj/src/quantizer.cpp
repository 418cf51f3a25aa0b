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

#include "qv2x/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qv2x {

void QuantParams::validate() const {
  if (identity()) return;
  if (bits < 2 || bits > 16) throw std::invalid_argument("QuantParams: bits must be in [2, 16] or 32");
  if (scale.empty() || scale.size() != zero_point.size()) {
    throw std::invalid_argument("QuantParams: scale/zero-point size mismatch");
  }
  if (static_cast<std::int64_t>(q_max) - q_min != (std::int64_t{1} << bits) - 1) {
    throw std::invalid_argument("QuantParams: integer range does not match bit-width");
  }
  for (std::size_t g = 0; g < scale.size(); ++g) {
    if (!(scale[g] > 0.0) || !std::isfinite(scale[g])) {
      throw std::invalid_argument("QuantParams: scale must be positive and finite");
    }
    if (zero_point[g] < q_min || zero_point[g] > q_max) {
      throw std::invalid_argument("QuantParams: zero-point outside integer range");
    }
  }
}

ValueRange observe_range(std::span<const double> x, Granularity g, std::size_t channels) {
  if (x.empty()) throw std::invalid_argument("observe_range: empty tensor");
  const std::size_t groups = g == Granularity::kPerTensor ? 1 : channels;
  if (groups == 0 || x.size() % groups != 0) {
    throw std::invalid_argument("observe_range: tensor size not divisible by channel count");
  }
  ValueRange r;
  r.min.assign(groups, std::numeric_limits<double>::infinity());
  r.max.assign(groups, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t k = groups == 1 ? 0 : i % groups;
    if (!std::isfinite(x[i])) throw std::invalid_argument("observe_range: non-finite value");
    r.min[k] = std::min(r.min[k], x[i]);
    r.max[k] = std::max(r.max[k], x[i]);
  }
  return r;
}

void merge_range(ValueRange& into, const ValueRange& other) {
  if (into.min.empty()) {
    into = other;
    return;
  }
  if (into.min.size() != other.min.size()) throw std::invalid_argument("merge_range: group mismatch");
  for (std::size_t k = 0; k < into.min.size(); ++k) {
    into.min[k] = std::min(into.min[k], other.min[k]);
    into.max[k] = std::max(into.max[k], other.max[k]);
  }
}

double round_half_even(double v) {
  // nearbyint honours the default round-to-nearest-even mode.
  return std::nearbyint(v);
}

QuantParams qparams_from_range(const ValueRange& r, int bits, Granularity g, double scale_factor) {
  if (bits >= 32) return identity_qparams();
  if (bits < 2 || bits > 16) throw std::invalid_argument("bits must be in [2, 16] or 32");
  if (!(scale_factor > 0.0)) throw std::invalid_argument("scale factor must be positive");
  QuantParams qp;
  qp.bits = bits;
  qp.q_min = 0;
  qp.q_max = (std::int32_t{1} << bits) - 1;
  qp.granularity = g;
  const double levels = static_cast<double>(qp.q_max);
  for (std::size_t k = 0; k < r.min.size(); ++k) {
    double lo = r.min[k], hi = r.max[k];
    double s;
    double zf;
    if (hi == lo) {
      s = 1.0 * scale_factor;
      zf = round_half_even(-lo / s);
    } else {
      lo = std::min(lo, 0.0);
      hi = std::max(hi, 0.0);
      s = (hi - lo) / levels * scale_factor;
      zf = round_half_even(-lo / s);
    }
    zf = std::clamp(zf, static_cast<double>(qp.q_min), static_cast<double>(qp.q_max));
    qp.scale.push_back(s);
    qp.zero_point.push_back(static_cast<std::int32_t>(zf));
  }
  return qp;
}

QuantParams identity_qparams() {
  QuantParams qp;
  qp.bits = 32;
  qp.scale = {1.0};
  qp.zero_point = {0};
  qp.q_min = std::numeric_limits<std::int32_t>::min();
  qp.q_max = std::numeric_limits<std::int32_t>::max();
  return qp;
}

QuantParams init_maxmin(std::span<const double> x, int bits, Granularity g, std::size_t channels) {
  if (x.empty()) throw std::invalid_argument("init_maxmin: empty tensor");
  return qparams_from_range(observe_range(x, g, channels), bits, g);
}

namespace {

inline std::int32_t quantize_one(double x, double s, std::int32_t z, std::int32_t lo, std::int32_t hi) {
  const double q = round_half_even(x / s) + static_cast<double>(z);
  return static_cast<std::int32_t>(std::clamp(q, static_cast<double>(lo), static_cast<double>(hi)));
}

}  // namespace

std::vector<std::int32_t> quantize(std::span<const double> x, const QuantParams& qp) {
  if (qp.identity()) throw std::invalid_argument("quantize: pass-through parameters have no integer form");
  std::vector<std::int32_t> out(x.size());
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::size_t g = qp.group_of(static_cast<std::size_t>(i));
    out[static_cast<std::size_t>(i)] =
        quantize_one(x[static_cast<std::size_t>(i)], qp.scale[g], qp.zero_point[g], qp.q_min, qp.q_max);
  }
  return out;
}

std::vector<double> dequantize(std::span<const std::int32_t> xi, const QuantParams& qp) {
  if (qp.identity()) throw std::invalid_argument("dequantize: pass-through parameters have no integer form");
  std::vector<double> out(xi.size());
  for (std::size_t i = 0; i < xi.size(); ++i) {
    const std::size_t g = qp.group_of(i);
    out[i] = qp.scale[g] * static_cast<double>(xi[i] - qp.zero_point[g]);
  }
  return out;
}

void fake_quant_inplace(std::span<double> x, const QuantParams& qp) {
  if (qp.identity()) return;
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::size_t g = qp.group_of(static_cast<std::size_t>(i));
    const std::int32_t q =
        quantize_one(x[static_cast<std::size_t>(i)], qp.scale[g], qp.zero_point[g], qp.q_min, qp.q_max);
    x[static_cast<std::size_t>(i)] = qp.scale[g] * static_cast<double>(q - qp.zero_point[g]);
  }
}

std::vector<double> fake_quant(std::span<const double> x, const QuantParams& qp) {
  std::vector<double> out(x.begin(), x.end());
  fake_quant_inplace(out, qp);
  return out;
}

std::vector<double> scale_grid(double alpha, double beta, int steps) {
  if (!(alpha > 0.0) || alpha > beta || steps < 1) {
    throw std::invalid_argument("scale_grid: need 0 < alpha <= beta and steps >= 1");
  }
  std::vector<double> f(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    f[static_cast<std::size_t>(t)] =
        steps == 1 ? alpha : alpha + (beta - alpha) * static_cast<double>(t) / (steps - 1);
  }
  return f;
}

ScaleSearchResult search_scale_factor(std::span<const double> factors,
                                      const std::function<double(double)>& objective) {
  if (factors.empty()) throw std::invalid_argument("search_scale_factor: no candidates");
  ScaleSearchResult res;
  res.objective.assign(factors.size(), 0.0);
  const auto n = static_cast<std::ptrdiff_t>(factors.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    res.objective[static_cast<std::size_t>(t)] = objective(factors[static_cast<std::size_t>(t)]);
  }
  for (std::size_t t = 0; t < factors.size(); ++t) {
    if (!std::isfinite(res.objective[t])) {
      throw std::runtime_error("scale search: non-finite objective at candidate " + std::to_string(t));
    }
    if (t == 0 || res.objective[t] < res.best_objective) {
      res.best_index = t;
      res.best_objective = res.objective[t];
    }
  }
  res.best_factor = factors[res.best_index];
  return res;
}

QuantParams scale_search(std::span<const double> x, const QuantParams& qp0, double alpha,
                         double beta, int steps, std::size_t channels) {
  if (qp0.identity()) return qp0;
  const ValueRange range = observe_range(x, qp0.granularity, channels);
  const auto grid = scale_grid(alpha, beta, steps);
  // Candidate scales are factor * s0 per group; the zero-point follows from the range.
  auto candidate = [&](double f) {
    QuantParams qp = qp0;
    for (std::size_t g = 0; g < qp.groups(); ++g) {
      qp.scale[g] = qp0.scale[g] * f;
      const double lo = std::min(range.min[g], 0.0);
      const double zf = range.min[g] == range.max[g] ? round_half_even(-range.min[g] / qp.scale[g])
                                                     : round_half_even(-lo / qp.scale[g]);
      qp.zero_point[g] = static_cast<std::int32_t>(
          std::clamp(zf, static_cast<double>(qp.q_min), static_cast<double>(qp.q_max)));
    }
    return qp;
  };
  auto res = search_scale_factor(grid, [&](double f) {
    const QuantParams qp = candidate(f);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t g = qp.group_of(i);
      const std::int32_t q = quantize_one(x[i], qp.scale[g], qp.zero_point[g], qp.q_min, qp.q_max);
      const double d = x[i] - qp.scale[g] * static_cast<double>(q - qp.zero_point[g]);
      err += d * d;
    }
    return err;
  });
  return candidate(res.best_factor);
}

std::uint64_t tensor_size_bytes(std::uint64_t count, std::uint64_t groups, int bits) {
  return (count * static_cast<std::uint64_t>(bits) + 7) / 8 + groups * 8;
}

}  // namespace qv2x
