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

#include "qv2x/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "qv2x/byte_io.hpp"

namespace qv2x {

bool FeatureGrid::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void FeatureGrid::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const FeatureGrid& a, const FeatureGrid& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                                "x" + std::to_string(a.channels()) + " vs " +
                                std::to_string(b.height()) + "x" + std::to_string(b.width()) +
                                "x" + std::to_string(b.channels()) + ")");
  }
}

double normalize_angle(double a) {
  constexpr double kPi = std::numbers::pi;
  double r = std::fmod(a, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  if (r > kPi) r -= 2.0 * kPi;
  return r;
}

Pose2D make_pose(double x, double y, double yaw) { return Pose2D{x, y, normalize_angle(yaw)}; }

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t RngStream::next_u64() {
  std::uint64_t v = mix64(seed_ ^ mix64(counter_ * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
  ++counter_;
  return v;
}

double RngStream::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  // Box-Muller; u1 in (0, 1] keeps the log finite.
  double u1 = 1.0 - uniform01();
  double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

RngStream RngStream::split(std::uint64_t tag) const {
  return RngStream(mix64(seed_ ^ mix64(tag ^ 0x6a09e667f3bcc909ULL)), 0);
}

double rng_uniform(RngStream& stream, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("rng_uniform: lo > hi");
  double u = stream.uniform01();
  if (lo == hi) return lo;
  double v = lo + (hi - lo) * u;
  return v < hi ? v : std::nextafter(hi, lo);
}

double frobenius_norm(const FeatureGrid& g) {
  double s = 0.0;
  for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

double squared_distance(const FeatureGrid& a, const FeatureGrid& b) {
  require_same_shape(a, b, "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace {

double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

double kl_divergence(const FeatureGrid& p, const FeatureGrid& q) {
  require_same_shape(p, q, "kl_divergence");
  if (p.empty()) return 0.0;
  const double lp = log_sum_exp(p.values());
  const double lq = log_sum_exp(q.values());
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double log_p = p[i] - lp;
    const double log_q = q[i] - lq;
    kl += std::exp(log_p) * (log_p - log_q);
  }
  return std::max(kl, 0.0);
}

namespace {

double snap(double v) {
  double r = std::nearbyint(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace

WarpPlan make_warp_plan(std::size_t height, std::size_t width, const Pose2D& from,
                        const Pose2D& to, double meters_per_cell) {
  if (!(meters_per_cell > 0.0)) throw std::invalid_argument("warp: meters_per_cell must be > 0");
  WarpPlan plan;
  plan.height = height;
  plan.width = width;
  if (from == to) {
    plan.identity = true;
    return plan;
  }
  const std::size_t n = height * width;
  plan.src.assign(4 * n, -1);
  plan.weight.assign(4 * n, 0.0);

  const double ct = std::cos(to.yaw), st = std::sin(to.yaw);
  const double cf = std::cos(from.yaw), sf = std::sin(from.yaw);
  const double half_w = 0.5 * static_cast<double>(width);
  const double half_h = 0.5 * static_cast<double>(height);

  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      // Cell centre in the destination frame, then world, then source frame.
      const double lx = (static_cast<double>(c) + 0.5 - half_w) * meters_per_cell;
      const double ly = (static_cast<double>(r) + 0.5 - half_h) * meters_per_cell;
      const double wx = ct * lx - st * ly + to.x - from.x;
      const double wy = st * lx + ct * ly + to.y - from.y;
      const double sx = cf * wx + sf * wy;
      const double sy = -sf * wx + cf * wy;
      const double col = snap(sx / meters_per_cell + half_w - 0.5);
      const double row = snap(sy / meters_per_cell + half_h - 0.5);

      const double c0 = std::floor(col), r0 = std::floor(row);
      const double fc = col - c0, fr = row - r0;
      const std::size_t base = 4 * (r * width + c);
      const double taps_w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
      const double taps_r[4] = {r0, r0, r0 + 1, r0 + 1};
      const double taps_c[4] = {c0, c0 + 1, c0, c0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (taps_w[t] == 0.0) continue;
        if (taps_r[t] < 0 || taps_c[t] < 0 || taps_r[t] >= static_cast<double>(height) ||
            taps_c[t] >= static_cast<double>(width)) {
          continue;
        }
        plan.src[base + t] = static_cast<std::int32_t>(taps_r[t]) * static_cast<std::int32_t>(width) +
                             static_cast<std::int32_t>(taps_c[t]);
        plan.weight[base + t] = taps_w[t];
      }
    }
  }
  return plan;
}

FeatureGrid apply_warp(const WarpPlan& plan, const FeatureGrid& g) {
  if (g.height() != plan.height || g.width() != plan.width) {
    throw std::invalid_argument("apply_warp: grid does not match plan");
  }
  if (plan.identity) return g;
  const std::size_t ch = g.channels();
  FeatureGrid out(g.height(), g.width(), ch);
  const std::size_t n = g.cells();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    double* dst = out.data() + static_cast<std::size_t>(i) * ch;
    for (int t = 0; t < 4; ++t) {
      const auto s = plan.src[4 * static_cast<std::size_t>(i) + t];
      if (s < 0) continue;
      const double w = plan.weight[4 * static_cast<std::size_t>(i) + t];
      const double* src = g.data() + static_cast<std::size_t>(s) * ch;
      for (std::size_t c = 0; c < ch; ++c) dst[c] += w * src[c];
    }
  }
  return out;
}

FeatureGrid apply_warp_adjoint(const WarpPlan& plan, const FeatureGrid& grad_out) {
  if (plan.identity) return grad_out;
  const std::size_t ch = grad_out.channels();
  FeatureGrid grad_in(grad_out.height(), grad_out.width(), ch);
  // Scatter; kept serial so the accumulation order is fixed.
  for (std::size_t i = 0; i < grad_out.cells(); ++i) {
    const double* g = grad_out.data() + i * ch;
    for (int t = 0; t < 4; ++t) {
      const auto s = plan.src[4 * i + t];
      if (s < 0) continue;
      const double w = plan.weight[4 * i + t];
      double* dst = grad_in.data() + static_cast<std::size_t>(s) * ch;
      for (std::size_t c = 0; c < ch; ++c) dst[c] += w * g[c];
    }
  }
  return grad_in;
}

FeatureGrid bilinear_warp(const FeatureGrid& g, const Pose2D& from, const Pose2D& to,
                          double meters_per_cell) {
  return apply_warp(make_warp_plan(g.height(), g.width(), from, to, meters_per_cell), g);
}

std::vector<std::uint8_t> serialize_grid(const FeatureGrid& g) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(g.height()));
  w.u32(static_cast<std::uint32_t>(g.width()));
  w.u32(static_cast<std::uint32_t>(g.channels()));
  for (double v : g.values()) w.f32(static_cast<float>(v));
  return w.take();
}

FeatureGrid deserialize_grid(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::size_t h = r.u32(), w = r.u32(), c = r.u32();
  if (r.remaining() / 4 < h * w * c) throw TruncatedInput("grid payload shorter than its shape");
  FeatureGrid g(h, w, c);
  for (double& v : g.values()) v = r.f32();
  if (r.remaining() != 0) throw std::runtime_error("grid file has trailing bytes");
  return g;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void save_grid(const std::string& path, const FeatureGrid& g) { write_file_bytes(path, serialize_grid(g)); }

FeatureGrid load_grid(const std::string& path) { return deserialize_grid(read_file_bytes(path)); }

}  // namespace qv2x
