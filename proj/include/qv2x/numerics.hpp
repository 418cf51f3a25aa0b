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
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qv2x {

/// Dense H x W x C real tensor stored row-major (h, then w, then c).
///
/// This is the currency passed between every pipeline stage: observations,
/// encoder features, fused features and detection maps are all FeatureGrids.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels),
        data_(height * width * channels, fill) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t cells() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(std::size_t h, std::size_t w, std::size_t c = 0) {
    return data_[(h * width_ + w) * channels_ + c];
  }
  double at(std::size_t h, std::size_t w, std::size_t c = 0) const {
    return data_[(h * width_ + w) * channels_ + c];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const FeatureGrid& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool all_finite() const;
  void fill(double v);

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

// Throws std::invalid_argument when shapes differ.
void require_same_shape(const FeatureGrid& a, const FeatureGrid& b, const char* what);

struct Pose2D {
  double x = 0.0;    // meters
  double y = 0.0;    // meters
  double yaw = 0.0;  // radians, in (-pi, pi]

  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// Wraps an angle into (-pi, pi].
double normalize_angle(double a);
Pose2D make_pose(double x, double y, double yaw);

/// Counter-based random stream. Draw k of a stream depends only on (seed, k),
/// so child streams obtained with split() can be consumed in any order or on
/// any thread without changing the values they produce.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform01();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream keyed by tag; does not advance this stream.
  RngStream split(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);

/// Deterministic draw in [lo, hi); returns lo when lo == hi.
double rng_uniform(RngStream& stream, double lo, double hi);

double frobenius_norm(const FeatureGrid& g);
double squared_distance(const FeatureGrid& a, const FeatureGrid& b);

/// D_KL(softmax(p) || softmax(q)) in nats, both softmaxes taken over the
/// flattened tensor.
double kl_divergence(const FeatureGrid& p, const FeatureGrid& q);

/// Per output cell: up to four source cells and their bilinear weights.
/// Source index -1 marks an out-of-bounds tap (contributes zero).
struct WarpPlan {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> src;  // 4 per cell
  std::vector<double> weight;     // 4 per cell
  bool identity = false;
};

/// Sampling plan for resampling a grid expressed in the `from` frame into
/// the `to` frame. Grids are centred on their pose, x along columns.
WarpPlan make_warp_plan(std::size_t height, std::size_t width, const Pose2D& from,
                        const Pose2D& to, double meters_per_cell);

FeatureGrid apply_warp(const WarpPlan& plan, const FeatureGrid& g);
/// Adjoint of apply_warp: scatters output gradients back onto the source grid.
FeatureGrid apply_warp_adjoint(const WarpPlan& plan, const FeatureGrid& grad_out);

FeatureGrid bilinear_warp(const FeatureGrid& g, const Pose2D& from, const Pose2D& to,
                          double meters_per_cell);

// Fixture format: u32 h, u32 w, u32 c, then h*w*c little-endian f32.
std::vector<std::uint8_t> serialize_grid(const FeatureGrid& g);
FeatureGrid deserialize_grid(std::span<const std::uint8_t> bytes);
void save_grid(const std::string& path, const FeatureGrid& g);
FeatureGrid load_grid(const std::string& path);

}  // namespace qv2x
