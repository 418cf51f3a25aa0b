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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qv2x/numerics.hpp"

namespace qv2x {

enum class Modality : std::uint8_t { kDense = 0, kSparse = 1 };
inline constexpr std::size_t kModalityCount = 2;

const char* modality_name(Modality m);
Modality parse_modality(const std::string& s);

struct SceneObject {
  double x = 0.0;  // world meters, centre of an axis-aligned square
  double y = 0.0;
  double half_extent = 1.0;
  double velocity_x = 0.0;  // m/s
  double velocity_y = 0.0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct AgentConfig {
  int id = 0;
  Pose2D pose;
  double fov_radius = 14.0;
  double sensor_noise_sigma = 0.05;
  Modality modality = Modality::kDense;
  double dropout_prob = 0.05;

  friend bool operator==(const AgentConfig&, const AgentConfig&) = default;
};

struct Roi {
  double width_m = 48.0;
  double height_m = 48.0;
  double meters_per_cell = 0.5;

  std::size_t rows() const;
  std::size_t cols() const;
  /// Pose of the ROI-aligned grid: centred on the ROI, yaw 0.
  Pose2D pose() const { return Pose2D{0.5 * width_m, 0.5 * height_m, 0.0}; }

  friend bool operator==(const Roi&, const Roi&) = default;
};

struct Frame {
  double timestamp_ms = 0.0;
  std::vector<SceneObject> objects;

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct Scenario {
  std::uint64_t seed = 0;
  Roi roi;
  std::vector<AgentConfig> agents;
  std::vector<Frame> frames;

  const AgentConfig& agent(int id) const;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

struct ScenarioOptions {
  int n_agents = 3;
  int n_objects = 12;
  int n_frames = 10;
  double frame_dt_ms = 100.0;
  Roi roi;
  double fov_radius = 14.0;
  double dense_noise = 0.05;
  double dense_dropout = 0.05;
  double sparse_noise = 0.15;
  double sparse_dropout = 0.3;
  double min_speed = 4.0;  // m/s
  double max_speed = 12.0;
  double min_half_extent = 1.0;
  double max_half_extent = 2.0;
};

Scenario gen_scenario(std::uint64_t seed, const ScenarioOptions& opts);
Scenario gen_scenario(std::uint64_t seed, int n_agents, int n_objects, int n_frames,
                      double frame_dt_ms);

/// Occupancy observation in the agent's local grid. Out-of-FOV cells are
/// exactly zero; in-FOV cells get dropout on occupied cells and additive
/// Gaussian noise.
FeatureGrid observe(const Scenario& scenario, int agent_id, std::size_t frame_idx, RngStream& rng);

/// Binary footprint of all objects, rasterised in the ROI frame.
FeatureGrid label_grid(const Scenario& scenario, std::size_t frame_idx);
/// Same, rasterised in the grid centred on `grid_pose`.
FeatureGrid label_grid(const Scenario& scenario, std::size_t frame_idx, const Pose2D& grid_pose);

/// Per positive cell: offset from the cell centre to the nearest covering
/// object's centre, in cells, expressed in the grid frame. Zero elsewhere.
struct OffsetTargets {
  FeatureGrid dx;
  FeatureGrid dy;
};
OffsetTargets offset_targets(const Scenario& scenario, std::size_t frame_idx,
                             const Pose2D& grid_pose);

Pose2D perturb_pose(const Pose2D& pose, double sigma_trans_m, double sigma_rot_rad, RngStream& rng);

nlohmann::json scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j);

}  // namespace qv2x
