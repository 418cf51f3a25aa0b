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

#include "qv2x/scene.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace qv2x {

const char* modality_name(Modality m) { return m == Modality::kDense ? "dense" : "sparse"; }

Modality parse_modality(const std::string& s) {
  if (s == "dense") return Modality::kDense;
  if (s == "sparse") return Modality::kSparse;
  throw std::invalid_argument("unknown modality tag: " + s);
}

std::size_t Roi::rows() const { return static_cast<std::size_t>(std::lround(height_m / meters_per_cell)); }
std::size_t Roi::cols() const { return static_cast<std::size_t>(std::lround(width_m / meters_per_cell)); }

const AgentConfig& Scenario::agent(int id) const {
  for (const auto& a : agents) {
    if (a.id == id) return a;
  }
  throw std::out_of_range("no agent with id " + std::to_string(id));
}

Scenario gen_scenario(std::uint64_t seed, const ScenarioOptions& opts) {
  if (opts.n_agents < 1 || opts.n_objects < 0 || opts.n_frames < 1) {
    throw std::invalid_argument("gen_scenario: need n_agents >= 1, n_objects >= 0, n_frames >= 1");
  }
  constexpr double kPi = std::numbers::pi;
  Scenario s;
  s.seed = seed;
  s.roi = opts.roi;
  RngStream agent_rng = RngStream(seed).split(1);
  RngStream object_rng = RngStream(seed).split(2);

  const double cx = 0.5 * opts.roi.width_m, cy = 0.5 * opts.roi.height_m;
  const double ring = 0.3 * std::min(opts.roi.width_m, opts.roi.height_m);
  const double phase = rng_uniform(agent_rng, -kPi, kPi);
  for (int i = 0; i < opts.n_agents; ++i) {
    AgentConfig a;
    a.id = i;
    if (i == 0) {
      a.pose = make_pose(cx + rng_uniform(agent_rng, -1.0, 1.0), cy + rng_uniform(agent_rng, -1.0, 1.0),
                         rng_uniform(agent_rng, -0.3, 0.3));
    } else {
      const double ang = phase + 2.0 * kPi * (i - 1) / std::max(1, opts.n_agents - 1) +
                         rng_uniform(agent_rng, -0.3, 0.3);
      const double rad = ring * rng_uniform(agent_rng, 0.85, 1.15);
      a.pose = make_pose(cx + rad * std::cos(ang), cy + rad * std::sin(ang),
                         rng_uniform(agent_rng, -kPi, kPi));
    }
    a.fov_radius = opts.fov_radius;
    a.modality = (i % 2 == 0) ? Modality::kDense : Modality::kSparse;
    a.sensor_noise_sigma = a.modality == Modality::kDense ? opts.dense_noise : opts.sparse_noise;
    a.dropout_prob = a.modality == Modality::kDense ? opts.dense_dropout : opts.sparse_dropout;
    s.agents.push_back(a);
  }

  std::vector<SceneObject> initial;
  const double margin = opts.max_half_extent;
  for (int i = 0; i < opts.n_objects; ++i) {
    SceneObject o;
    o.half_extent = rng_uniform(object_rng, opts.min_half_extent, opts.max_half_extent);
    o.x = rng_uniform(object_rng, margin, opts.roi.width_m - margin);
    o.y = rng_uniform(object_rng, margin, opts.roi.height_m - margin);
    const double speed = rng_uniform(object_rng, opts.min_speed, opts.max_speed);
    const double heading = rng_uniform(object_rng, -kPi, kPi);
    o.velocity_x = speed * std::cos(heading);
    o.velocity_y = speed * std::sin(heading);
    initial.push_back(o);
  }

  for (int f = 0; f < opts.n_frames; ++f) {
    Frame fr;
    fr.timestamp_ms = f * opts.frame_dt_ms;
    const double t = fr.timestamp_ms / 1000.0;
    for (const auto& o : initial) {
      SceneObject m = o;
      m.x = o.x + o.velocity_x * t;
      m.y = o.y + o.velocity_y * t;
      fr.objects.push_back(m);
    }
    s.frames.push_back(std::move(fr));
  }
  return s;
}

Scenario gen_scenario(std::uint64_t seed, int n_agents, int n_objects, int n_frames,
                      double frame_dt_ms) {
  ScenarioOptions o;
  o.n_agents = n_agents;
  o.n_objects = n_objects;
  o.n_frames = n_frames;
  o.frame_dt_ms = frame_dt_ms;
  return gen_scenario(seed, o);
}

namespace {

struct GridGeometry {
  std::size_t rows, cols;
  double mpc, c, s, px, py;

  GridGeometry(const Roi& roi, const Pose2D& pose)
      : rows(roi.rows()), cols(roi.cols()), mpc(roi.meters_per_cell), c(std::cos(pose.yaw)),
        s(std::sin(pose.yaw)), px(pose.x), py(pose.y) {}

  double local_x(std::size_t col) const { return (static_cast<double>(col) + 0.5 - 0.5 * cols) * mpc; }
  double local_y(std::size_t row) const { return (static_cast<double>(row) + 0.5 - 0.5 * rows) * mpc; }
  void to_world(double lx, double ly, double& wx, double& wy) const {
    wx = c * lx - s * ly + px;
    wy = s * lx + c * ly + py;
  }
  void to_local(double wx, double wy, double& lx, double& ly) const {
    const double dx = wx - px, dy = wy - py;
    lx = c * dx + s * dy;
    ly = -s * dx + c * dy;
  }
};

bool inside(const SceneObject& o, double wx, double wy) {
  return std::abs(wx - o.x) <= o.half_extent && std::abs(wy - o.y) <= o.half_extent;
}

const Frame& frame_at(const Scenario& s, std::size_t idx) {
  if (idx >= s.frames.size()) throw std::out_of_range("frame index out of range");
  return s.frames[idx];
}

}  // namespace

FeatureGrid observe(const Scenario& scenario, int agent_id, std::size_t frame_idx, RngStream& rng) {
  const AgentConfig& a = scenario.agent(agent_id);
  const Frame& fr = frame_at(scenario, frame_idx);
  GridGeometry geo(scenario.roi, a.pose);
  FeatureGrid g(geo.rows, geo.cols, 1);
  const double r2 = a.fov_radius * a.fov_radius;
  for (std::size_t r = 0; r < geo.rows; ++r) {
    for (std::size_t c = 0; c < geo.cols; ++c) {
      const double lx = geo.local_x(c), ly = geo.local_y(r);
      if (lx * lx + ly * ly > r2) continue;
      double wx, wy;
      geo.to_world(lx, ly, wx, wy);
      double v = 0.0;
      for (const auto& o : fr.objects) {
        if (inside(o, wx, wy)) {
          v = 1.0;
          break;
        }
      }
      if (v > 0.0 && a.dropout_prob > 0.0 && rng.uniform01() < a.dropout_prob) v = 0.0;
      if (a.sensor_noise_sigma > 0.0) v += a.sensor_noise_sigma * rng.normal();
      g.at(r, c) = v;
    }
  }
  return g;
}

FeatureGrid label_grid(const Scenario& scenario, std::size_t frame_idx, const Pose2D& grid_pose) {
  const Frame& fr = frame_at(scenario, frame_idx);
  GridGeometry geo(scenario.roi, grid_pose);
  FeatureGrid g(geo.rows, geo.cols, 1);
  for (std::size_t r = 0; r < geo.rows; ++r) {
    for (std::size_t c = 0; c < geo.cols; ++c) {
      double wx, wy;
      geo.to_world(geo.local_x(c), geo.local_y(r), wx, wy);
      for (const auto& o : fr.objects) {
        if (inside(o, wx, wy)) {
          g.at(r, c) = 1.0;
          break;
        }
      }
    }
  }
  return g;
}

FeatureGrid label_grid(const Scenario& scenario, std::size_t frame_idx) {
  return label_grid(scenario, frame_idx, scenario.roi.pose());
}

OffsetTargets offset_targets(const Scenario& scenario, std::size_t frame_idx,
                             const Pose2D& grid_pose) {
  const Frame& fr = frame_at(scenario, frame_idx);
  GridGeometry geo(scenario.roi, grid_pose);
  OffsetTargets t{FeatureGrid(geo.rows, geo.cols, 1), FeatureGrid(geo.rows, geo.cols, 1)};
  for (std::size_t r = 0; r < geo.rows; ++r) {
    for (std::size_t c = 0; c < geo.cols; ++c) {
      const double lx = geo.local_x(c), ly = geo.local_y(r);
      double wx, wy;
      geo.to_world(lx, ly, wx, wy);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& o : fr.objects) {
        if (!inside(o, wx, wy)) continue;
        const double d = (wx - o.x) * (wx - o.x) + (wy - o.y) * (wy - o.y);
        if (d < best) {
          best = d;
          double ox, oy;
          geo.to_local(o.x, o.y, ox, oy);
          t.dx.at(r, c) = (ox - lx) / geo.mpc;
          t.dy.at(r, c) = (oy - ly) / geo.mpc;
        }
      }
    }
  }
  return t;
}

Pose2D perturb_pose(const Pose2D& pose, double sigma_trans_m, double sigma_rot_rad, RngStream& rng) {
  if (sigma_trans_m < 0.0 || sigma_rot_rad < 0.0) {
    throw std::invalid_argument("perturb_pose: sigmas must be >= 0");
  }
  const double nx = rng.normal(), ny = rng.normal(), nr = rng.normal();
  return Pose2D{pose.x + sigma_trans_m * nx, pose.y + sigma_trans_m * ny,
                normalize_angle(pose.yaw + sigma_rot_rad * nr)};
}

nlohmann::json scenario_to_json(const Scenario& s) {
  using nlohmann::json;
  json j;
  j["seed"] = s.seed;
  j["roi"] = {{"width_m", s.roi.width_m},
              {"height_m", s.roi.height_m},
              {"meters_per_cell", s.roi.meters_per_cell}};
  j["agents"] = json::array();
  for (const auto& a : s.agents) {
    j["agents"].push_back({{"id", a.id},
                           {"pose", {a.pose.x, a.pose.y, a.pose.yaw}},
                           {"fov_radius", a.fov_radius},
                           {"sensor_noise_sigma", a.sensor_noise_sigma},
                           {"modality", modality_name(a.modality)},
                           {"dropout_prob", a.dropout_prob}});
  }
  j["frames"] = json::array();
  for (const auto& f : s.frames) {
    json objs = json::array();
    for (const auto& o : f.objects) {
      objs.push_back({o.x, o.y, o.half_extent, o.velocity_x, o.velocity_y});
    }
    j["frames"].push_back({{"timestamp_ms", f.timestamp_ms}, {"objects", objs}});
  }
  return j;
}

Scenario scenario_from_json(const nlohmann::json& j) {
  Scenario s;
  s.seed = j.at("seed").get<std::uint64_t>();
  const auto& roi = j.at("roi");
  s.roi.width_m = roi.at("width_m").get<double>();
  s.roi.height_m = roi.at("height_m").get<double>();
  s.roi.meters_per_cell = roi.at("meters_per_cell").get<double>();
  for (const auto& ja : j.at("agents")) {
    AgentConfig a;
    a.id = ja.at("id").get<int>();
    const auto& p = ja.at("pose");
    a.pose = Pose2D{p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()};
    a.fov_radius = ja.at("fov_radius").get<double>();
    a.sensor_noise_sigma = ja.at("sensor_noise_sigma").get<double>();
    a.modality = parse_modality(ja.at("modality").get<std::string>());
    a.dropout_prob = ja.at("dropout_prob").get<double>();
    if (!(a.fov_radius > 0.0) || a.dropout_prob < 0.0 || a.dropout_prob > 1.0) {
      throw std::invalid_argument("scenario agent violates fov/dropout invariants");
    }
    s.agents.push_back(a);
  }
  double prev = -std::numeric_limits<double>::infinity();
  for (const auto& jf : j.at("frames")) {
    Frame f;
    f.timestamp_ms = jf.at("timestamp_ms").get<double>();
    if (!(f.timestamp_ms > prev)) throw std::invalid_argument("scenario timestamps not increasing");
    prev = f.timestamp_ms;
    for (const auto& jo : jf.at("objects")) {
      f.objects.push_back(SceneObject{jo.at(0).get<double>(), jo.at(1).get<double>(),
                                      jo.at(2).get<double>(), jo.at(3).get<double>(),
                                      jo.at(4).get<double>()});
    }
    s.frames.push_back(std::move(f));
  }
  return s;
}

}  // namespace qv2x
