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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qv2x/scene.hpp"

namespace qv2x {
namespace {

Scenario single_object_scene(double x, double y, double half, double fov) {
  Scenario s;
  s.roi = Roi{48.0, 48.0, 0.5};
  AgentConfig a;
  a.pose = Pose2D{24.0, 24.0, 0.0};
  a.fov_radius = fov;
  a.sensor_noise_sigma = 0.0;
  a.dropout_prob = 0.0;
  s.agents.push_back(a);
  s.frames.push_back(Frame{0.0, {SceneObject{x, y, half, 0.0, 0.0}}});
  return s;
}

double total(const FeatureGrid& g) {
  double t = 0;
  for (double v : g.values()) t += v;
  return t;
}

TEST(GenScenario, EmptyScene) {
  const auto s = gen_scenario(3, 2, 0, 4, 100.0);
  ASSERT_EQ(s.frames.size(), 4u);
  for (const auto& f : s.frames) EXPECT_TRUE(f.objects.empty());
}

TEST(GenScenario, DeterministicBytes) {
  const auto a = scenario_to_json(gen_scenario(17, 3, 12, 10, 100.0)).dump();
  const auto b = scenario_to_json(gen_scenario(17, 3, 12, 10, 100.0)).dump();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, scenario_to_json(gen_scenario(18, 3, 12, 10, 100.0)).dump());
}

TEST(GenScenario, ConstantVelocityKinematics) {
  const auto s = gen_scenario(5, 1, 1, 3, 1000.0);
  const auto& o0 = s.frames[0].objects[0];
  for (std::size_t f = 1; f < 3; ++f) {
    const auto& o = s.frames[f].objects[0];
    EXPECT_NEAR(o.x - o0.x, o0.velocity_x * static_cast<double>(f), 1e-12);
    EXPECT_NEAR(o.y - o0.y, o0.velocity_y * static_cast<double>(f), 1e-12);
  }
}

TEST(GenScenario, InvariantsHold) {
  const auto s = gen_scenario(9, 4, 20, 10, 100.0);
  ASSERT_EQ(s.agents.size(), 4u);
  bool dense = false, sparse = false;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    dense |= s.agents[i].modality == Modality::kDense;
    sparse |= s.agents[i].modality == Modality::kSparse;
    for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(s.agents[i].pose == s.agents[j].pose);
  }
  EXPECT_TRUE(dense && sparse);
  for (std::size_t f = 1; f < s.frames.size(); ++f) EXPECT_GT(s.frames[f].timestamp_ms, s.frames[f - 1].timestamp_ms);
  for (const auto& o : s.frames[0].objects) {
    EXPECT_GT(o.half_extent, 0.0);
    EXPECT_GE(o.x, 0.0);
    EXPECT_LE(o.x, s.roi.width_m);
    EXPECT_GE(o.y, 0.0);
    EXPECT_LE(o.y, s.roi.height_m);
  }
  EXPECT_THROW(gen_scenario(1, 0, 1, 1, 100.0), std::invalid_argument);
}

TEST(Observe, ObjectOutsideFovIsInvisible) {
  const auto s = single_object_scene(44.0, 44.0, 1.5, 10.0);
  RngStream rng(1);
  EXPECT_EQ(total(observe(s, 0, 0, rng)), 0.0);
}

TEST(Observe, NoiselessEqualsRasterInsideFov) {
  auto s = gen_scenario(21, 3, 15, 2, 100.0);
  for (auto& a : s.agents) {
    a.sensor_noise_sigma = 0.0;
    a.dropout_prob = 0.0;
  }
  for (const auto& a : s.agents) {
    RngStream rng(2);
    const auto obs = observe(s, a.id, 1, rng);
    const auto raster = label_grid(s, 1, a.pose);
    for (std::size_t r = 0; r < obs.height(); ++r) {
      for (std::size_t c = 0; c < obs.width(); ++c) {
        const double lx = (c + 0.5 - obs.width() / 2.0) * s.roi.meters_per_cell;
        const double ly = (r + 0.5 - obs.height() / 2.0) * s.roi.meters_per_cell;
        const bool in_fov = lx * lx + ly * ly <= a.fov_radius * a.fov_radius;
        EXPECT_EQ(obs.at(r, c), in_fov ? raster.at(r, c) : 0.0);
      }
    }
  }
}

TEST(Observe, NoiseStdMatchesSigma) {
  auto s = single_object_scene(24.0, 24.0, 3.0, 40.0);
  s.agents[0].sensor_noise_sigma = 0.1;
  RngStream rng(3);
  const auto obs = observe(s, 0, 0, rng);
  s.agents[0].sensor_noise_sigma = 0.0;
  RngStream rng0(3);
  const auto clean = observe(s, 0, 0, rng0);
  double sum = 0, sum2 = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < obs.size() && n < 10000; ++i) {
    const double d = obs[i] - clean[i];
    sum += d;
    sum2 += d * d;
    ++n;
  }
  ASSERT_GE(n, 9000u);
  const double mean = sum / n, sd = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(sd, 0.1, 0.01);
}

TEST(Observe, OutOfFovAlwaysZeroAcrossSeeds) {
  const auto s = gen_scenario(4, 3, 20, 1, 100.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& a : s.agents) {
      RngStream rng(seed);
      const auto obs = observe(s, a.id, 0, rng);
      for (std::size_t r = 0; r < obs.height(); ++r) {
        for (std::size_t c = 0; c < obs.width(); ++c) {
          const double lx = (c + 0.5 - obs.width() / 2.0) * 0.5, ly = (r + 0.5 - obs.height() / 2.0) * 0.5;
          if (lx * lx + ly * ly > a.fov_radius * a.fov_radius) ASSERT_EQ(obs.at(r, c), 0.0);
        }
      }
    }
  }
}

TEST(LabelGrid, EmptyFrameIsZero) {
  const auto s = gen_scenario(1, 1, 0, 1, 100.0);
  EXPECT_EQ(total(label_grid(s, 0)), 0.0);
}

TEST(LabelGrid, FourCellObject) {
  Scenario s;
  s.roi = Roi{4.0, 4.0, 1.0};
  s.agents.push_back(AgentConfig{});
  // Cell centres sit at 0.5, 1.5, 2.5, 3.5; a 0.7 half extent at (2, 2)
  // covers the 2 x 2 centre block only.
  s.frames.push_back(Frame{0.0, {SceneObject{2.0, 2.0, 0.7, 0.0, 0.0}}});
  const auto g = label_grid(s, 0);
  EXPECT_EQ(total(g), 4.0);
  EXPECT_EQ(g.at(1, 1), 1.0);
  EXPECT_EQ(g.at(2, 2), 1.0);
  EXPECT_EQ(g.at(0, 0), 0.0);
}

TEST(LabelGrid, OverlapIsUnionClampedToOne) {
  Scenario s;
  s.roi = Roi{8.0, 8.0, 1.0};
  s.agents.push_back(AgentConfig{});
  s.frames.push_back(Frame{0.0, {SceneObject{3.0, 3.0, 1.2, 0, 0}, SceneObject{4.0, 3.0, 1.2, 0, 0}}});
  const auto g = label_grid(s, 0);
  for (double v : g.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  // Union of two 2x2 blocks sharing one column: 2 rows x 3 columns.
  EXPECT_EQ(total(g), 6.0);
}

TEST(OffsetTargets, PointToObjectCentre) {
  Scenario s;
  s.roi = Roi{8.0, 8.0, 1.0};
  s.agents.push_back(AgentConfig{});
  s.frames.push_back(Frame{0.0, {SceneObject{4.0, 4.0, 1.2, 0, 0}}});
  const auto t = offset_targets(s, 0, s.roi.pose());
  // Cell (3, 3) has centre (3.5, 3.5); the object centre is +0.5 cells away.
  EXPECT_DOUBLE_EQ(t.dx.at(3, 3), 0.5);
  EXPECT_DOUBLE_EQ(t.dy.at(3, 3), 0.5);
  EXPECT_DOUBLE_EQ(t.dx.at(4, 4), -0.5);
  EXPECT_EQ(t.dx.at(0, 0), 0.0);
}

TEST(PerturbPose, ZeroSigmaIsIdentity) {
  RngStream rng(1);
  const Pose2D p{1.0, 2.0, 0.3};
  EXPECT_EQ(perturb_pose(p, 0.0, 0.0, rng), p);
}

TEST(PerturbPose, TranslationStd) {
  RngStream rng(2);
  double s = 0, s2 = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double d = perturb_pose(Pose2D{}, 0.2, 0.0, rng).x;
    s += d;
    s2 += d * d;
  }
  const double mean = s / n;
  EXPECT_NEAR(std::sqrt(s2 / n - mean * mean), 0.2, 0.02);
}

TEST(PerturbPose, YawWraps) {
  RngStream rng(3);
  for (int i = 0; i < 100; ++i) {
    const Pose2D p = perturb_pose(Pose2D{0, 0, std::numbers::pi - 1e-3}, 0.0, 0.5, rng);
    EXPECT_GT(p.yaw, -std::numbers::pi);
    EXPECT_LE(p.yaw, std::numbers::pi);
  }
  EXPECT_THROW(perturb_pose(Pose2D{}, -1.0, 0.0, rng), std::invalid_argument);
}

TEST(ScenarioJson, RoundTripAndValidation) {
  const auto s = gen_scenario(8, 3, 5, 4, 100.0);
  EXPECT_EQ(scenario_from_json(scenario_to_json(s)), s);
  auto j = scenario_to_json(s);
  j["frames"][1]["timestamp_ms"] = 0.0;
  EXPECT_THROW(scenario_from_json(j), std::invalid_argument);
  auto k = scenario_to_json(s);
  k["agents"][0]["dropout_prob"] = 1.5;
  EXPECT_THROW(scenario_from_json(k), std::invalid_argument);
}

}  // namespace
}  // namespace qv2x
