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
#include <cmath>
#include <stdexcept>

#include "qv2x/pipeline.hpp"

namespace qv2x {

namespace {

constexpr std::uint64_t kPoseTagBase = 1000;

}  // namespace

FeatureGrid agent_observation(const Scenario& s, int agent_id, std::size_t frame, const RngStream& run) {
  RngStream rng = run.split(frame).split(static_cast<std::uint64_t>(agent_id));
  return observe(s, agent_id, frame, rng);
}

Pose2D agent_pose_estimate(const Scenario& s, int agent_id, std::size_t frame, const PoseNoise& noise,
                           const RngStream& run) {
  const Pose2D& truth = s.agent(agent_id).pose;
  if (noise.sigma_trans_m == 0.0 && noise.sigma_rot_rad == 0.0) return truth;
  RngStream rng = run.split(frame).split(kPoseTagBase + static_cast<std::uint64_t>(agent_id));
  return perturb_pose(truth, noise.sigma_trans_m, noise.sigma_rot_rad, rng);
}

std::size_t SampleSpec::frame_of(int agent_id, std::size_t frame) const {
  if (agent_id == ego_id) return frame;
  auto it = source_frame.find(agent_id);
  if (it == source_frame.end()) return frame;
  if (it->second > frame) throw std::invalid_argument("source frame is in the future");
  return it->second;
}

std::vector<int> ordered_agents(const Scenario& s, const SampleSpec& spec) {
  std::vector<int> ids;
  if (spec.present.empty()) {
    for (const auto& a : s.agents) ids.push_back(a.id);
  } else {
    ids = spec.present;
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  auto it = std::find(ids.begin(), ids.end(), spec.ego_id);
  if (it == ids.end()) throw std::invalid_argument("ego agent must be present");
  ids.erase(it);
  for (int id : ids) s.agent(id);  // validates ids
  ids.insert(ids.begin(), spec.ego_id);
  return ids;
}

std::vector<FeatureGrid> encode_and_warp(const Scenario& s, std::size_t frame, const SampleSpec& spec,
                                         const ModelParams& p, const RngStream& run, LayerExecutor& ex,
                                         RemoteCodec* codec) {
  const auto ids = ordered_agents(s, spec);
  const Pose2D ego_pose = s.agent(spec.ego_id).pose;
  std::vector<FeatureGrid> warped;
  warped.reserve(ids.size());
  for (int id : ids) {
    const auto& agent = s.agent(id);
    const std::size_t src = spec.frame_of(id, frame);
    FeatureGrid f = encode(agent_observation(s, id, src, run), p, agent.modality, ex);
    if (id == spec.ego_id) {
      warped.push_back(std::move(f));
      continue;
    }
    f = compress(f, p, ex);
    if (codec) f = codec->transmit(f, id);
    const Pose2D from = agent_pose_estimate(s, id, src, spec.pose_noise, run);
    warped.push_back(bilinear_warp(f, from, ego_pose, s.roi.meters_per_cell));
  }
  return warped;
}

DetectionGrid fuse_and_head(const std::vector<FeatureGrid>& warped, const ModelParams& p, LayerExecutor& ex) {
  return head(fuse(warped, p, ex), p, ex);
}

DetectionGrid forward(const Scenario& s, std::size_t frame, const SampleSpec& spec, const ModelParams& p,
                      const RngStream& run, LayerExecutor& ex, RemoteCodec* codec) {
  return fuse_and_head(encode_and_warp(s, frame, spec, p, run, ex, codec), p, ex);
}

DetectionGrid forward_traced(const Scenario& s, std::size_t frame, const SampleSpec& spec,
                             const ModelParams& p, const RngStream& run, ForwardTrace& tr,
                             RemoteCodec* codec) {
  const auto ids = ordered_agents(s, spec);
  const Pose2D ego_pose = s.agent(spec.ego_id).pose;
  tr = ForwardTrace{};
  std::vector<FeatureGrid> warped;
  for (int id : ids) {
    const auto& agent = s.agent(id);
    ForwardTrace::Agent a;
    a.id = id;
    a.modality = agent.modality;
    const std::size_t src = spec.frame_of(id, frame);
    a.obs = agent_observation(s, id, src, run);
    a.hidden = run_layer(p.layers[encoder_layer(a.modality, 0)], p.layers[encoder_layer(a.modality, 0)].weight,
                         a.obs);
    a.feature = run_layer(p.layers[encoder_layer(a.modality, 1)],
                          p.layers[encoder_layer(a.modality, 1)].weight, a.hidden);
    if (id == spec.ego_id) {
      a.sent = a.feature;
      a.plan = make_warp_plan(a.feature.height(), a.feature.width(), ego_pose, ego_pose,
                              s.roi.meters_per_cell);
      a.warped = a.feature;
    } else {
      FeatureGrid c = a.feature;
      if (p.has_compressor()) {
        a.bottleneck = run_layer(p.layers[kCompressDown], p.layers[kCompressDown].weight, a.feature);
        c = run_layer(p.layers[kCompressUp], p.layers[kCompressUp].weight, a.bottleneck);
      }
      a.sent = codec ? codec->transmit(c, id) : c;
      if (p.has_compressor()) a.bottleneck_out = std::move(c);
      const Pose2D from = agent_pose_estimate(s, id, src, spec.pose_noise, run);
      a.plan = make_warp_plan(a.sent.height(), a.sent.width(), from, ego_pose, s.roi.meters_per_cell);
      a.warped = apply_warp(a.plan, a.sent);
    }
    warped.push_back(a.warped);
    tr.agents.push_back(std::move(a));
  }
  for (const auto& f : warped) {
    tr.scores.push_back(run_layer(p.layers[kFusionScore], p.layers[kFusionScore].weight, f));
  }
  tr.mixed = fusion_mix(warped, tr.scores);
  tr.fused = run_layer(p.layers[kFusionConv], p.layers[kFusionConv].weight, tr.mixed);
  tr.head_out = run_layer(p.layers[kHeadLinear], p.layers[kHeadLinear].weight, tr.fused);
  return DetectionGrid::from_head(tr.head_out);
}

void backward(const ModelParams& p, const ForwardTrace& tr, const FeatureGrid& grad_head, ModelParams& g,
              RemoteCodec* codec) {
  auto layer_bw = [&](std::size_t id, const FeatureGrid& x, const FeatureGrid& y, const FeatureGrid& gy,
                      FeatureGrid* gx) {
    run_layer_backward(p.layers[id], p.layers[id].weight, x, y, gy, g.layers[id].weight, g.layers[id].bias,
                       gx);
  };

  FeatureGrid d_fused, d_mixed;
  layer_bw(kHeadLinear, tr.fused, tr.head_out, grad_head, &d_fused);
  layer_bw(kFusionConv, tr.mixed, tr.fused, d_fused, &d_mixed);

  // Softmax-weighted mixture.
  const std::size_t n = tr.agents.size(), ch = d_mixed.channels(), cells = d_mixed.cells();
  std::vector<FeatureGrid> d_warped(n, FeatureGrid(d_mixed.height(), d_mixed.width(), ch));
  std::vector<FeatureGrid> d_scores(n, FeatureGrid(d_mixed.height(), d_mixed.width(), 1));
  std::vector<double> w(n), dw(n);
  for (std::size_t i = 0; i < cells; ++i) {
    double mx = tr.scores[0][i];
    for (std::size_t a = 1; a < n; ++a) mx = std::max(mx, tr.scores[a][i]);
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      w[a] = std::exp(tr.scores[a][i] - mx);
      z += w[a];
    }
    const double* dm = d_mixed.data() + i * ch;
    double wdw = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      w[a] /= z;
      const double* f = tr.agents[a].warped.data() + i * ch;
      double* df = d_warped[a].data() + i * ch;
      double acc = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        df[c] = w[a] * dm[c];
        acc += dm[c] * f[c];
      }
      dw[a] = acc;
      wdw += w[a] * acc;
    }
    for (std::size_t a = 0; a < n; ++a) d_scores[a][i] = w[a] * (dw[a] - wdw);
  }

  for (std::size_t a = 0; a < n; ++a) {
    const auto& at = tr.agents[a];
    FeatureGrid d_in;
    layer_bw(kFusionScore, at.warped, tr.scores[a], d_scores[a], &d_in);
    for (std::size_t i = 0; i < d_in.size(); ++i) d_warped[a][i] += d_in[i];

    FeatureGrid d_feature;
    if (a == 0) {
      d_feature = std::move(d_warped[a]);
    } else {
      FeatureGrid d_sent = apply_warp_adjoint(at.plan, d_warped[a]);
      FeatureGrid d_comp = codec ? codec->backward(d_sent, at.id) : std::move(d_sent);
      if (p.has_compressor()) {
        FeatureGrid d_bottleneck;
        layer_bw(kCompressUp, at.bottleneck, at.bottleneck_out, d_comp, &d_bottleneck);
        layer_bw(kCompressDown, at.feature, at.bottleneck, d_bottleneck, &d_feature);
      } else {
        d_feature = std::move(d_comp);
      }
    }
    FeatureGrid d_hidden;
    layer_bw(encoder_layer(at.modality, 1), at.hidden, at.feature, d_feature, &d_hidden);
    layer_bw(encoder_layer(at.modality, 0), at.obs, at.hidden, d_hidden, nullptr);
  }
}

}  // namespace qv2x
