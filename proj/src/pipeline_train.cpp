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
#include <sstream>
#include <stdexcept>

#include "qv2x/pipeline.hpp"

namespace qv2x {

DetectionTargets make_targets(const Scenario& s, std::size_t frame, int ego_id) {
  const Pose2D pose = s.agent(ego_id).pose;
  auto off = offset_targets(s, frame, pose);
  return DetectionTargets{label_grid(s, frame, pose), std::move(off.dx), std::move(off.dy)};
}

double detection_loss(const DetectionGrid& pred, const DetectionTargets& t, FeatureGrid* grad) {
  require_same_shape(pred.score, t.label, "detection_loss");
  const std::size_t n = t.label.cells();
  const double inv = 1.0 / static_cast<double>(n);
  if (grad) *grad = FeatureGrid(t.label.height(), t.label.width(), kHeadOutputs);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = pred.score[i], y = t.label[i];
    loss += (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)))) * inv;
    if (grad) (*grad)[3 * i] = (1.0 / (1.0 + std::exp(-z)) - y) * inv;
    if (y > 0.5) {
      const double ex = pred.offset_x[i] - t.dx[i], ey = pred.offset_y[i] - t.dy[i];
      loss += (ex * ex + ey * ey) * inv;
      if (grad) {
        (*grad)[3 * i + 1] = 2.0 * ex * inv;
        (*grad)[3 * i + 2] = 2.0 * ey * inv;
      }
    }
  }
  return loss;
}

RngStream eval_stream(std::uint64_t seed, std::size_t scenario_index) {
  return RngStream(seed).split(scenario_index);
}

namespace {

struct SampleRef {
  std::size_t scenario;
  std::size_t frame;
};

double global_norm(const ModelParams& g) {
  double s = 0.0;
  for (const auto& l : g.layers) {
    for (double v : l.weight) s += v * v;
    for (double v : l.bias) s += v * v;
  }
  return std::sqrt(s);
}

void round_to_float(ModelParams& p) {
  for (auto& l : p.layers) {
    for (double& v : l.weight) v = static_cast<float>(v);
    for (double& v : l.bias) v = static_cast<float>(v);
  }
}

// Validation: ego 0, every agent present, a fixed observation stream.
double validation_loss(const std::vector<Scenario>& scenarios, const std::vector<SampleRef>& val,
                       const ModelParams& p, std::uint64_t seed) {
  if (val.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ref : val) {
    const auto& s = scenarios[ref.scenario];
    const SampleSpec spec{s.agents.front().id, {}, {}, {}};
    const auto pred = forward(s, ref.frame, spec, p, eval_stream(seed, ref.scenario));
    total += detection_loss(pred, make_targets(s, ref.frame, spec.ego_id));
  }
  return total / static_cast<double>(val.size());
}

}  // namespace

ModelParams fit_fp(const std::vector<Scenario>& scenarios, const ModelParams& init, const FitConfig& cfg,
                   FitReport* report) {
  if (scenarios.empty()) throw std::invalid_argument("fit_fp: no scenarios");
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0.0)) throw std::invalid_argument("fit_fp: bad config");

  std::size_t n_val = 0;
  if (scenarios.size() >= 2 && cfg.val_fraction > 0.0) {
    n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(scenarios.size()))), 1,
        scenarios.size() - 1);
  }
  const std::size_t n_train = scenarios.size() - n_val;
  std::vector<SampleRef> train, val;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    for (std::size_t f = 0; f < scenarios[k].frames.size(); ++f) (k < n_train ? train : val).push_back({k, f});
  }
  // Without a held-out split, select on the training frames.
  if (val.empty()) val = train;
  const std::uint64_t val_seed = mix64(cfg.seed ^ 0x5eedULL);

  ModelParams p = init;
  ModelParams best = init;
  FitReport rep;
  rep.initial_val_loss = validation_loss(scenarios, val, p, val_seed);
  double best_val = rep.initial_val_loss;

  ModelParams velocity = p.zeros_like();
  const RngStream root(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream order_rng = root.split(1).split(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      ModelParams grads = p.zeros_like();
      for (std::size_t j = b0; j < b1; ++j) {
        const auto& ref = train[order[j]];
        const auto& s = scenarios[ref.scenario];
        RngStream srng = root.split(2).split(static_cast<std::uint64_t>(epoch)).split(order[j]);
        SampleSpec spec;
        spec.ego_id = s.agents[srng.below(s.agents.size())].id;
        for (const auto& a : s.agents) {
          const bool keep = srng.uniform01() < cfg.remote_keep;
          if (a.id == spec.ego_id || keep) spec.present.push_back(a.id);
        }
        ForwardTrace tr;
        const auto pred = forward_traced(s, ref.frame, spec, p, srng.split(3), tr);
        FeatureGrid g;
        const double loss = detection_loss(pred, make_targets(s, ref.frame, spec.ego_id), &g);
        if (!std::isfinite(loss)) {
          std::ostringstream os;
          os << "fit_fp: loss diverged (epoch " << epoch << ", scenario " << ref.scenario << ", frame "
             << ref.frame << ", loss " << loss << ")";
          throw std::runtime_error(os.str());
        }
        epoch_loss += loss;
        backward(p, tr, g, grads);
      }
      const double scale = 1.0 / static_cast<double>(b1 - b0);
      double norm = global_norm(grads) * scale;
      if (!std::isfinite(norm)) throw std::runtime_error("fit_fp: non-finite gradient in epoch " + std::to_string(epoch));
      const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
      for (std::size_t li = 0; li < p.layers.size(); ++li) {
        auto step = [&](std::vector<double>& w, std::vector<double>& v, const std::vector<double>& gr) {
          for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = cfg.momentum * v[i] + gr[i] * scale * clip;
            w[i] -= cfg.lr * v[i];
          }
        };
        step(p.layers[li].weight, velocity.layers[li].weight, grads.layers[li].weight);
        step(p.layers[li].bias, velocity.layers[li].bias, grads.layers[li].bias);
      }
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, train.size())));
    const double vl = validation_loss(scenarios, val, p, val_seed);
    if (!std::isfinite(vl)) throw std::runtime_error("fit_fp: validation loss diverged in epoch " + std::to_string(epoch));
    rep.val_loss.push_back(vl);
    if (vl < best_val) {
      best_val = vl;
      best = p;
      rep.best_epoch = epoch + 1;
    }
  }
  round_to_float(best);
  if (report) *report = std::move(rep);
  return best;
}

double evaluate_ap(const std::vector<Scenario>& scenarios, const ModelParams& p, const EvalOptions& opts,
                   LayerExecutor& ex, RemoteCodec* codec) {
  std::vector<DetectionGrid> preds;
  std::vector<FeatureGrid> labels;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    const auto& s = scenarios[k];
    const RngStream run = eval_stream(opts.seed, k);
    const SampleSpec spec{opts.ego_id, {}, opts.pose_noise, {}};
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
      preds.push_back(forward(s, f, spec, p, run, ex, codec));
      labels.push_back(make_targets(s, f, opts.ego_id).label);
    }
  }
  return eval_ap(preds, labels);
}

}  // namespace qv2x
