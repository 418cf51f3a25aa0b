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

#include "qv2x/codebook.hpp"

namespace qv2x {

CodebookCodec::CodebookCodec(const Codebook& cb, std::size_t n_ranks, double lambda_rec)
    : cb_(cb), n_ranks_(n_ranks), lambda_(lambda_rec), code_grad_(cb.codes.size(), 0.0) {
  cb.validate();
  if (n_ranks < 1 || n_ranks > cb.max_ranks()) throw std::invalid_argument("CodebookCodec: bad n_R");
  if (!(lambda_rec >= 0.0)) throw std::invalid_argument("CodebookCodec: lambda_rec must be non-negative");
}

FeatureGrid CodebookCodec::transmit(const FeatureGrid& f, int agent_id) {
  Sent s;
  s.f = f;
  FeatureGrid out;
  auto fr = frozen_.find(agent_id);
  if (fr != frozen_.end()) {
    require_same_shape(f, fr->second.f, "CodebookCodec::transmit (frozen)");
    s.msg = fr->second.msg;
    s.fhat = reconstruct(s.msg, cb_);
    out = f;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s.fhat[i] - fr->second.f[i];
  } else {
    s.msg = assign(f, cb_, n_ranks_);
    s.fhat = reconstruct(s.msg, cb_);
    out = s.fhat;
  }
  if (lambda_ > 0.0 && f.cells() > 0) rec_loss_ += lambda_ * squared_distance(f, s.fhat) / static_cast<double>(f.cells());
  sent_[agent_id] = std::move(s);
  return out;
}

FeatureGrid CodebookCodec::backward(const FeatureGrid& grad, int agent_id) {
  auto it = sent_.find(agent_id);
  if (it == sent_.end()) throw std::logic_error("CodebookCodec::backward: agent was not transmitted");
  const Sent& s = it->second;
  require_same_shape(grad, s.f, "CodebookCodec::backward");
  const std::size_t dim = cb_.dim, cells = s.f.cells();
  const double k = cells ? 2.0 * lambda_ / static_cast<double>(cells) : 0.0;
  FeatureGrid grad_f = grad;
  FeatureGrid grad_hat = grad;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double e = k * (s.f[i] - s.fhat[i]);
    grad_f[i] += e;
    grad_hat[i] -= e;
  }
  for (std::size_t i = 0; i < cells; ++i) {
    const double* gh = grad_hat.data() + i * dim;
    for (std::size_t r = 0; r < n_ranks_; ++r) {
      const double a = cb_.alpha[r];
      double* cg = code_grad_.data() + s.msg.indices[i * n_ranks_ + r] * dim;
      for (std::size_t c = 0; c < dim; ++c) cg[c] += a * gh[c];
    }
  }
  return grad_f;
}

void CodebookCodec::freeze() { frozen_ = sent_; }

void CodebookCodec::reset() {
  sent_.clear();
  rec_loss_ = 0.0;
}

void CodebookCodec::zero_grad() { std::fill(code_grad_.begin(), code_grad_.end(), 0.0); }

double joint_loss(const Scenario& s, std::size_t frame, const SampleSpec& spec, const ModelParams& p,
                  const RngStream& run, CodebookCodec& codec, ModelParams* grads) {
  codec.reset();
  ForwardTrace tr;
  const auto pred = forward_traced(s, frame, spec, p, run, tr, &codec);
  FeatureGrid g;
  const double det = detection_loss(pred, make_targets(s, frame, spec.ego_id), grads ? &g : nullptr);
  if (grads) backward(p, tr, g, *grads, &codec);
  return det + codec.reconstruction_loss();
}

namespace {

void check(const ModelParams& p, const Codebook& cb, const JointConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0.0) || !(cfg.lambda_rec >= 0.0)) {
    throw std::invalid_argument("train_joint: bad config");
  }
  cb.validate();
  if (cfg.n_ranks < 1 || cfg.n_ranks > cb.max_ranks()) throw std::invalid_argument("train_joint: bad n_R");
  if (p.layers.empty()) throw std::invalid_argument("train_joint: empty model");
  const std::size_t ch = p.has_compressor() ? p.layers[kCompressUp].spec.out_channels
                                            : p.layers[kEncDenseConv2].spec.out_channels;
  if (ch != cb.dim) {
    throw std::invalid_argument("train_joint: codebook dim " + std::to_string(cb.dim) + " but model sends " +
                                std::to_string(ch) + " channels");
  }
}

void round_to_float(ModelParams& p) {
  for (auto& l : p.layers) {
    for (double& v : l.weight) v = static_cast<float>(v);
    for (double& v : l.bias) v = static_cast<float>(v);
  }
}

}  // namespace

double joint_objective(const std::vector<Scenario>& scenarios, const ModelParams& p, const Codebook& cb,
                       const JointConfig& cfg) {
  CodebookCodec codec(cb, cfg.n_ranks, cfg.lambda_rec);
  const std::uint64_t seed = mix64(cfg.seed ^ 0x10147ULL);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    const auto& s = scenarios[k];
    const SampleSpec spec{s.agents.front().id, {}, {}, {}};
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
      total += joint_loss(s, f, spec, p, eval_stream(seed, k), codec);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

std::pair<ModelParams, Codebook> train_joint(const ModelParams& model, const Codebook& cb,
                                             const std::vector<Scenario>& scenarios, const JointConfig& cfg,
                                             JointReport* report) {
  if (scenarios.empty()) throw std::invalid_argument("train_joint: no scenarios");
  check(model, cb, cfg);
  JointReport rep;
  rep.initial_loss = joint_objective(scenarios, model, cb, cfg);
  if (cfg.epochs == 0) {
    rep.final_loss = rep.initial_loss;
    if (report) *report = std::move(rep);
    return {model, cb};
  }

  struct Ref {
    std::size_t scenario, frame;
  };
  std::vector<Ref> samples;
  for (std::size_t k = 0; k < scenarios.size(); ++k)
    for (std::size_t f = 0; f < scenarios[k].frames.size(); ++f) samples.push_back({k, f});

  ModelParams p = model;
  Codebook c = cb;
  ModelParams velocity = p.zeros_like();
  std::vector<double> code_velocity(c.codes.size(), 0.0);
  CodebookCodec codec(c, cfg.n_ranks, cfg.lambda_rec);
  const RngStream root(cfg.seed);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream order_rng = root.split(1).split(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      ModelParams grads = p.zeros_like();
      codec.zero_grad();
      for (std::size_t j = b0; j < b1; ++j) {
        const auto& ref = samples[order[j]];
        const auto& s = scenarios[ref.scenario];
        RngStream srng = root.split(2).split(static_cast<std::uint64_t>(epoch)).split(order[j]);
        const SampleSpec spec{s.agents[srng.below(s.agents.size())].id, {}, {}, {}};
        const double loss = joint_loss(s, ref.frame, spec, p, srng.split(3), codec, &grads);
        if (!std::isfinite(loss)) {
          std::ostringstream os;
          os << "train_joint: loss diverged (epoch " << epoch << ", scenario " << ref.scenario << ", frame "
             << ref.frame << ")";
          throw std::runtime_error(os.str());
        }
        epoch_loss += loss;
      }
      const double scale = 1.0 / static_cast<double>(b1 - b0);
      double sq = 0.0;
      for (const auto& l : grads.layers) {
        for (double v : l.weight) sq += v * v;
        for (double v : l.bias) sq += v * v;
      }
      for (double v : codec.code_grad()) sq += v * v;
      const double norm = std::sqrt(sq) * scale;
      if (!std::isfinite(norm)) throw std::runtime_error("train_joint: non-finite gradient in epoch " + std::to_string(epoch));
      const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
      auto step = [&](std::vector<double>& w, std::vector<double>& v, const std::vector<double>& gr) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = cfg.momentum * v[i] + gr[i] * scale * clip;
          w[i] -= cfg.lr * v[i];
        }
      };
      for (std::size_t li = 0; li < p.layers.size(); ++li) {
        step(p.layers[li].weight, velocity.layers[li].weight, grads.layers[li].weight);
        step(p.layers[li].bias, velocity.layers[li].bias, grads.layers[li].bias);
      }
      step(c.codes, code_velocity, codec.code_grad());
    }
    rep.train_loss.push_back(epoch_loss / static_cast<double>(samples.size()));
  }
  round_to_float(p);
  for (double& x : c.codes) x = static_cast<float>(x);
  rep.final_loss = joint_objective(scenarios, p, c, cfg);
  if (!std::isfinite(rep.final_loss)) throw std::runtime_error("train_joint: final loss is not finite");
  if (report) *report = std::move(rep);
  return {std::move(p), std::move(c)};
}

}  // namespace qv2x
