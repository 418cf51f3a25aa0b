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

#include "qv2x/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <stdexcept>

namespace qv2x {

namespace {

QuantParams weight_qparams(const ValueRange& r, int bits, double factor) {
  QuantParams qp = qparams_from_range(r, bits, Granularity::kPerChannel, factor);
  for (double& s : qp.scale) s = static_cast<double>(static_cast<float>(s));
  return qp;
}

QuantParams act_qparams(const ValueRange& r, int bits, double factor) {
  QuantParams qp = qparams_from_range(r, bits, Granularity::kPerTensor, factor);
  for (double& s : qp.scale) s = static_cast<double>(static_cast<float>(s));
  return qp;
}

// Zero-filled window [r0, r0 + h) x [c0, c0 + w); r0 and c0 may be negative.
FeatureGrid crop(const FeatureGrid& g, long r0, long c0, std::size_t h, std::size_t w) {
  FeatureGrid out(h, w, g.channels());
  const std::size_t ch = g.channels();
  for (std::size_t r = 0; r < h; ++r) {
    const long sr = r0 + static_cast<long>(r);
    if (sr < 0 || sr >= static_cast<long>(g.height())) continue;
    for (std::size_t c = 0; c < w; ++c) {
      const long sc = c0 + static_cast<long>(c);
      if (sc < 0 || sc >= static_cast<long>(g.width())) continue;
      const double* src = g.data() + (static_cast<std::size_t>(sr) * g.width() + static_cast<std::size_t>(sc)) * ch;
      std::copy(src, src + ch, out.data() + (r * w + c) * ch);
    }
  }
  return out;
}

FeatureGrid interior(const FeatureGrid& g) { return crop(g, 1, 1, g.height() - 2, g.width() - 2); }

// Records one layer's inputs and outputs (and the head output) while
// delegating execution to another executor.
class RecordingExecutor : public LayerExecutor {
 public:
  RecordingExecutor(LayerExecutor& inner, std::size_t layer) : inner_(inner), layer_(layer) {}
  std::span<const double> weights(const ModelParams& p, std::size_t layer) override {
    return inner_.weights(p, layer);
  }
  void prepare_input(std::size_t layer, FeatureGrid& x) override {
    if (layer == layer_) inputs.push_back(x);
    inner_.prepare_input(layer, x);
  }
  void record_output(std::size_t layer, const FeatureGrid& y) override {
    if (layer == layer_) outputs.push_back(y);
    if (layer == kHeadLinear) head = y;
    inner_.record_output(layer, y);
  }

  std::vector<FeatureGrid> inputs, outputs;
  FeatureGrid head;

 private:
  LayerExecutor& inner_;
  std::size_t layer_;
};

using Item = BlockWindow;

std::vector<Item> build_items(const BlockIO& io, std::size_t layer, const CalibConfig& cfg) {
  std::vector<Item> items;
  const bool grouped = layer == kFusionScore;
  for (std::size_t k = 0; k < io.inputs.size(); ++k) {
    RngStream rng = RngStream(cfg.seed).split(0xc209 + layer).split(k);
    const auto& ins = io.inputs[k];
    const auto& outs = io.fp_outputs[k];
    if (ins.empty()) continue;
    auto add = [&](const std::vector<std::size_t>& which) {
      const FeatureGrid& ref = ins[which.front()];
      const std::size_t h = std::min(cfg.crop, ref.height()), w = std::min(cfg.crop, ref.width());
      // Input energy per cell; every other window is centred on a cell drawn
      // in proportion to it so that sparse active regions are represented.
      std::vector<double> cdf(ref.cells(), 0.0);
      double acc = 0.0;
      for (std::size_t cell = 0; cell < ref.cells(); ++cell) {
        for (std::size_t i : which) {
          const double* x = ins[i].data() + cell * ins[i].channels();
          for (std::size_t ch = 0; ch < ins[i].channels(); ++ch) acc += x[ch] * x[ch];
        }
        cdf[cell] = acc;
      }
      for (int c = 0; c < cfg.crops_per_sample; ++c) {
        long r0 = static_cast<long>(rng.below(ref.height() - h + 1));
        long c0 = static_cast<long>(rng.below(ref.width() - w + 1));
        if (c % 2 == 1 && acc > 0.0) {
          const double u = rng.uniform01() * acc;
          const auto cell = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
          const long cr = static_cast<long>(std::min(cell, cdf.size() - 1) / ref.width());
          const long cc = static_cast<long>(std::min(cell, cdf.size() - 1) % ref.width());
          r0 = std::clamp(cr - static_cast<long>(h / 2), 0L, static_cast<long>(ref.height() - h));
          c0 = std::clamp(cc - static_cast<long>(w / 2), 0L, static_cast<long>(ref.width() - w));
        }
        Item it;
        for (std::size_t i : which) {
          it.in.push_back(crop(ins[i], r0 - 1, c0 - 1, h + 2, w + 2));
          it.target.push_back(crop(outs[i], r0, c0, h, w));
        }
        it.head_fp = crop(io.fp_head[k], r0, c0, h, w);
        items.push_back(std::move(it));
      }
    };
    if (grouped) {
      std::vector<std::size_t> all(ins.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      add(all);
    } else {
      for (std::size_t i = 0; i < ins.size(); ++i) add({i});
    }
  }
  return items;
}

std::vector<double> softmax(std::span<const double> x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - mx);
  for (double& v : e) v /= z;
  return e;
}

// Window objective on inputs that already went through the activation
// quantizer; adds scale * d loss / d w into grad_w when non-empty.
double window_loss(const ModelParams& fp, std::size_t layer, const BlockWindow& win,
                   const std::vector<FeatureGrid>& xq, std::span<const double> w, double lambda_hetero,
                   double lambda_spatial, double scale, std::span<double> grad_w) {
  const Layer& l = fp.layers[layer];
  const bool want_grad = !grad_w.empty();
  double loss = 0.0;
  std::vector<FeatureGrid> outs, grads;
  for (std::size_t i = 0; i < xq.size(); ++i) {
    FeatureGrid y = run_layer(l, w, xq[i]);
    const FeatureGrid yi = interior(y);
    const FeatureGrid& t = win.target[i];
    const auto cells = static_cast<double>(yi.cells());
    loss += squared_distance(yi, t) / cells;
    FeatureGrid gy(y.height(), y.width(), y.channels());
    const std::size_t ch = y.channels();
    auto g_interior = [&](std::size_t k) -> double& {
      const std::size_t cell = k / ch, r = cell / yi.width(), c = cell % yi.width();
      return gy.at(r + 1, c + 1, k % ch);
    };
    if (want_grad) {
      for (std::size_t k = 0; k < yi.size(); ++k) g_interior(k) = 2.0 * (yi[k] - t[k]) / cells;
    }
    if (lambda_hetero > 0.0) {
      loss += lambda_hetero * kl_divergence(t, yi);
      if (want_grad) {
        const auto sq = softmax(yi.values()), sp = softmax(t.values());
        for (std::size_t k = 0; k < yi.size(); ++k) g_interior(k) += lambda_hetero * (sq[k] - sp[k]);
      }
    }
    outs.push_back(std::move(y));
    grads.push_back(std::move(gy));
  }

  if (lambda_spatial > 0.0) {
    // Remaining network in full precision.
    const Layer& conv = fp.layers[kFusionConv];
    const Layer& hl = fp.layers[kHeadLinear];
    FeatureGrid mixed, conv_out, fused;
    if (layer == kFusionScore) {
      mixed = fusion_mix(win.in, outs);
      conv_out = run_layer(conv, conv.weight, mixed);
      fused = interior(conv_out);
    } else {
      fused = interior(outs.front());
    }
    const FeatureGrid o = run_layer(hl, hl.weight, fused);
    const auto cells = static_cast<double>(o.cells());
    loss += lambda_spatial * spatial_loss(DetectionGrid::from_head(win.head_fp), DetectionGrid::from_head(o)) / cells;
    if (want_grad) {
      FeatureGrid go(o.height(), o.width(), o.channels());
      for (std::size_t k = 0; k < o.size(); ++k) go[k] = 2.0 * lambda_spatial * (o[k] - win.head_fp[k]) / cells;
      FeatureGrid g_fused;
      run_layer_backward(hl, hl.weight, fused, o, go, {}, {}, &g_fused);
      const std::size_t ch = g_fused.channels();
      if (layer == kFusionScore) {
        FeatureGrid g_conv(conv_out.height(), conv_out.width(), conv_out.channels());
        for (std::size_t r = 0; r < g_fused.height(); ++r)
          for (std::size_t c = 0; c < g_fused.width(); ++c)
            for (std::size_t k = 0; k < ch; ++k) g_conv.at(r + 1, c + 1, k) = g_fused.at(r, c, k);
        FeatureGrid g_mixed;
        run_layer_backward(conv, conv.weight, mixed, conv_out, g_conv, {}, {}, &g_mixed);
        // Softmax mixture over agents, per cell.
        const std::size_t n = win.in.size(), mch = g_mixed.channels();
        std::vector<double> a(n), dw(n);
        for (std::size_t cell = 0; cell < g_mixed.cells(); ++cell) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, outs[j][cell]);
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) z += a[j] = std::exp(outs[j][cell] - mx);
          double wdw = 0.0;
          const double* gm = g_mixed.data() + cell * mch;
          for (std::size_t j = 0; j < n; ++j) {
            a[j] /= z;
            const double* f = win.in[j].data() + cell * mch;
            dw[j] = 0.0;
            for (std::size_t k = 0; k < mch; ++k) dw[j] += gm[k] * f[k];
            wdw += a[j] * dw[j];
          }
          for (std::size_t j = 0; j < n; ++j) grads[j][cell] += a[j] * (dw[j] - wdw);
        }
      } else {
        for (std::size_t r = 0; r < g_fused.height(); ++r)
          for (std::size_t c = 0; c < g_fused.width(); ++c)
            for (std::size_t k = 0; k < ch; ++k) grads[0].at(r + 1, c + 1, k) += g_fused.at(r, c, k);
      }
    }
  }

  if (want_grad) {
    for (std::size_t i = 0; i < xq.size(); ++i) {
      for (double& g : grads[i].values()) g *= scale;
      run_layer_backward(l, w, xq[i], outs[i], grads[i], grad_w, {}, nullptr);
    }
  }
  return loss;
}

struct BlockProblem {
  const ModelParams& fp;
  std::size_t layer;
  const std::vector<Item>& items;
  double lambda_hetero = 0.0;
  double lambda_spatial = 0.0;
  bool alignment = false;

  double item_loss(const Item& it, std::span<const double> w, const QuantParams& act) const {
    return block_window_loss(fp, layer, it, w, act, alignment ? lambda_hetero : 0.0,
                             alignment ? lambda_spatial : 0.0);
  }

  double objective(std::span<const double> w, const QuantParams& act) const {
    double total = 0.0;
    for (const auto& it : items) total += item_loss(it, w, act);
    return total / static_cast<double>(items.size());
  }
};

void check_samples(const std::vector<Scenario>& scenarios, const std::vector<CalibSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("calibration needs at least one sample");
  for (const auto& s : samples) {
    if (s.scenario >= scenarios.size()) throw std::invalid_argument("calibration sample: scenario out of range");
    if (s.frame >= scenarios[s.scenario].frames.size()) {
      throw std::invalid_argument("calibration sample: frame out of range");
    }
    ordered_agents(scenarios[s.scenario], s.spec());
  }
}

std::vector<double> with_incumbent(const CalibConfig& cfg) {
  auto f = scale_grid(cfg.alpha, cfg.beta, cfg.grid_steps);
  f.push_back(1.0);
  return f;
}

}  // namespace

SampleSpec CalibSample::spec() const {
  SampleSpec s{ego_id, present, pose_noise, {}};
  if (latency == LatencyTag::kStaleOneFrame && frame > 0) {
    for (int id : present)
      if (id != ego_id) s.source_frame[id] = frame - 1;
  }
  return s;
}

void CalibConfig::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("calibration fraction must be in (0, 1]");
  if (steps < 0 || grid_steps < 1 || adaround_batch < 1 || crops_per_sample < 1 || crop < 1) {
    throw std::invalid_argument("calibration counts must be positive");
  }
  if (!(alpha > 0.0 && alpha <= beta)) throw std::invalid_argument("calibration grid needs 0 < alpha <= beta");
  if (!(adaround_lr > 0.0)) throw std::invalid_argument("adaround lr must be positive");
  if (lambda_hetero < 0.0 || lambda_spatial < 0.0 || lambda_reg < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  for (int b : {weight_bits, act_bits}) {
    if (!(b >= 32 || (b >= 2 && b <= 16))) throw std::invalid_argument("bits must be in [2, 16] or 32");
  }
  if (pose_noise.sigma_trans_m < 0.0 || pose_noise.sigma_rot_rad < 0.0) {
    throw std::invalid_argument("pose noise must be non-negative");
  }
}

std::vector<CalibSample> build_calib_set(const std::vector<Scenario>& scenarios, const CalibConfig& cfg) {
  cfg.validate();
  if (scenarios.empty()) throw std::invalid_argument("build_calib_set: no scenarios");
  std::vector<std::pair<std::size_t, std::size_t>> frames;
  for (std::size_t k = 0; k < scenarios.size(); ++k)
    for (std::size_t f = 0; f < scenarios[k].frames.size(); ++f) frames.emplace_back(k, f);
  if (frames.empty()) throw std::invalid_argument("build_calib_set: no frames");
  const double want = std::ceil(cfg.fraction * static_cast<double>(frames.size()) - 1e-9);
  const std::size_t n = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, frames.size());

  RngStream rng = RngStream(cfg.seed).split(0xca1b);
  std::vector<CalibSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(frames[i], frames[i + rng.below(frames.size() - i)]);
    const auto [k, f] = frames[i];
    const auto& agents = scenarios[k].agents;
    if (agents.size() > 62) throw std::invalid_argument("build_calib_set: too many agents");
    CalibSample s;
    s.scenario = k;
    s.frame = f;
    const std::size_t ego = rng.below(agents.size());
    s.ego_id = agents[ego].id;
    const std::uint64_t mask = rng.below(std::uint64_t{1} << (agents.size() - 1));
    std::size_t bit = 0;
    for (std::size_t a = 0; a < agents.size(); ++a) {
      if (a == ego) {
        s.present.push_back(agents[a].id);
        continue;
      }
      if (mask >> bit & 1) s.present.push_back(agents[a].id);
      ++bit;
    }
    std::sort(s.present.begin(), s.present.end());
    s.pose_noise = cfg.pose_noise;
    s.noise_seed = rng.next_u64();
    s.latency = rng.below(2) == 0 ? LatencyTag::kSync : LatencyTag::kStaleOneFrame;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> QuantizedModel::block_weights(std::size_t layer) const {
  const auto& w = fp.layers.at(layer).weight;
  const auto& b = blocks.at(layer);
  if (!b.calibrated || b.weight.identity()) return w;
  return rounded_weights(w, b.weight, b.rounding);
}

bool QuantizedModel::fully_calibrated() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const BlockQuant& b) { return b.calibrated; });
}

QuantizedModel make_quantized(const ModelParams& fp, int weight_bits) {
  QuantizedModel qm;
  qm.fp = fp;
  for (const auto& l : fp.layers) {
    BlockQuant b;
    if (weight_bits >= 32) {
      b.weight = identity_qparams();
    } else {
      b.weight = weight_qparams(observe_range(l.weight, Granularity::kPerChannel, l.spec.out_channels),
                                weight_bits, 1.0);
    }
    b.act = identity_qparams();
    qm.blocks.push_back(std::move(b));
  }
  return qm;
}

QuantizedExecutor::QuantizedExecutor(const QuantizedModel& qm) : qm_(qm) {
  if (qm.blocks.size() != qm.fp.layers.size()) throw std::invalid_argument("quantized model: block count mismatch");
  for (std::size_t i = 0; i < qm.blocks.size(); ++i) weights_.push_back(qm.block_weights(i));
}

std::span<const double> QuantizedExecutor::weights(const ModelParams&, std::size_t layer) {
  return weights_.at(layer);
}

void QuantizedExecutor::prepare_input(std::size_t layer, FeatureGrid& x) {
  const auto& b = qm_.blocks.at(layer);
  if (b.calibrated && !b.act.identity()) fake_quant_inplace(x.values(), b.act);
}

std::vector<std::size_t> calibration_order(const ModelParams& p) {
  std::vector<std::size_t> order{kEncDenseConv1, kEncDenseConv2, kEncSparseConv1, kEncSparseConv2};
  if (p.has_compressor()) {
    order.push_back(kCompressDown);
    order.push_back(kCompressUp);
  }
  order.push_back(kFusionScore);
  order.push_back(kFusionConv);
  order.push_back(kHeadLinear);
  return order;
}

BlockIO collect_block_io(const QuantizedModel& qm, const std::vector<Scenario>& scenarios,
                         const std::vector<CalibSample>& samples, std::size_t layer, Upstream upstream) {
  if (layer >= qm.fp.layers.size()) throw std::invalid_argument("collect_block_io: no such block");
  check_samples(scenarios, samples);
  if (upstream == Upstream::kQuantized) {
    for (std::size_t id : calibration_order(qm.fp)) {
      if (id == layer) break;
      if (!qm.blocks[id].calibrated) {
        throw std::logic_error("collect_block_io: upstream block " + qm.fp.layers[id].name + " is not calibrated");
      }
    }
  }
  QuantizedExecutor qex(qm);
  BlockIO io;
  const std::size_t n = samples.size();
  io.inputs.resize(n);
  io.fp_outputs.resize(n);
  io.fp_head.resize(n);
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      const auto& smp = samples[static_cast<std::size_t>(i)];
      const auto& s = scenarios[smp.scenario];
      const SampleSpec spec = smp.spec();
      RecordingExecutor fp_rec(fp_executor(), layer);
      forward(s, smp.frame, spec, qm.fp, smp.stream(), fp_rec);
      auto& in = io.inputs[static_cast<std::size_t>(i)];
      if (upstream == Upstream::kQuantized) {
        RecordingExecutor q_rec(qex, layer);
        forward(s, smp.frame, spec, qm.fp, smp.stream(), q_rec);
        in = std::move(q_rec.inputs);
      } else {
        in = std::move(fp_rec.inputs);
      }
      io.fp_outputs[static_cast<std::size_t>(i)] = std::move(fp_rec.outputs);
      io.fp_head[static_cast<std::size_t>(i)] = std::move(fp_rec.head);
    } catch (...) {
#pragma omp critical(qv2x_collect_error)
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return io;
}

double hetero_loss(const FeatureGrid& h_fp, const FeatureGrid& h_int) {
  if (!h_fp.same_shape(h_int)) throw std::invalid_argument("hetero_loss: shape mismatch");
  return kl_divergence(h_fp, h_int);
}

double block_window_loss(const ModelParams& fp, std::size_t layer, const BlockWindow& win, std::span<const double> w,
                         const QuantParams& act, double lambda_hetero, double lambda_spatial,
                         std::span<double> grad_w) {
  if (layer >= fp.layers.size()) throw std::invalid_argument("block_window_loss: layer out of range");
  if (win.in.size() != win.target.size()) throw std::invalid_argument("block_window_loss: input/target count");
  std::vector<FeatureGrid> xq = win.in;
  if (!act.identity())
    for (auto& x : xq) fake_quant_inplace(x.values(), act);
  return window_loss(fp, layer, win, xq, w, lambda_hetero, lambda_spatial, 1.0, grad_w);
}

double spatial_loss(const DetectionGrid& b_fp, const DetectionGrid& b_int) {
  if (!b_fp.score.same_shape(b_int.score) || !b_fp.offset_x.same_shape(b_int.offset_x) ||
      !b_fp.offset_y.same_shape(b_int.offset_y)) {
    throw std::invalid_argument("spatial_loss: shape mismatch");
  }
  return squared_distance(b_fp.score, b_int.score) + squared_distance(b_fp.offset_x, b_int.offset_x) +
         squared_distance(b_fp.offset_y, b_int.offset_y);
}

QuantizedModel calibrate(const ModelParams& fp, const std::vector<Scenario>& scenarios,
                         const std::vector<CalibSample>& samples, const CalibConfig& cfg, CalibReport* report) {
  cfg.validate();
  if (!fp.all_finite()) throw std::invalid_argument("calibrate: model has non-finite parameters");
  check_samples(scenarios, samples);
  QuantizedModel qm = make_quantized(fp, cfg.weight_bits);
  CalibReport rep;

  for (std::size_t layer : calibration_order(fp)) {
    const Layer& l = fp.layers[layer];
    BlockReport br;
    br.layer = layer;
    br.name = l.name;
    try {
      const BlockIO io = collect_block_io(qm, scenarios, samples, layer, Upstream::kQuantized);
      const auto items = build_items(io, layer, cfg);
      BlockQuant& bq = qm.blocks[layer];
      if (items.empty()) {
        // Never executed on the calibration set (e.g. a modality nobody has):
        // keep max-min weights and a pass-through input.
        bq.calibrated = true;
        rep.blocks.push_back(br);
        continue;
      }

      ValueRange ar;
      for (const auto& per_sample : io.inputs)
        for (const auto& x : per_sample) merge_range(ar, observe_range(x.values(), Granularity::kPerTensor));
      const ValueRange wr = observe_range(l.weight, Granularity::kPerChannel, l.spec.out_channels);
      auto wq = [&](double f) {
        return cfg.weight_bits >= 32 ? identity_qparams() : weight_qparams(wr, cfg.weight_bits, f);
      };
      auto aq = [&](double f) { return cfg.act_bits >= 32 ? identity_qparams() : act_qparams(ar, cfg.act_bits, f); };

      BlockProblem prob{fp, layer, items};
      prob.alignment = cfg.alignment && l.spec.tag == BlockTag::kFusion;
      prob.lambda_hetero = cfg.lambda_hetero;
      prob.lambda_spatial = cfg.lambda_spatial;

      bq.weight = wq(1.0);
      bq.act = aq(1.0);
      br.objective_initial = prob.objective(fake_quant(l.weight, bq.weight), bq.act);

      const auto factors = with_incumbent(cfg);
      if (cfg.search_scales && !bq.weight.identity()) {
        const auto res = search_scale_factor(factors, [&](double f) {
          return prob.objective(fake_quant(l.weight, wq(f)), bq.act);
        });
        br.weight_factor = res.best_factor;
        bq.weight = wq(res.best_factor);
      }
      if (cfg.search_scales && !bq.act.identity()) {
        const auto w = fake_quant(l.weight, bq.weight);
        const auto res = search_scale_factor(factors, [&](double f) { return prob.objective(w, aq(f)); });
        br.act_factor = res.best_factor;
        bq.act = aq(br.act_factor);
      }

      if (cfg.adaround && cfg.steps > 0 && !bq.weight.identity()) {
        // Inputs are fixed during rounding, so quantize them once.
        std::vector<std::vector<FeatureGrid>> xq(items.size());
        for (std::size_t k = 0; k < items.size(); ++k) {
          for (FeatureGrid x : items[k].in) {
            if (!bq.act.identity()) fake_quant_inplace(x.values(), bq.act);
            xq[k].push_back(std::move(x));
          }
        }
        const RngStream batch_rng = RngStream(cfg.seed).split(0xada0 + layer);
        const double lh = prob.alignment ? prob.lambda_hetero : 0.0;
        const double ls = prob.alignment ? prob.lambda_spatial : 0.0;
        ReconstructionFn recon = [&](int iter, std::span<const double> w, std::span<double> grad) {
          std::vector<std::size_t> batch;
          if (iter < 0) {
            for (std::size_t k = 0; k < items.size(); ++k) batch.push_back(k);
          } else {
            RngStream r = batch_rng.split(static_cast<std::uint64_t>(iter));
            for (int b = 0; b < cfg.adaround_batch; ++b) batch.push_back(r.below(items.size()));
          }
          const double inv = 1.0 / static_cast<double>(batch.size());
          double loss = 0.0;
          for (std::size_t k : batch) loss += inv * window_loss(fp, layer, items[k], xq[k], w, lh, ls, inv, grad);
          return loss;
        };
        AdaRoundConfig ac;
        ac.iters = cfg.steps;
        ac.lr = cfg.adaround_lr;
        ac.lambda_reg = cfg.lambda_reg;
        br.rounding = adaround_optimize(l.weight, bq.weight, recon, ac);
        bq.rounding = br.rounding.vars.hard_mask();

        if (cfg.search_scales && !bq.act.identity()) {
          const auto w = rounded_weights(l.weight, bq.weight, bq.rounding);
          const double base = br.act_factor;
          const auto res = search_scale_factor(factors, [&](double f) { return prob.objective(w, aq(f * base)); });
          br.act_factor = base * res.best_factor;
          bq.act = aq(br.act_factor);
        }
      }
      bq.calibrated = true;
      br.objective_final = prob.objective(qm.block_weights(layer), bq.act);
      if (!std::isfinite(br.objective_final)) throw std::runtime_error("non-finite objective");
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("calibration failed at block " + std::to_string(layer) + " (" + l.name +
                               "): " + e.what());
    }
    rep.blocks.push_back(std::move(br));
  }
  if (report) *report = std::move(rep);
  return qm;
}

QuantizedModel calibrate_maxmin(const ModelParams& fp, const std::vector<Scenario>& scenarios,
                                const std::vector<CalibSample>& samples, int weight_bits, int act_bits) {
  CalibConfig cfg;
  cfg.weight_bits = weight_bits;
  cfg.act_bits = act_bits;
  cfg.search_scales = false;
  cfg.adaround = false;
  cfg.alignment = false;
  return calibrate(fp, scenarios, samples, cfg);
}

double evaluate_ap(const std::vector<Scenario>& scenarios, const QuantizedModel& qm, const EvalOptions& opts,
                   RemoteCodec* codec) {
  QuantizedExecutor ex(qm);
  return evaluate_ap(scenarios, qm.fp, opts, ex, codec);
}

}  // namespace qv2x
