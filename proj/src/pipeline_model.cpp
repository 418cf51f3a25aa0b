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
#include <limits>
#include <stdexcept>

#include "qv2x/pipeline.hpp"

namespace qv2x {

namespace {

constexpr char kModelMagic[] = "QV2X";
constexpr std::uint16_t kModelVersion = 1;

Layer make_layer(std::string name, LayerKind kind, std::size_t in, std::size_t out, BlockTag tag,
                 bool relu) {
  Layer l;
  l.name = std::move(name);
  l.spec = BlockSpec{kind, in, out, tag};
  l.relu = relu;
  l.weight.assign(static_cast<std::size_t>(l.kernel() * l.kernel()) * in * out, 0.0);
  l.bias.assign(out, 0.0);
  return l;
}

std::vector<Layer> layer_skeleton(const ModelConfig& cfg) {
  if (cfg.encoder_hidden == 0 || cfg.feature_channels == 0) {
    throw std::invalid_argument("model channel counts must be positive");
  }
  const std::size_t hid = cfg.encoder_hidden, c = cfg.feature_channels;
  std::vector<Layer> ls;
  ls.push_back(make_layer("enc_dense.conv1", LayerKind::kConv3x3, 1, hid, BlockTag::kEncoder, true));
  ls.push_back(make_layer("enc_dense.conv2", LayerKind::kConv3x3, hid, c, BlockTag::kEncoder, true));
  ls.push_back(make_layer("enc_sparse.conv1", LayerKind::kConv3x3, 1, hid, BlockTag::kEncoder, true));
  ls.push_back(make_layer("enc_sparse.conv2", LayerKind::kConv3x3, hid, c, BlockTag::kEncoder, true));
  ls.push_back(make_layer("fusion.score", LayerKind::kLinearPerCell, c, 1, BlockTag::kFusion, false));
  ls.push_back(make_layer("fusion.conv", LayerKind::kConv3x3, c, c, BlockTag::kFusion, true));
  ls.push_back(make_layer("head", LayerKind::kLinearPerCell, c, kHeadOutputs, BlockTag::kHead, false));
  if (cfg.compressed_channels > 0) {
    if (cfg.compressed_channels > c) throw std::invalid_argument("bottleneck wider than the feature");
    ls.push_back(make_layer("compress.down", LayerKind::kLinearPerCell, c, cfg.compressed_channels,
                            BlockTag::kEncoder, false));
    ls.push_back(make_layer("compress.up", LayerKind::kLinearPerCell, cfg.compressed_channels, c,
                            BlockTag::kEncoder, true));
  }
  return ls;
}

}  // namespace

const char* block_tag_name(BlockTag t) {
  switch (t) {
    case BlockTag::kEncoder: return "encoder";
    case BlockTag::kFusion: return "fusion";
    case BlockTag::kHead: return "head";
  }
  return "?";
}

void BlockSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("block channel counts must be > 0");
  if ((kind == LayerKind::kRelu || kind == LayerKind::kMaxPool2) && in_channels != out_channels) {
    throw std::invalid_argument("relu/maxpool blocks keep the channel count");
  }
}

std::size_t encoder_layer(Modality m, int stage) {
  if (stage != 0 && stage != 1) throw std::invalid_argument("encoder stage must be 0 or 1");
  return (m == Modality::kDense ? kEncDenseConv1 : kEncSparseConv1) + static_cast<std::size_t>(stage);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& l : layers) {
    for (double v : l.weight) {
      if (!std::isfinite(v)) return false;
    }
    for (double v : l.bias) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (auto& l : z.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return z;
}

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p;
  p.config = cfg;
  p.layers = layer_skeleton(cfg);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    RngStream rng = RngStream(seed).split(i);
    const double fan_in = static_cast<double>(l.kernel() * l.kernel()) * static_cast<double>(l.spec.in_channels);
    double std_dev = std::sqrt(2.0 / fan_in);
    if (i == kFusionScore || i == kHeadLinear || i == kCompressDown) std_dev = std::sqrt(1.0 / fan_in);
    for (double& w : l.weight) w = static_cast<float>(std_dev * rng.normal());
  }
  // Objects cover a small fraction of the cells; start the score prior low.
  p.layers[kHeadLinear].bias[0] = -2.0;
  return p;
}

void write_model(ByteWriter& w, const ModelParams& p) {
  w.u32(static_cast<std::uint32_t>(p.config.encoder_hidden));
  w.u32(static_cast<std::uint32_t>(p.config.feature_channels));
  w.u32(static_cast<std::uint32_t>(p.config.compressed_channels));
  w.u32(static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.spec.kind));
    w.u8(static_cast<std::uint8_t>(l.spec.tag));
    w.u32(static_cast<std::uint32_t>(l.spec.in_channels));
    w.u32(static_cast<std::uint32_t>(l.spec.out_channels));
    w.u8(l.relu ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(l.weight.size()));
    for (double v : l.weight) w.f32(static_cast<float>(v));
    w.u32(static_cast<std::uint32_t>(l.bias.size()));
    for (double v : l.bias) w.f32(static_cast<float>(v));
  }
}

ModelParams read_model(ByteReader& r) {
  ModelParams p;
  p.config.encoder_hidden = r.u32();
  p.config.feature_channels = r.u32();
  p.config.compressed_channels = r.u32();
  constexpr std::size_t kMaxChannels = 4096;
  if (p.config.encoder_hidden > kMaxChannels || p.config.feature_channels > kMaxChannels) {
    throw FormatError("model: implausible channel counts");
  }
  std::vector<Layer> expect;
  try {
    expect = layer_skeleton(p.config);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model: ") + e.what());
  }
  const std::size_t n = r.u32();
  if (n != expect.size()) throw FormatError("model: unexpected layer count");
  for (std::size_t i = 0; i < n; ++i) {
    Layer l;
    l.name = r.str();
    l.spec.kind = static_cast<LayerKind>(r.u8());
    l.spec.tag = static_cast<BlockTag>(r.u8());
    l.spec.in_channels = r.u32();
    l.spec.out_channels = r.u32();
    l.relu = r.u8() != 0;
    if (l.name != expect[i].name || !(l.spec == expect[i].spec) || l.relu != expect[i].relu) {
      throw FormatError("model: layer " + std::to_string(i) + " does not match the architecture");
    }
    const std::size_t nw = r.u32();
    if (nw != expect[i].weight.size()) throw FormatError("model: weight count mismatch in " + l.name);
    l.weight.resize(nw);
    for (double& v : l.weight) v = r.f32();
    const std::size_t nb = r.u32();
    if (nb != expect[i].bias.size()) throw FormatError("model: bias count mismatch in " + l.name);
    l.bias.resize(nb);
    for (double& v : l.bias) v = r.f32();
    p.layers.push_back(std::move(l));
  }
  if (!p.all_finite()) throw FormatError("model: non-finite parameter");
  return p;
}

void save_model(const std::string& path, const ModelParams& p, const ArtifactStamp& stamp) {
  ByteWriter w;
  w.raw(kModelMagic);
  w.u16(kModelVersion);
  w.u64(stamp.config_hash);
  w.u64(stamp.seed);
  write_model(w, p);
  write_file_bytes(path, w.buffer());
}

ModelParams load_model(const std::string& path, ArtifactStamp* stamp) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != kModelMagic) throw FormatError(path + ": not a model file");
  const auto version = r.u16();
  if (version != kModelVersion) {
    throw VersionMismatch(path + ": model format version " + std::to_string(version) + ", expected " +
                          std::to_string(kModelVersion));
  }
  ArtifactStamp st;
  st.config_hash = r.u64();
  st.seed = r.u64();
  ModelParams p = read_model(r);
  if (r.remaining() != 0) throw FormatError(path + ": trailing bytes");
  if (stamp) *stamp = st;
  return p;
}

DetectionGrid DetectionGrid::from_head(const FeatureGrid& out) {
  if (out.channels() != kHeadOutputs) throw std::invalid_argument("head output must have 3 channels");
  DetectionGrid d{FeatureGrid(out.height(), out.width(), 1), FeatureGrid(out.height(), out.width(), 1),
                  FeatureGrid(out.height(), out.width(), 1)};
  for (std::size_t i = 0; i < out.cells(); ++i) {
    d.score[i] = out[3 * i];
    d.offset_x[i] = out[3 * i + 1];
    d.offset_y[i] = out[3 * i + 2];
  }
  return d;
}

FeatureGrid DetectionGrid::stacked() const {
  FeatureGrid out(score.height(), score.width(), kHeadOutputs);
  for (std::size_t i = 0; i < score.cells(); ++i) {
    out[3 * i] = score[i];
    out[3 * i + 1] = offset_x[i];
    out[3 * i + 2] = offset_y[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

LayerExecutor& fp_executor() {
  static LayerExecutor ex;
  return ex;
}

FeatureGrid run_layer(const Layer& l, std::span<const double> weights, const FeatureGrid& x) {
  if (x.channels() != l.spec.in_channels) {
    throw std::invalid_argument("layer " + l.name + ": expected " + std::to_string(l.spec.in_channels) +
                                " input channels, got " + std::to_string(x.channels()));
  }
  if (weights.size() != l.weight.size()) throw std::invalid_argument("layer " + l.name + ": weight size");
  FeatureGrid y(x.height(), x.width(), l.spec.out_channels);
  kernels::conv_forward(l.shape(x.height(), x.width()), x.data(), weights.data(), l.bias.data(), y.data());
  if (l.relu) {
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  }
  return y;
}

void run_layer_backward(const Layer& l, std::span<const double> weights, const FeatureGrid& x,
                        const FeatureGrid& y, const FeatureGrid& grad_y, std::span<double> grad_w,
                        std::span<double> grad_b, FeatureGrid* grad_x) {
  const auto shape = l.shape(x.height(), x.width());
  const FeatureGrid* gz = &grad_y;
  FeatureGrid masked;
  if (l.relu) {
    masked = grad_y;
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if (!(y[i] > 0.0)) masked[i] = 0.0;
    }
    gz = &masked;
  }
  if (!grad_w.empty()) {
    kernels::conv_backward_weights(shape, x.data(), gz->data(), grad_w.data(),
                                   grad_b.empty() ? nullptr : grad_b.data());
  }
  if (grad_x) {
    *grad_x = FeatureGrid(x.height(), x.width(), x.channels());
    kernels::conv_backward_input(shape, gz->data(), weights.data(), grad_x->data());
  }
}

FeatureGrid apply_layer(const ModelParams& p, std::size_t layer, FeatureGrid x, LayerExecutor& ex) {
  ex.prepare_input(layer, x);
  FeatureGrid y = run_layer(p.layers[layer], ex.weights(p, layer), x);
  ex.record_output(layer, y);
  return y;
}

FeatureGrid relu(const FeatureGrid& x) {
  FeatureGrid y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

FeatureGrid maxpool2(const FeatureGrid& x) {
  const std::size_t h = x.height() / 2, w = x.width() / 2, c = x.channels();
  FeatureGrid y(h, w, c);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t q = 0; q < w; ++q) {
      for (std::size_t k = 0; k < c; ++k) {
        y.at(r, q, k) = std::max({x.at(2 * r, 2 * q, k), x.at(2 * r, 2 * q + 1, k), x.at(2 * r + 1, 2 * q, k),
                                  x.at(2 * r + 1, 2 * q + 1, k)});
      }
    }
  }
  return y;
}

FeatureGrid maxpool2_backward(const FeatureGrid& x, const FeatureGrid& grad_y) {
  FeatureGrid gx(x.height(), x.width(), x.channels());
  for (std::size_t r = 0; r < grad_y.height(); ++r) {
    for (std::size_t q = 0; q < grad_y.width(); ++q) {
      for (std::size_t k = 0; k < x.channels(); ++k) {
        // The first maximum in scan order receives the gradient.
        std::size_t br = 2 * r, bq = 2 * q;
        for (std::size_t dr = 0; dr < 2; ++dr) {
          for (std::size_t dq = 0; dq < 2; ++dq) {
            if (x.at(2 * r + dr, 2 * q + dq, k) > x.at(br, bq, k)) {
              br = 2 * r + dr;
              bq = 2 * q + dq;
            }
          }
        }
        gx.at(br, bq, k) += grad_y.at(r, q, k);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------

FeatureGrid encode(const FeatureGrid& obs, const ModelParams& p, Modality m, LayerExecutor& ex) {
  if (obs.channels() != 1) throw std::invalid_argument("encode: observation must have one channel");
  FeatureGrid h = apply_layer(p, encoder_layer(m, 0), obs, ex);
  return apply_layer(p, encoder_layer(m, 1), std::move(h), ex);
}

FeatureGrid compress(const FeatureGrid& f, const ModelParams& p, LayerExecutor& ex) {
  if (!p.has_compressor()) return f;
  FeatureGrid b = apply_layer(p, kCompressDown, f, ex);
  return apply_layer(p, kCompressUp, std::move(b), ex);
}

std::vector<FeatureGrid> fusion_scores(const std::vector<FeatureGrid>& feats, const ModelParams& p,
                                       LayerExecutor& ex) {
  std::vector<FeatureGrid> scores;
  scores.reserve(feats.size());
  for (const auto& f : feats) scores.push_back(apply_layer(p, kFusionScore, f, ex));
  return scores;
}

FeatureGrid fusion_mix(const std::vector<FeatureGrid>& feats, const std::vector<FeatureGrid>& scores) {
  if (feats.empty()) throw std::invalid_argument("fuse: no features");
  if (scores.size() != feats.size()) throw std::invalid_argument("fuse: score count mismatch");
  for (const auto& f : feats) require_same_shape(f, feats.front(), "fuse");
  const std::size_t n = feats.size(), ch = feats.front().channels(), cells = feats.front().cells();
  FeatureGrid m(feats.front().height(), feats.front().width(), ch);
  std::vector<double> wts(n);
  for (std::size_t i = 0; i < cells; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) mx = std::max(mx, scores[a][i]);
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      wts[a] = std::exp(scores[a][i] - mx);
      z += wts[a];
    }
    double* dst = m.data() + i * ch;
    for (std::size_t a = 0; a < n; ++a) {
      const double wa = wts[a] / z;
      const double* src = feats[a].data() + i * ch;
      for (std::size_t c = 0; c < ch; ++c) dst[c] += wa * src[c];
    }
  }
  return m;
}

FeatureGrid fuse(const std::vector<FeatureGrid>& feats, const ModelParams& p, LayerExecutor& ex) {
  if (feats.empty()) throw std::invalid_argument("fuse: no features");
  const auto scores = fusion_scores(feats, p, ex);
  return apply_layer(p, kFusionConv, fusion_mix(feats, scores), ex);
}

DetectionGrid head(const FeatureGrid& h, const ModelParams& p, LayerExecutor& ex) {
  return DetectionGrid::from_head(apply_layer(p, kHeadLinear, h, ex));
}

}  // namespace qv2x
