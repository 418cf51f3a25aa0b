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
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qv2x/byte_io.hpp"
#include "qv2x/kernels.hpp"
#include "qv2x/numerics.hpp"
#include "qv2x/scene.hpp"

namespace qv2x {

enum class LayerKind : std::uint8_t { kConv3x3 = 0, kRelu = 1, kMaxPool2 = 2, kLinearPerCell = 3 };
enum class BlockTag : std::uint8_t { kEncoder = 0, kFusion = 1, kHead = 2 };

const char* block_tag_name(BlockTag t);

struct BlockSpec {
  LayerKind kind = LayerKind::kConv3x3;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  BlockTag tag = BlockTag::kEncoder;

  void validate() const;
  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// One weighted layer (conv3x3 or per-cell linear) with an optional trailing
/// ReLU. This is also the unit the calibration engine works on.
struct Layer {
  std::string name;
  BlockSpec spec;
  bool relu = false;
  std::vector<double> weight;  // [ky][kx][in][out]
  std::vector<double> bias;    // [out]

  int kernel() const { return spec.kind == LayerKind::kConv3x3 ? 3 : 1; }
  kernels::ConvShape shape(std::size_t height, std::size_t width) const {
    return {height, width, spec.in_channels, spec.out_channels, kernel()};
  }

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct ModelConfig {
  std::size_t encoder_hidden = 8;
  std::size_t feature_channels = 16;
  // Channels of the optional sender-side bottleneck (0 disables it).
  std::size_t compressed_channels = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Fixed layer order. The compressor layers exist only when configured.
enum LayerId : std::size_t {
  kEncDenseConv1 = 0,
  kEncDenseConv2,
  kEncSparseConv1,
  kEncSparseConv2,
  kFusionScore,
  kFusionConv,
  kHeadLinear,
  kCompressDown,
  kCompressUp,
};

inline constexpr std::size_t kHeadOutputs = 3;  // score logit, dx, dy

std::size_t encoder_layer(Modality m, int stage);

struct ModelParams {
  ModelConfig config;
  std::vector<Layer> layers;

  bool has_compressor() const { return layers.size() > kCompressUp; }
  std::size_t parameter_count() const;
  bool all_finite() const;
  /// Same layers with all values set to zero; used as a gradient buffer.
  ModelParams zeros_like() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// He-initialised model with values rounded to float precision.
ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

void save_model(const std::string& path, const ModelParams& p, const ArtifactStamp& stamp);
ModelParams load_model(const std::string& path, ArtifactStamp* stamp = nullptr);
void write_model(ByteWriter& w, const ModelParams& p);
ModelParams read_model(ByteReader& r);

/// Per-cell detection surrogate: score logit and the offset (in cells) from
/// the cell centre to the object centre.
struct DetectionGrid {
  FeatureGrid score;
  FeatureGrid offset_x;
  FeatureGrid offset_y;

  static DetectionGrid from_head(const FeatureGrid& out);
  FeatureGrid stacked() const;  // H x W x 3
  friend bool operator==(const DetectionGrid&, const DetectionGrid&) = default;
};

// ---------------------------------------------------------------------------
// Layer execution.

/// Hook through which a forward pass picks layer weights and may transform
/// (quantize) or record each layer's input and output. The default runs
/// the full-precision model unchanged.
class LayerExecutor {
 public:
  virtual ~LayerExecutor() = default;
  virtual std::span<const double> weights(const ModelParams& p, std::size_t layer) {
    return p.layers[layer].weight;
  }
  virtual void prepare_input(std::size_t /*layer*/, FeatureGrid& /*x*/) {}
  virtual void record_output(std::size_t /*layer*/, const FeatureGrid& /*y*/) {}
};

LayerExecutor& fp_executor();

/// conv/linear with the given weights, the layer's bias and optional ReLU.
FeatureGrid run_layer(const Layer& l, std::span<const double> weights, const FeatureGrid& x);
/// Backward through run_layer given its input x and output y. Weight and
/// bias gradients accumulate; grad_x (if non-null) is overwritten.
void run_layer_backward(const Layer& l, std::span<const double> weights, const FeatureGrid& x,
                        const FeatureGrid& y, const FeatureGrid& grad_y, std::span<double> grad_w,
                        std::span<double> grad_b, FeatureGrid* grad_x);

FeatureGrid apply_layer(const ModelParams& p, std::size_t layer, FeatureGrid x, LayerExecutor& ex);

FeatureGrid relu(const FeatureGrid& x);
FeatureGrid maxpool2(const FeatureGrid& x);
FeatureGrid maxpool2_backward(const FeatureGrid& x, const FeatureGrid& grad_y);

// ---------------------------------------------------------------------------
// Model stages.

FeatureGrid encode(const FeatureGrid& obs, const ModelParams& p, Modality m,
                   LayerExecutor& ex = fp_executor());
/// Sender-side bottleneck (identity when the model has none).
FeatureGrid compress(const FeatureGrid& f, const ModelParams& p, LayerExecutor& ex = fp_executor());
/// Per-agent scoring logits, one H x W x 1 grid per feature.
std::vector<FeatureGrid> fusion_scores(const std::vector<FeatureGrid>& feats, const ModelParams& p,
                                       LayerExecutor& ex = fp_executor());
/// Per-cell softmax over agents of the scores, weighted sum of features.
FeatureGrid fusion_mix(const std::vector<FeatureGrid>& feats, const std::vector<FeatureGrid>& scores);
/// Scores, mix and the fusion conv: returns H.
FeatureGrid fuse(const std::vector<FeatureGrid>& feats, const ModelParams& p,
                 LayerExecutor& ex = fp_executor());
DetectionGrid head(const FeatureGrid& h, const ModelParams& p, LayerExecutor& ex = fp_executor());

// ---------------------------------------------------------------------------
// Full cooperative forward pass.

struct PoseNoise {
  double sigma_trans_m = 0.0;
  double sigma_rot_rad = 0.0;
  friend bool operator==(const PoseNoise&, const PoseNoise&) = default;
};

/// Which agents take part in one evaluation of the model.
struct SampleSpec {
  int ego_id = 0;
  std::vector<int> present;  // must contain ego_id; empty means every agent
  PoseNoise pose_noise;
  // Remote agents listed here are observed (and localised) at an earlier
  // frame than the ego; the others use the current frame.
  std::map<int, std::size_t> source_frame;

  std::size_t frame_of(int agent_id, std::size_t frame) const;
};

/// Hook applied to every remote (non-ego) feature before it is warped, e.g.
/// codebook quantization. backward maps the gradient at the receiver back to
/// the sender's feature.
class RemoteCodec {
 public:
  virtual ~RemoteCodec() = default;
  virtual FeatureGrid transmit(const FeatureGrid& f, int agent_id) = 0;
  virtual FeatureGrid backward(const FeatureGrid& grad, int /*agent_id*/) { return grad; }
};

/// Observation and pose estimate drawn for an agent at a frame. Both depend
/// only on (run stream, frame, agent) so stale and live evaluations agree.
FeatureGrid agent_observation(const Scenario& s, int agent_id, std::size_t frame, const RngStream& run);
Pose2D agent_pose_estimate(const Scenario& s, int agent_id, std::size_t frame, const PoseNoise& noise,
                           const RngStream& run);

/// Present agents, ego first then ascending id.
std::vector<int> ordered_agents(const Scenario& s, const SampleSpec& spec);

struct ForwardTrace {
  struct Agent {
    int id = 0;
    Modality modality = Modality::kDense;
    FeatureGrid obs, hidden, feature;
    FeatureGrid bottleneck, bottleneck_out;  // compressor intermediates (remote agents only)
    FeatureGrid sent;                        // feature after the optional codec
    WarpPlan plan;
    FeatureGrid warped;
  };
  std::vector<Agent> agents;
  std::vector<FeatureGrid> scores;
  FeatureGrid mixed, fused, head_out;
};

/// Encode every present agent, pass remote features through the optional
/// bottleneck and codec, warp into the ego frame. Ego comes first.
std::vector<FeatureGrid> encode_and_warp(const Scenario& s, std::size_t frame, const SampleSpec& spec,
                                         const ModelParams& p, const RngStream& run,
                                         LayerExecutor& ex = fp_executor(),
                                         RemoteCodec* codec = nullptr);
DetectionGrid fuse_and_head(const std::vector<FeatureGrid>& warped, const ModelParams& p,
                            LayerExecutor& ex = fp_executor());

DetectionGrid forward(const Scenario& s, std::size_t frame, const SampleSpec& spec, const ModelParams& p,
                      const RngStream& run, LayerExecutor& ex = fp_executor(),
                      RemoteCodec* codec = nullptr);

/// Full-precision forward that keeps every intermediate for backprop.
DetectionGrid forward_traced(const Scenario& s, std::size_t frame, const SampleSpec& spec,
                             const ModelParams& p, const RngStream& run, ForwardTrace& trace,
                             RemoteCodec* codec = nullptr);
/// Accumulates parameter gradients of <grad_head, head output> into grads.
void backward(const ModelParams& p, const ForwardTrace& trace, const FeatureGrid& grad_head,
              ModelParams& grads, RemoteCodec* codec = nullptr);

// ---------------------------------------------------------------------------
// Training objective and metric.

struct DetectionTargets {
  FeatureGrid label;  // H x W x 1, {0, 1}
  FeatureGrid dx, dy;
};

DetectionTargets make_targets(const Scenario& s, std::size_t frame, int ego_id);

/// Mean-over-cells BCE-with-logits on the score plus mean-over-cells squared
/// offset error on positive cells. Writes the H x W x 3 gradient when asked.
double detection_loss(const DetectionGrid& pred, const DetectionTargets& t, FeatureGrid* grad = nullptr);

struct FitConfig {
  int epochs = 30;
  double lr = 0.05;
  double momentum = 0.9;
  int batch = 4;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;  // trailing scenarios held out for model selection
  double remote_keep = 0.8;   // probability that each remote agent is present
  double grad_clip = 5.0;     // global-norm clip per step (0 disables)
};

struct FitReport {
  double initial_val_loss = 0.0;
  std::vector<double> train_loss;  // mean per epoch
  std::vector<double> val_loss;    // per epoch
  int best_epoch = 0;              // 0 = initialisation
};

/// Mini-batch SGD with momentum; returns the parameters with the lowest
/// validation loss, rounded to float precision.
ModelParams fit_fp(const std::vector<Scenario>& scenarios, const ModelParams& init, const FitConfig& cfg,
                   FitReport* report = nullptr);

/// Default recall operating points: 0, 0.01, ..., 1.
std::vector<double> default_recall_points();

/// Cell-level average precision: each cell is a binary decision ranked by
/// its score; returns the mean over `recall_points` of the interpolated
/// precision (max precision at recall >= r). 0 when there are no positives.
double eval_ap(const std::vector<DetectionGrid>& preds, const std::vector<FeatureGrid>& labels,
               const std::vector<double>& recall_points = default_recall_points());

struct EvalOptions {
  int ego_id = 0;
  PoseNoise pose_noise;
  std::uint64_t seed = 0;
};

/// Stream used for scenario k of an evaluation run.
RngStream eval_stream(std::uint64_t seed, std::size_t scenario_index);

/// Ideal (synchronous, lossless) evaluation over every frame of every
/// scenario with all agents present.
double evaluate_ap(const std::vector<Scenario>& scenarios, const ModelParams& p, const EvalOptions& opts,
                   LayerExecutor& ex = fp_executor(), RemoteCodec* codec = nullptr);

}  // namespace qv2x
