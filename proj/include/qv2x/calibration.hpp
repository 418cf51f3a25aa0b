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

#include "qv2x/pipeline.hpp"
#include "qv2x/quantizer.hpp"

namespace qv2x {

enum class LatencyTag : std::uint8_t { kSync = 0, kStaleOneFrame = 1 };

/// One multi-agent forward pass used for calibration.
struct CalibSample {
  std::size_t scenario = 0;  // index into the scenario list
  std::size_t frame = 0;
  int ego_id = 0;
  std::vector<int> present;  // sorted, contains ego_id
  PoseNoise pose_noise;
  std::uint64_t noise_seed = 0;  // stream for observation and pose noise
  LatencyTag latency = LatencyTag::kSync;

  /// Stale samples read every remote agent one frame back (clamped at 0).
  SampleSpec spec() const;
  RngStream stream() const { return RngStream(noise_seed); }
  friend bool operator==(const CalibSample&, const CalibSample&) = default;
};

struct CalibConfig {
  double fraction = 0.005;  // of all training frames
  int steps = 5000;         // rounding iterations per block
  double alpha = 0.5;
  double beta = 1.2;
  int grid_steps = 100;
  double adaround_lr = 1e-2;
  int adaround_batch = 4;
  double lambda_reg = 0.01;
  double lambda_hetero = 1.0;
  double lambda_spatial = 0.1;
  int weight_bits = 8;
  int act_bits = 8;
  bool search_scales = true;
  bool adaround = true;
  bool alignment = true;  // false drops the fusion-block loss terms entirely
  std::size_t crop = 16;  // side of the reconstruction window in cells
  int crops_per_sample = 4;
  PoseNoise pose_noise{0.1, 0.0};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Samples ceil(fraction * total_frames) distinct frames; for each one a
/// uniform ego, a uniform subset of the other agents, a pose-noise stream
/// and a uniform latency tag.
std::vector<CalibSample> build_calib_set(const std::vector<Scenario>& scenarios, const CalibConfig& cfg);

struct BlockQuant {
  QuantParams weight;
  std::vector<std::uint8_t> rounding;  // 0/1 per weight; empty means round-to-nearest
  QuantParams act;                     // applied to the block input
  bool calibrated = false;

  friend bool operator==(const BlockQuant&, const BlockQuant&) = default;
};

/// Full-precision parameters plus one weight and one input-activation
/// quantizer per layer. Biases stay in full precision.
struct QuantizedModel {
  ModelParams fp;
  std::vector<BlockQuant> blocks;

  /// Dequantized weights of a calibrated block, FP weights otherwise.
  std::vector<double> block_weights(std::size_t layer) const;
  bool fully_calibrated() const;
  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

/// Uncalibrated container: every block has max-min weight parameters and an
/// identity activation quantizer.
QuantizedModel make_quantized(const ModelParams& fp, int weight_bits);

/// Runs calibrated blocks with fake-quantized weights and inputs; blocks not
/// yet calibrated run in full precision.
class QuantizedExecutor : public LayerExecutor {
 public:
  explicit QuantizedExecutor(const QuantizedModel& qm);
  std::span<const double> weights(const ModelParams& p, std::size_t layer) override;
  void prepare_input(std::size_t layer, FeatureGrid& x) override;

 private:
  const QuantizedModel& qm_;
  std::vector<std::vector<double>> weights_;
};

/// Order in which blocks are calibrated: encoders, compressor, fusion, head.
std::vector<std::size_t> calibration_order(const ModelParams& p);

enum class Upstream : std::uint8_t { kFullPrecision = 0, kQuantized = 1 };

/// Per sample, every input and full-precision output the block sees in one
/// forward pass (one entry per call, e.g. one per agent for an encoder), and
/// the full-precision head output.
struct BlockIO {
  std::vector<std::vector<FeatureGrid>> inputs;
  std::vector<std::vector<FeatureGrid>> fp_outputs;
  std::vector<FeatureGrid> fp_head;
};

/// Inputs come from the requested pathway; reference outputs always come
/// from the full-precision model. Requesting a quantized upstream while an
/// earlier block is uncalibrated throws.
BlockIO collect_block_io(const QuantizedModel& qm, const std::vector<Scenario>& scenarios,
                         const std::vector<CalibSample>& samples, std::size_t layer, Upstream upstream);

/// KL divergence between the softmaxes of full-precision and quantized
/// fused features.
double hetero_loss(const FeatureGrid& h_fp, const FeatureGrid& h_int);
/// Sum of squared differences over the score and both offset channels.
double spatial_loss(const DetectionGrid& b_fp, const DetectionGrid& b_int);

/// One reconstruction window of a block: raw inputs with a one-cell halo,
/// full-precision block outputs and head output on the interior.
struct BlockWindow {
  std::vector<FeatureGrid> in;
  std::vector<FeatureGrid> target;
  FeatureGrid head_fp;
};

/// Block objective on one window: squared error per interior cell, plus
/// lambda_hetero * KL(target, output) and lambda_spatial * spatial_loss / cells
/// with the rest of the network in full precision. Pass zero lambdas for
/// blocks without alignment terms. Inputs go through `act` first. Adds
/// d loss / d w into grad_w when it is non-empty.
double block_window_loss(const ModelParams& fp, std::size_t layer, const BlockWindow& win, std::span<const double> w,
                         const QuantParams& act, double lambda_hetero, double lambda_spatial,
                         std::span<double> grad_w = {});

struct BlockReport {
  std::size_t layer = 0;
  std::string name;
  double weight_factor = 1.0;
  double act_factor = 1.0;
  double objective_initial = 0.0;  // after max-min initialisation
  double objective_final = 0.0;
  AdaRoundReport rounding;
};

struct CalibReport {
  std::vector<BlockReport> blocks;
};

QuantizedModel calibrate(const ModelParams& fp, const std::vector<Scenario>& scenarios,
                         const std::vector<CalibSample>& samples, const CalibConfig& cfg,
                         CalibReport* report = nullptr);

/// Max-min weights and activations (activations observed on the quantized
/// prefix), no search and no learned rounding.
QuantizedModel calibrate_maxmin(const ModelParams& fp, const std::vector<Scenario>& scenarios,
                                const std::vector<CalibSample>& samples, int weight_bits, int act_bits);

double evaluate_ap(const std::vector<Scenario>& scenarios, const QuantizedModel& qm, const EvalOptions& opts,
                   RemoteCodec* codec = nullptr);

void save_quantized(const std::string& path, const QuantizedModel& qm, const ArtifactStamp& stamp);
QuantizedModel load_quantized(const std::string& path, ArtifactStamp* stamp = nullptr);

}  // namespace qv2x
