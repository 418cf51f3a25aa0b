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
#include <functional>
#include <span>
#include <vector>

namespace qv2x {

struct ModelParams;

enum class Granularity : std::uint8_t { kPerTensor = 0, kPerChannel = 1 };

/// Affine quantization parameters. Per-channel groups index the innermost
/// (channel-last) dimension: element i belongs to group i % groups().
/// bits == 32 denotes the pass-through configuration (no quantization).
struct QuantParams {
  std::vector<double> scale;
  std::vector<std::int32_t> zero_point;
  int bits = 8;
  std::int32_t q_min = 0;
  std::int32_t q_max = 255;
  Granularity granularity = Granularity::kPerTensor;

  bool identity() const { return bits >= 32; }
  std::size_t groups() const { return scale.size(); }
  std::size_t group_of(std::size_t i) const {
    return granularity == Granularity::kPerTensor ? 0 : i % scale.size();
  }
  void validate() const;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// Observed min/max per granularity group.
struct ValueRange {
  std::vector<double> min;
  std::vector<double> max;
};

ValueRange observe_range(std::span<const double> x, Granularity g, std::size_t channels = 1);
void merge_range(ValueRange& into, const ValueRange& other);

/// s = (max - min) / (2^b - 1) with the range widened to contain 0;
/// z = clamp(round(-min / s), 0, 2^b - 1). A degenerate group (max == min)
/// gets s = 1 and z = clamp(round(-min)). `scale_factor` multiplies every
/// group's scale before the zero-point is derived.
QuantParams qparams_from_range(const ValueRange& r, int bits, Granularity g,
                               double scale_factor = 1.0);
QuantParams identity_qparams();

QuantParams init_maxmin(std::span<const double> x, int bits, Granularity g,
                        std::size_t channels = 1);

/// Round half to even.
double round_half_even(double v);

std::vector<std::int32_t> quantize(std::span<const double> x, const QuantParams& qp);
std::vector<double> dequantize(std::span<const std::int32_t> xi, const QuantParams& qp);
std::vector<double> fake_quant(std::span<const double> x, const QuantParams& qp);
void fake_quant_inplace(std::span<double> x, const QuantParams& qp);

/// T linearly spaced factors over [alpha, beta]; T == 1 yields {alpha}.
std::vector<double> scale_grid(double alpha, double beta, int steps);

struct ScaleSearchResult {
  std::size_t best_index = 0;
  double best_factor = 1.0;
  double best_objective = 0.0;
  std::vector<double> objective;  // one entry per candidate
};

/// Evaluates objective(factor) for every candidate (in parallel) and returns
/// the minimiser. Candidates are taken in the given order and ties keep the
/// earlier one, so an ascending grid breaks ties toward the smaller scale.
ScaleSearchResult search_scale_factor(std::span<const double> factors,
                                      const std::function<double(double)>& objective);

/// Grid search of ||x - fake_quant(x; s_t)||_F^2 over s_t in [alpha s0, beta s0]
/// with zero-points re-derived from the range of x for every candidate.
QuantParams scale_search(std::span<const double> x, const QuantParams& qp0, double alpha,
                         double beta, int steps, std::size_t channels = 1);

// ---------------------------------------------------------------------------
// Learnable rounding.

/// Per-weight rounding variables; h(v) = clamp(1.2 sigmoid(v) - 0.1, 0, 1)
/// selects between rounding down (0) and up (1).
struct RoundingVars {
  std::vector<double> v;

  static double rectified(double v);
  static double rectified_grad(double v);
  double h(std::size_t i) const { return rectified(v[i]); }
  std::vector<std::uint8_t> hard_mask() const;
};

struct AdaRoundConfig {
  int iters = 1000;
  double lr = 1e-2;
  double beta_hi = 20.0;
  double beta_lo = 2.0;
  double lambda_reg = 0.01;
  double warmup = 0.2;  // leading fraction of iterations without the regulariser
};

struct AdaRoundReport {
  RoundingVars vars;
  int non_converged = 0;  // h in (0.01, 0.99) before the final hard decision
  double initial_loss = 0.0;  // evaluation loss with round-to-nearest
  double final_loss = 0.0;    // evaluation loss with the returned rounding
  bool kept_nearest = false;
};

/// Reconstruction loss on dequantized weights for iteration `iter`; writes
/// d loss / d weights into grad (same length as weights) unless grad is
/// empty. iter < 0 requests the evaluation loss (e.g. over the whole
/// calibration set instead of a minibatch).
using ReconstructionFn =
    std::function<double(int iter, std::span<const double> weights, std::span<double> grad)>;

/// Rounding variables initialised to the fractional part of W / s.
RoundingVars init_rounding(std::span<const double> w, const QuantParams& qp);
/// s * (clamp(floor(W/s) + h + z, q_min, q_max) - z) with continuous h(v).
std::vector<double> soft_rounded_weights(std::span<const double> w, const QuantParams& qp,
                                         const RoundingVars& vars);
/// Same with a hard 0/1 mask; an empty mask means round-to-nearest.
std::vector<double> rounded_weights(std::span<const double> w, const QuantParams& qp,
                                    std::span<const std::uint8_t> mask);

double rounding_regularizer(const RoundingVars& vars, double beta, std::span<double> grad_v = {});

/// recon(soft weights) + lambda * sum(1 - |2h - 1|^beta); gradient w.r.t. v
/// is written into grad_v when non-empty.
double adaround_objective(std::span<const double> w, const QuantParams& qp, const RoundingVars& vars,
                          const ReconstructionFn& recon, int iter, double beta, double lambda_reg,
                          std::span<double> grad_v = {});

/// Adam on v with beta annealed linearly from beta_hi to beta_lo after the
/// warm-up, then a hard 0/1 decision. If the hard rounding evaluates worse
/// than round-to-nearest, the nearest rounding is returned instead.
AdaRoundReport adaround_optimize(std::span<const double> w, const QuantParams& qp,
                                 const ReconstructionFn& recon, const AdaRoundConfig& cfg);

/// A block as a function of its weights: forward(w, in) and the weight
/// gradient of <grad_out, forward(w, in)>.
struct BlockFunction {
  std::function<std::vector<double>(std::span<const double> w, std::span<const double> in)> forward;
  std::function<std::vector<double>(std::span<const double> w, std::span<const double> in,
                                    std::span<const double> grad_out)>
      backward_weights;
};

/// Learnable rounding against recorded block inputs and full-precision
/// outputs: minimises mean_k ||block(W~, I_k) - A_k||^2 plus the rounding
/// regulariser.
AdaRoundReport adaround_optimize(std::span<const double> w, const QuantParams& qp,
                                 const std::vector<std::vector<double>>& block_inputs,
                                 const std::vector<std::vector<double>>& fp_outputs,
                                 const BlockFunction& block, const AdaRoundConfig& cfg);

// ---------------------------------------------------------------------------

/// ceil(count * bits / 8) plus 8 bytes (f32 scale + i32 zero-point) per group.
std::uint64_t tensor_size_bytes(std::uint64_t count, std::uint64_t groups, int bits);
/// Storage of every weight tensor at `bits` with per-output-channel
/// quantization parameters. Biases are not counted.
std::uint64_t model_size_bytes(const ModelParams& params, int bits);

}  // namespace qv2x
