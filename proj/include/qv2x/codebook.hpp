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
#include <utility>
#include <vector>

#include "qv2x/byte_io.hpp"
#include "qv2x/numerics.hpp"
#include "qv2x/pipeline.hpp"

namespace qv2x {

/// Shared dictionary of n_L codes of length `dim` plus one global combination
/// weight per rank. Values are kept at float precision so that a codebook
/// read back from disk hashes identically.
struct Codebook {
  std::size_t n_codes = 0;
  std::size_t dim = 0;
  std::vector<double> codes;  // n_codes x dim, row-major
  std::vector<double> alpha;  // one per rank

  std::size_t max_ranks() const { return alpha.size(); }
  std::span<const double> code(std::size_t l) const { return {codes.data() + l * dim, dim}; }
  /// FNV-1a over the float encoding of the shape, alpha and codes.
  std::uint64_t version_hash() const;
  void validate() const;

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

/// Code indices for every cell, rank-minor.
struct MessagePayload {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_ranks = 0;
  std::vector<std::uint32_t> indices;

  std::uint32_t index(std::size_t h, std::size_t w, std::size_t r) const {
    return indices[(h * width + w) * n_ranks + r];
  }
  friend bool operator==(const MessagePayload&, const MessagePayload&) = default;
};

/// Greedy residual assignment: rank r picks argmin_l |res - alpha_r d_l|^2
/// (ties to the smaller index) and subtracts alpha_r d_l from the residual.
MessagePayload assign(const FeatureGrid& f, const Codebook& cb, std::size_t n_ranks);
/// F[h, w] = sum_r alpha_r d_{index_r}.
FeatureGrid reconstruct(const MessagePayload& msg, const Codebook& cb);

/// Mean over cells of the squared reconstruction error.
double reconstruction_error(const FeatureGrid& f, const Codebook& cb, std::size_t n_ranks);

struct Stage1Report {
  std::vector<double> loss;  // at the start of each iteration (assignment-optimal)
  double final_loss = 0.0;   // after the last update and float rounding
  std::size_t reseeded = 0;  // dead codes replaced over the run
};

/// Alternating minimisation of the mean squared reconstruction error over
/// every cell of `features`. Codes start at distinct training vectors.
Codebook train_stage1(const std::vector<FeatureGrid>& features, std::size_t n_codes, std::size_t n_ranks,
                      int iters, std::uint64_t seed, Stage1Report* report = nullptr);

/// Sender-side features (after the optional bottleneck) of every agent at
/// every frame, `per_grid` uniformly drawn cells each, packed as 1 x N x C.
FeatureGrid codebook_training_vectors(const std::vector<Scenario>& scenarios, const ModelParams& p,
                                      std::size_t per_grid, std::uint64_t seed);

/// RemoteCodec that quantizes remote features with a codebook. With a
/// positive lambda it also accumulates lambda * mean_cells |F - F^|^2 per
/// transmitted feature and the matching gradients: the detection gradient
/// passes straight through to the sender, and codes receive gradients through
/// the reconstruction.
///
/// After freeze() the current assignments and sender features are pinned:
/// transmit(F) returns F - F0 + reconstruct(frozen indices), so the loss is a
/// differentiable function whose exact gradient is the straight-through one.
class CodebookCodec : public RemoteCodec {
 public:
  CodebookCodec(const Codebook& cb, std::size_t n_ranks, double lambda_rec = 0.0);

  FeatureGrid transmit(const FeatureGrid& f, int agent_id) override;
  FeatureGrid backward(const FeatureGrid& grad, int agent_id) override;

  double reconstruction_loss() const { return rec_loss_; }
  /// n_codes x dim gradient accumulated by backward().
  const std::vector<double>& code_grad() const { return code_grad_; }
  void freeze();
  /// Starts a new sample: drops the transmitted features and the loss.
  void reset();
  void zero_grad();

 private:
  struct Sent {
    FeatureGrid f, fhat;
    MessagePayload msg;
  };
  const Codebook& cb_;
  std::size_t n_ranks_;
  double lambda_;
  double rec_loss_ = 0.0;
  std::vector<double> code_grad_;
  std::map<int, Sent> sent_;
  std::map<int, Sent> frozen_;
};

/// Detection loss plus the codec's reconstruction term for one sample
/// (resets the codec first).
/// Parameter gradients accumulate into `grads` (if non-null); code gradients
/// accumulate in the codec.
double joint_loss(const Scenario& s, std::size_t frame, const SampleSpec& spec, const ModelParams& p,
                  const RngStream& run, CodebookCodec& codec, ModelParams* grads = nullptr);

struct JointConfig {
  double lambda_rec = 0.1;
  int epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  int batch = 4;
  std::size_t n_ranks = 1;
  std::uint64_t seed = 0;
  double grad_clip = 5.0;
};

struct JointReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> train_loss;  // mean per epoch
};

/// Mean joint loss over every frame with the first agent as ego and all
/// agents present.
double joint_objective(const std::vector<Scenario>& scenarios, const ModelParams& p, const Codebook& cb,
                       const JointConfig& cfg);

/// Stage-2 fine-tuning of model and codes (alpha is held fixed). Returns the
/// final pair rounded to float precision.
std::pair<ModelParams, Codebook> train_joint(const ModelParams& model, const Codebook& cb,
                                             const std::vector<Scenario>& scenarios, const JointConfig& cfg,
                                             JointReport* report = nullptr);

void write_codebook(ByteWriter& w, const Codebook& cb);
Codebook read_codebook(ByteReader& r);
void save_codebook(const std::string& path, const Codebook& cb, const ArtifactStamp& stamp);
Codebook load_codebook(const std::string& path, ArtifactStamp* stamp = nullptr);

}  // namespace qv2x
