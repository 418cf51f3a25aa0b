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

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qv2x/calibration.hpp"
#include "qv2x/codebook.hpp"
#include "qv2x/comms.hpp"

namespace qv2x {

inline constexpr int kArtifactVersion = 1;

// Invalid or unknown configuration keys and values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Artifacts each stage depends on; the stamp hash of an artifact covers the
// config sections up to and including its stage.
enum class Stage { kGen = 0, kTrain = 1, kCodebook = 2, kCalibrate = 3, kEval = 4 };

struct RunConfig {
  nlohmann::json resolved;  // full config after defaults and overrides

  std::uint64_t seed = 0;
  ScenarioOptions scene;
  int train_scenarios = 20;
  int eval_scenarios = 5;

  ModelConfig model;
  std::size_t compressed_channels = 1;  // bottleneck of the FP x16 baseline
  FitConfig train;

  std::size_t n_codes = 128;
  std::size_t n_ranks = 1;
  int stage1_iters = 20;
  std::size_t vectors_per_grid = 256;
  JointConfig joint;

  CalibConfig calib;

  ChannelModel channel;
  double fp_model_ms = 59.5;
  double int8_model_ms = 27.1;
  double local_fraction = 0.6;

  int ego_id = 0;
  std::vector<double> pose_noise_grid;
  std::vector<double> latency_grid;
  double system_pose_noise = 0.0;
  std::vector<int> size_bits;

  std::uint64_t hash() const;
  std::uint64_t stage_hash(Stage s) const;
  ArtifactStamp stamp(Stage s) const { return {stage_hash(s), seed}; }
};

/// Every key with its default value; also the schema for user configs.
nlohmann::json default_config_json();

/// Merges `user` over the defaults (unknown keys and type changes are
/// rejected), then applies "dotted.path=value" overrides whose value is
/// parsed as JSON, falling back to a plain string.
RunConfig resolve_config(const nlohmann::json& user, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

// Scenario splits regenerated deterministically from the config.
std::vector<Scenario> make_split(const RunConfig& cfg, bool train);

// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char* kTrainScenarios = "scenarios_train.json";
inline constexpr const char* kEvalScenarios = "scenarios_eval.json";
inline constexpr const char* kModel = "model.bin";
inline constexpr const char* kModelCompressed = "model_compressed.bin";
inline constexpr const char* kModelJoint = "model_joint.bin";
inline constexpr const char* kCodebook = "codebook.bin";
inline constexpr const char* kQuantized = "quantized.bin";
inline constexpr const char* kNaive = "naive.bin";
inline constexpr const char* kCalibReport = "calibration.csv";
inline constexpr const char* kMetricsIdeal = "metrics_ideal.csv";
inline constexpr const char* kSizes = "sizes.csv";
inline constexpr const char* kMetricsSystem = "metrics_system.csv";
inline constexpr const char* kSummary = "summary.md";
}  // namespace artifact

void write_scenarios(const std::string& path, const std::vector<Scenario>& s, const ArtifactStamp& stamp);
std::vector<Scenario> read_scenarios(const std::string& path, ArtifactStamp* stamp = nullptr);

/// Throws VersionMismatch when `got` was produced by a different config.
void expect_stamp(const ArtifactStamp& got, const ArtifactStamp& want, const std::string& what);

/// "# qv2x artifact_version=.. config_hash=.. seed=.." line heading every CSV.
std::string csv_provenance(const ArtifactStamp& stamp);

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
};
/// Reads a CSV written by this tool; '#' lines are skipped.
CsvTable read_csv(const std::string& path);

// Commands. Each one reads its inputs from and writes its outputs to `out`,
// together with the resolved config.
void cmd_gen(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_train(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_codebook(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_calibrate(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_eval_ideal(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_eval_system(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_report(const RunConfig& cfg, const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// SVG line plots.

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log2_x = false;
};

std::string svg_line_plot(const std::vector<PlotSeries>& series, const PlotOptions& opts);

}  // namespace qv2x
