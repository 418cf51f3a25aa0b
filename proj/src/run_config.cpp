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

#include <fstream>
#include <sstream>

#include "qv2x/byte_io.hpp"
#include "qv2x/run.hpp"

namespace qv2x {

using nlohmann::json;

json default_config_json() {
  return json{
      {"seed", 0},
      {"scene",
       {{"n_agents", 3},
        {"n_objects", 12},
        {"n_frames", 10},
        {"frame_dt_ms", 100.0},
        {"roi", {{"width_m", 48.0}, {"height_m", 48.0}, {"meters_per_cell", 0.5}}},
        {"fov_radius_m", 14.0},
        {"dense_noise", 0.05},
        {"dense_dropout", 0.05},
        {"sparse_noise", 0.15},
        {"sparse_dropout", 0.3},
        {"train_scenarios", 20},
        {"eval_scenarios", 5}}},
      {"model", {{"encoder_hidden", 8}, {"feature_channels", 16}, {"compressed_channels", 1}}},
      {"train",
       {{"epochs", 30},
        {"lr", 0.05},
        {"momentum", 0.9},
        {"batch", 4},
        {"val_fraction", 0.1},
        {"remote_keep", 0.8},
        {"grad_clip", 5.0}}},
      {"codebook",
       {{"n_codes", 128},
        {"n_ranks", 1},
        {"stage1_iters", 20},
        {"vectors_per_grid", 256},
        {"joint_epochs", 3},
        {"lambda_rec", 0.1},
        {"lr", 0.01},
        {"momentum", 0.9},
        {"batch", 4},
        {"grad_clip", 5.0}}},
      {"quant", {{"weight_bits", 8}, {"act_bits", 8}}},
      {"calibration",
       {{"fraction", 0.005},
        {"steps", 5000},
        {"alpha", 0.5},
        {"beta", 1.2},
        {"grid_steps", 100},
        {"adaround_lr", 1e-2},
        {"adaround_batch", 4},
        {"lambda_reg", 0.01},
        {"lambda_hetero", 1.0},
        {"lambda_spatial", 0.1},
        {"search_scales", true},
        {"adaround", true},
        {"alignment", true},
        {"crop", 16},
        {"crops_per_sample", 4},
        {"pose_noise_trans_m", 0.1},
        {"pose_noise_rot_rad", 0.0}}},
      {"channel", {{"rate_mbps", 27.0}, {"jitter_lo_ms", 0.0}, {"jitter_hi_ms", 200.0}}},
      {"latency", {{"fp32_model_ms", 59.5}, {"int8_model_ms", 27.1}, {"local_fraction", 0.6}}},
      {"eval",
       {{"ego_id", 0},
        {"pose_noise_grid", {0.0, 0.1, 0.2, 0.5}},
        {"latency_grid", {0.0, 100.0, 300.0, 1000.0}},
        {"system_pose_noise", 0.0},
        {"size_bits", {4, 8, 16, 32}}}},
  };
}

namespace {

bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);  // counts, bits, seeds
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_object()) return v.is_object();
  if (def.is_array()) {
    if (!v.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& e : v)
      if (!same_kind(def.front(), e)) return false;
    return true;
  }
  return false;
}

void merge(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config" + (path.empty() ? "" : " at '" + path + "'") + " must be an object");
  for (const auto& [k, v] : user.items()) {
    const std::string here = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key '" + here + "'");
    json& slot = base[k];
    if (!same_kind(slot, v)) throw ConfigError("config key '" + here + "' has the wrong type or sign");
    if (slot.is_object()) {
      merge(slot, v, here);
    } else {
      slot = v;
    }
  }
}

void apply_override(json& base, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
  const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  // Rebuild as a nested object so the normal merge does the checking.
  json nested = value;
  std::size_t end = key.size();
  while (true) {
    const auto dot = key.rfind('.', end - 1);
    const std::string part = key.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    nested = json{{part, nested}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  merge(base, nested, "");
}

template <class T>
T get(const json& j, const char* section, const char* key) {
  return j.at(section).at(key).get<T>();
}

std::uint64_t hash_json(const json& j, std::uint64_t tag) {
  const std::string s = j.dump();
  std::uint64_t h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  return h ^ (tag * 0x9e3779b97f4a7c15ULL);
}

}  // namespace

std::uint64_t RunConfig::hash() const { return hash_json(resolved, 0); }

std::uint64_t RunConfig::stage_hash(Stage s) const {
  static const char* const kSections[][3] = {
      {"scene", nullptr, nullptr},
      {"model", "train", nullptr},
      {"codebook", nullptr, nullptr},
      {"quant", "calibration", nullptr},
  };
  if (s == Stage::kEval) return hash();
  json subset{{"seed", resolved.at("seed")}};
  for (int i = 0; i <= static_cast<int>(s); ++i)
    for (const char* sec : kSections[i])
      if (sec) subset[sec] = resolved.at(sec);
  return hash_json(subset, static_cast<std::uint64_t>(s) + 1);
}

RunConfig resolve_config(const json& user, const std::vector<std::string>& overrides) {
  json j = default_config_json();
  merge(j, user, "");
  for (const auto& o : overrides) apply_override(j, o);

  RunConfig c;
  c.resolved = j;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();

    const json& sc = j.at("scene");
    c.scene.n_agents = sc.at("n_agents").get<int>();
    c.scene.n_objects = sc.at("n_objects").get<int>();
    c.scene.n_frames = sc.at("n_frames").get<int>();
    c.scene.frame_dt_ms = sc.at("frame_dt_ms").get<double>();
    c.scene.roi.width_m = sc.at("roi").at("width_m").get<double>();
    c.scene.roi.height_m = sc.at("roi").at("height_m").get<double>();
    c.scene.roi.meters_per_cell = sc.at("roi").at("meters_per_cell").get<double>();
    c.scene.fov_radius = sc.at("fov_radius_m").get<double>();
    c.scene.dense_noise = sc.at("dense_noise").get<double>();
    c.scene.dense_dropout = sc.at("dense_dropout").get<double>();
    c.scene.sparse_noise = sc.at("sparse_noise").get<double>();
    c.scene.sparse_dropout = sc.at("sparse_dropout").get<double>();
    c.train_scenarios = sc.at("train_scenarios").get<int>();
    c.eval_scenarios = sc.at("eval_scenarios").get<int>();

    c.model.encoder_hidden = get<std::size_t>(j, "model", "encoder_hidden");
    c.model.feature_channels = get<std::size_t>(j, "model", "feature_channels");
    c.compressed_channels = get<std::size_t>(j, "model", "compressed_channels");

    c.train.epochs = get<int>(j, "train", "epochs");
    c.train.lr = get<double>(j, "train", "lr");
    c.train.momentum = get<double>(j, "train", "momentum");
    c.train.batch = get<int>(j, "train", "batch");
    c.train.val_fraction = get<double>(j, "train", "val_fraction");
    c.train.remote_keep = get<double>(j, "train", "remote_keep");
    c.train.grad_clip = get<double>(j, "train", "grad_clip");
    c.train.seed = derive_seed(c.seed, 0x7a1);

    c.n_codes = get<std::size_t>(j, "codebook", "n_codes");
    c.n_ranks = get<std::size_t>(j, "codebook", "n_ranks");
    c.stage1_iters = get<int>(j, "codebook", "stage1_iters");
    c.vectors_per_grid = get<std::size_t>(j, "codebook", "vectors_per_grid");
    c.joint.epochs = get<int>(j, "codebook", "joint_epochs");
    c.joint.lambda_rec = get<double>(j, "codebook", "lambda_rec");
    c.joint.lr = get<double>(j, "codebook", "lr");
    c.joint.momentum = get<double>(j, "codebook", "momentum");
    c.joint.batch = get<int>(j, "codebook", "batch");
    c.joint.grad_clip = get<double>(j, "codebook", "grad_clip");
    c.joint.n_ranks = c.n_ranks;
    c.joint.seed = derive_seed(c.seed, 0xc0de);

    const json& cal = j.at("calibration");
    c.calib.fraction = cal.at("fraction").get<double>();
    c.calib.steps = cal.at("steps").get<int>();
    c.calib.alpha = cal.at("alpha").get<double>();
    c.calib.beta = cal.at("beta").get<double>();
    c.calib.grid_steps = cal.at("grid_steps").get<int>();
    c.calib.adaround_lr = cal.at("adaround_lr").get<double>();
    c.calib.adaround_batch = cal.at("adaround_batch").get<int>();
    c.calib.lambda_reg = cal.at("lambda_reg").get<double>();
    c.calib.lambda_hetero = cal.at("lambda_hetero").get<double>();
    c.calib.lambda_spatial = cal.at("lambda_spatial").get<double>();
    c.calib.search_scales = cal.at("search_scales").get<bool>();
    c.calib.adaround = cal.at("adaround").get<bool>();
    c.calib.alignment = cal.at("alignment").get<bool>();
    c.calib.crop = cal.at("crop").get<std::size_t>();
    c.calib.crops_per_sample = cal.at("crops_per_sample").get<int>();
    c.calib.pose_noise = {cal.at("pose_noise_trans_m").get<double>(), cal.at("pose_noise_rot_rad").get<double>()};
    c.calib.weight_bits = get<int>(j, "quant", "weight_bits");
    c.calib.act_bits = get<int>(j, "quant", "act_bits");
    c.calib.seed = derive_seed(c.seed, 0xca1);

    c.channel.rate_mbps = get<double>(j, "channel", "rate_mbps");
    c.channel.jitter_lo_ms = get<double>(j, "channel", "jitter_lo_ms");
    c.channel.jitter_hi_ms = get<double>(j, "channel", "jitter_hi_ms");
    c.fp_model_ms = get<double>(j, "latency", "fp32_model_ms");
    c.int8_model_ms = get<double>(j, "latency", "int8_model_ms");
    c.local_fraction = get<double>(j, "latency", "local_fraction");

    c.ego_id = get<int>(j, "eval", "ego_id");
    c.pose_noise_grid = get<std::vector<double>>(j, "eval", "pose_noise_grid");
    c.latency_grid = get<std::vector<double>>(j, "eval", "latency_grid");
    c.system_pose_noise = get<double>(j, "eval", "system_pose_noise");
    c.size_bits = get<std::vector<int>>(j, "eval", "size_bits");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  // Semantic checks beyond the schema.
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  require(c.scene.n_agents >= 1 && c.scene.n_objects >= 0 && c.scene.n_frames >= 1, "scene counts out of range");
  require(c.scene.frame_dt_ms > 0.0, "scene.frame_dt_ms must be positive");
  require(c.scene.roi.width_m > 0.0 && c.scene.roi.height_m > 0.0 && c.scene.roi.meters_per_cell > 0.0,
          "scene.roi must be positive");
  require(c.train_scenarios >= 2 && c.eval_scenarios >= 1, "need at least 2 training and 1 eval scenario");
  require(c.model.encoder_hidden >= 1 && c.model.feature_channels >= 1, "model widths must be positive");
  require(c.compressed_channels >= 1 && c.compressed_channels <= c.model.feature_channels,
          "model.compressed_channels must be in [1, feature_channels]");
  require(c.train.epochs >= 0 && c.train.batch >= 1 && c.train.lr > 0.0, "train settings out of range");
  require(c.n_codes >= 2 && c.n_codes <= 0xffff, "codebook.n_codes must be in [2, 65535]");
  require(c.n_ranks >= 1 && c.n_ranks <= 0xff, "codebook.n_ranks must be in [1, 255]");
  require(c.stage1_iters >= 1 && c.vectors_per_grid >= 1, "codebook stage-1 settings out of range");
  require(c.joint.epochs >= 0 && c.joint.batch >= 1 && c.joint.lr > 0.0, "codebook joint settings out of range");
  require(c.ego_id >= 0 && c.ego_id < c.scene.n_agents, "eval.ego_id is not an agent");
  require(c.local_fraction >= 0.0 && c.local_fraction <= 1.0, "latency.local_fraction must be in [0, 1]");
  require(c.fp_model_ms >= 0.0 && c.int8_model_ms >= 0.0, "latency model times must be non-negative");
  for (double v : c.pose_noise_grid) require(v >= 0.0, "eval.pose_noise_grid entries must be non-negative");
  for (double v : c.latency_grid) require(v >= 0.0, "eval.latency_grid entries must be non-negative");
  for (int b : c.size_bits) require(b == 4 || b == 8 || b == 16 || b == 32, "eval.size_bits entries must be 4, 8, 16 or 32");
  require(c.system_pose_noise >= 0.0, "eval.system_pose_noise must be non-negative");
  try {
    c.calib.validate();
    c.channel.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json user = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open config " + path);
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
  return resolve_config(user, overrides);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return RngStream(seed).split(tag).next_u64(); }

}  // namespace qv2x
