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

#include <exception>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qv2x/byte_io.hpp"
#include "qv2x/comms.hpp"
#include "qv2x/run.hpp"

namespace {

// Exit codes, one per error class.
enum Exit : int {
  kOk = 0,
  kConfig = 2,
  kMissing = 3,
  kVersion = 4,
  kRuntime = 5,
  kIo = 6,
};

int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const qv2x::ConfigError& e) {
    std::cerr << "qv2x: config error: " << e.what() << "\n";
    return kConfig;
  } catch (const qv2x::MissingFile& e) {
    std::cerr << "qv2x: missing input: " << e.what() << "\n";
    return kMissing;
  } catch (const qv2x::VersionMismatch& e) {
    std::cerr << "qv2x: version mismatch: " << e.what() << "\n";
    return kVersion;
  } catch (const qv2x::FormatError& e) {
    std::cerr << "qv2x: malformed input: " << e.what() << "\n";
    return kIo;
  } catch (const qv2x::TruncatedInput& e) {
    std::cerr << "qv2x: malformed input: " << e.what() << "\n";
    return kIo;
  } catch (const qv2x::IoError& e) {
    std::cerr << "qv2x: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "qv2x: error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qv2x: toy cooperative-perception quantization pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "qv2x_out";
  std::vector<std::string> overrides;
  long long seed = -1;

  using Cmd = void (*)(const qv2x::RunConfig&, const std::filesystem::path&);
  const std::vector<std::tuple<const char*, const char*, Cmd>> commands{
      {"gen", "generate training and evaluation scenarios", qv2x::cmd_gen},
      {"train", "full-precision pretraining (base and compressed models)", qv2x::cmd_train},
      {"codebook", "codebook learning: stage 1 then joint fine-tuning", qv2x::cmd_codebook},
      {"calibrate", "post-training quantization of the fine-tuned model", qv2x::cmd_calibrate},
      {"eval-ideal", "model-level cell-AP over the pose-noise grid", qv2x::cmd_eval_ideal},
      {"eval-system", "system-level cell-AP and latency over the latency grid", qv2x::cmd_eval_system},
      {"report", "summary table and SVG plots from the evaluation CSVs", qv2x::cmd_report},
  };
  Cmd selected = nullptr;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run config (defaults when omitted)");
    sub->add_option("--seed", seed, "override the config seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", out_dir, "artifact directory");
    sub->add_option("--set", overrides, "override a config key, e.g. --set train.epochs=5");
    sub->callback([&selected, f = fn] { selected = f; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  return run_guarded([&] {
    if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
    const auto cfg = qv2x::load_config(config_path, overrides);
    selected(cfg, out_dir);
  });
}
