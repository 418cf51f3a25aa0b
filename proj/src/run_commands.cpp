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
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "qv2x/byte_io.hpp"
#include "qv2x/quantizer.hpp"
#include "qv2x/run.hpp"

namespace qv2x {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path.string(), std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                                 text.size()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_file_bytes(path.string());
  return std::string(b.begin(), b.end());
}

void prepare_out(const RunConfig& cfg, const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  json j = cfg.resolved;
  j["_provenance"] = {{"artifact_version", kArtifactVersion}, {"config_hash", hex64(cfg.hash())}};
  write_text(out / "config.json", j.dump(2) + "\n");
}

void log(const std::string& cmd, const std::string& msg) { std::cerr << "[" << cmd << "] " << msg << "\n"; }

std::vector<Scenario> load_split(const RunConfig& cfg, const fs::path& out, bool train) {
  ArtifactStamp st;
  auto s = read_scenarios((out / (train ? artifact::kTrainScenarios : artifact::kEvalScenarios)).string(), &st);
  expect_stamp(st, cfg.stamp(Stage::kGen), train ? "training scenarios" : "evaluation scenarios");
  return s;
}

ModelParams load_model_checked(const fs::path& path, const ArtifactStamp& want) {
  ArtifactStamp st;
  auto p = load_model(path.string(), &st);
  expect_stamp(st, want, path.filename().string());
  return p;
}

QuantizedModel load_quantized_checked(const fs::path& path, const ArtifactStamp& want) {
  ArtifactStamp st;
  auto q = load_quantized(path.string(), &st);
  expect_stamp(st, want, path.filename().string());
  return q;
}

Codebook load_codebook_checked(const fs::path& path, const ArtifactStamp& want) {
  ArtifactStamp st;
  auto cb = load_codebook(path.string(), &st);
  expect_stamp(st, want, path.filename().string());
  return cb;
}

EvalOptions eval_options(const RunConfig& cfg, double sigma) {
  return EvalOptions{cfg.ego_id, PoseNoise{sigma, 0.0}, derive_seed(cfg.seed, 0xe7a1)};
}

}  // namespace

std::vector<Scenario> make_split(const RunConfig& cfg, bool train) {
  const int n = train ? cfg.train_scenarios : cfg.eval_scenarios;
  const RngStream root = RngStream(cfg.seed).split(train ? 0x5ce1 : 0x5ce2);
  std::vector<Scenario> v;
  v.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v.push_back(gen_scenario(root.split(static_cast<std::uint64_t>(i)).next_u64(), cfg.scene));
  return v;
}

void write_scenarios(const std::string& path, const std::vector<Scenario>& s, const ArtifactStamp& stamp) {
  json j{{"artifact_version", kArtifactVersion},
         {"config_hash", hex64(stamp.config_hash)},
         {"seed", stamp.seed},
         {"scenarios", json::array()}};
  for (const auto& sc : s) j["scenarios"].push_back(scenario_to_json(sc));
  const std::string text = j.dump() + "\n";
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<Scenario> read_scenarios(const std::string& path, ArtifactStamp* stamp) {
  const auto bytes = read_file_bytes(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  try {
    if (j.at("artifact_version").get<int>() != kArtifactVersion) {
      throw VersionMismatch(path + ": artifact version " + j.at("artifact_version").dump());
    }
    if (stamp) {
      stamp->config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
      stamp->seed = j.at("seed").get<std::uint64_t>();
    }
    std::vector<Scenario> out;
    for (const auto& e : j.at("scenarios")) out.push_back(scenario_from_json(e));
    return out;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void expect_stamp(const ArtifactStamp& got, const ArtifactStamp& want, const std::string& what) {
  if (got != want) {
    throw VersionMismatch(what + " was produced by a different configuration (config hash " + hex64(got.config_hash) +
                          ", seed " + std::to_string(got.seed) + "; expected " + hex64(want.config_hash) + ", seed " +
                          std::to_string(want.seed) + "); rerun the upstream stages");
  }
}

std::string csv_provenance(const ArtifactStamp& stamp) {
  return "# qv2x artifact_version=" + std::to_string(kArtifactVersion) + " config_hash=" + hex64(stamp.config_hash) +
         " seed=" + std::to_string(stamp.seed) + "\n";
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return i;
  throw FormatError("csv: no column '" + name + "'");
}

CsvTable read_csv(const std::string& path) {
  std::istringstream in(read_text(path));
  CsvTable t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (t.columns.empty()) {
      t.columns = split(line);
      continue;
    }
    auto row = split(line);
    if (row.size() != t.columns.size()) throw FormatError(path + ": row with " + std::to_string(row.size()) + " cells");
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw FormatError(path + ": no header");
  return t;
}

// ---------------------------------------------------------------------------

void cmd_gen(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto st = cfg.stamp(Stage::kGen);
  write_scenarios((out / artifact::kTrainScenarios).string(), make_split(cfg, true), st);
  write_scenarios((out / artifact::kEvalScenarios).string(), make_split(cfg, false), st);
  log("gen", std::to_string(cfg.train_scenarios) + " training and " + std::to_string(cfg.eval_scenarios) +
                 " evaluation scenarios");
}

void cmd_train(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto train = load_split(cfg, out, true);
  const auto st = cfg.stamp(Stage::kTrain);

  FitReport rep;
  const auto p = fit_fp(train, init_model(cfg.model, derive_seed(cfg.seed, 0x11)), cfg.train, &rep);
  save_model((out / artifact::kModel).string(), p, st);
  log("train", "base model: best epoch " + std::to_string(rep.best_epoch));

  ModelConfig mc = cfg.model;
  mc.compressed_channels = cfg.compressed_channels;
  FitReport rep_c;
  const auto pc = fit_fp(train, init_model(mc, derive_seed(cfg.seed, 0x12)), cfg.train, &rep_c);
  save_model((out / artifact::kModelCompressed).string(), pc, st);
  log("train", "compressed model: best epoch " + std::to_string(rep_c.best_epoch));
}

void cmd_codebook(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto train = load_split(cfg, out, true);
  const auto p = load_model_checked(out / artifact::kModel, cfg.stamp(Stage::kTrain));

  const auto vectors = codebook_training_vectors(train, p, cfg.vectors_per_grid, derive_seed(cfg.seed, 0xcb1));
  Stage1Report r1;
  const auto cb = train_stage1({vectors}, cfg.n_codes, cfg.n_ranks, cfg.stage1_iters, derive_seed(cfg.seed, 0xcb2), &r1);
  log("codebook", "stage 1: " + std::to_string(vectors.cells()) + " vectors, loss " + num(r1.final_loss) + ", " +
                      std::to_string(r1.reseeded) + " reseeded");

  JointReport r2;
  const auto [pj, cbj] = train_joint(p, cb, train, cfg.joint, &r2);
  if (cfg.joint.epochs > 0) log("codebook", "joint: loss " + num(r2.initial_loss) + " -> " + num(r2.final_loss));

  const auto st = cfg.stamp(Stage::kCodebook);
  save_codebook((out / artifact::kCodebook).string(), cbj, st);
  save_model((out / artifact::kModelJoint).string(), pj, st);
}

void cmd_calibrate(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto train = load_split(cfg, out, true);
  const auto p = load_model_checked(out / artifact::kModelJoint, cfg.stamp(Stage::kCodebook));
  load_codebook_checked(out / artifact::kCodebook, cfg.stamp(Stage::kCodebook));

  const auto samples = build_calib_set(train, cfg.calib);
  CalibReport rep;
  const auto qm = calibrate(p, train, samples, cfg.calib, &rep);
  const auto naive = calibrate_maxmin(p, train, samples, cfg.calib.weight_bits, cfg.calib.act_bits);
  const auto st = cfg.stamp(Stage::kCalibrate);
  save_quantized((out / artifact::kQuantized).string(), qm, st);
  save_quantized((out / artifact::kNaive).string(), naive, st);

  std::string csv = csv_provenance(st);
  csv += "layer,name,weight_factor,act_factor,objective_initial,objective_final,adaround_non_converged,kept_nearest\n";
  for (const auto& b : rep.blocks) {
    csv += std::to_string(b.layer) + "," + b.name + "," + num(b.weight_factor) + "," + num(b.act_factor) + "," +
           num(b.objective_initial) + "," + num(b.objective_final) + "," + std::to_string(b.rounding.non_converged) +
           "," + (b.rounding.kept_nearest ? "1" : "0") + "\n";
  }
  write_text(out / artifact::kCalibReport, csv);
  log("calibrate", std::to_string(samples.size()) + " calibration records, W" + std::to_string(cfg.calib.weight_bits) +
                       "/A" + std::to_string(cfg.calib.act_bits));
}

void cmd_eval_ideal(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto eval = load_split(cfg, out, false);
  const auto p = load_model_checked(out / artifact::kModel, cfg.stamp(Stage::kTrain));
  const auto pj = load_model_checked(out / artifact::kModelJoint, cfg.stamp(Stage::kCodebook));
  const auto qm = load_quantized_checked(out / artifact::kQuantized, cfg.stamp(Stage::kCalibrate));
  const auto naive = load_quantized_checked(out / artifact::kNaive, cfg.stamp(Stage::kCalibrate));
  const auto st = cfg.stamp(Stage::kEval);

  const std::string wb = std::to_string(cfg.calib.weight_bits), ab = std::to_string(cfg.calib.act_bits);
  std::string csv = csv_provenance(st) + "model,weight_bits,act_bits,pose_noise_m,ap\n";
  for (double sigma : cfg.pose_noise_grid) {
    const auto opts = eval_options(cfg, sigma);
    csv += "fp,32,32," + num(sigma) + "," + num(evaluate_ap(eval, p, opts)) + "\n";
    csv += "fp_joint,32,32," + num(sigma) + "," + num(evaluate_ap(eval, pj, opts)) + "\n";
    csv += "naive," + wb + "," + ab + "," + num(sigma) + "," + num(evaluate_ap(eval, naive, opts)) + "\n";
    csv += "calibrated," + wb + "," + ab + "," + num(sigma) + "," + num(evaluate_ap(eval, qm, opts)) + "\n";
  }
  write_text(out / artifact::kMetricsIdeal, csv);

  std::string sizes = csv_provenance(st) + "bits,model_size_bytes,parameters\n";
  for (int b : cfg.size_bits)
    sizes += std::to_string(b) + "," + std::to_string(model_size_bytes(p, b)) + "," +
             std::to_string(p.parameter_count()) + "\n";
  write_text(out / artifact::kSizes, sizes);
  log("eval-ideal", std::to_string(cfg.pose_noise_grid.size()) + " pose-noise points");
}

void cmd_eval_system(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto eval = load_split(cfg, out, false);
  const auto p = load_model_checked(out / artifact::kModel, cfg.stamp(Stage::kTrain));
  const auto pc = load_model_checked(out / artifact::kModelCompressed, cfg.stamp(Stage::kTrain));
  const auto cb = load_codebook_checked(out / artifact::kCodebook, cfg.stamp(Stage::kCodebook));
  const auto qm = load_quantized_checked(out / artifact::kQuantized, cfg.stamp(Stage::kCalibrate));
  const auto st = cfg.stamp(Stage::kEval);
  QuantizedExecutor qex(qm);

  struct System {
    std::string name;
    const ModelParams* model;
    LayerExecutor* ex;
    Transport transport;
    double model_ms;
    const Codebook* cb;
    double ideal_ap;
  };
  const auto opts = eval_options(cfg, cfg.system_pose_noise);
  const double ideal_fp = evaluate_ap(eval, p, opts);
  const double ideal_q = evaluate_ap(eval, qm, opts);
  const std::vector<System> systems{
      {"fp_raw", &p, &fp_executor(), Transport::kRawFp32, cfg.fp_model_ms, nullptr, ideal_fp},
      {"fp_compressed", &pc, &fp_executor(), Transport::kCompressedFp32, cfg.fp_model_ms, nullptr, ideal_fp},
      {"quant_codebook", &qm.fp, &qex, Transport::kCodebook, cfg.int8_model_ms, &cb, ideal_q},
  };

  std::vector<double> grid = cfg.latency_grid;
  if (std::find(grid.begin(), grid.end(), 0.0) == grid.end()) grid.insert(grid.begin(), 0.0);

  std::string csv = csv_provenance(st) + "system,added_latency_ms,ap,ideal_ap,ap_gap,mean_t_sys_ms,message_bytes\n";
  for (const auto& sys : systems) {
    SystemConfig sc;
    sc.transport = sys.transport;
    sc.channel = cfg.channel;
    sc.latency = LatencyProfile::split(sys.model_ms, cfg.local_fraction);
    sc.pose_noise = {cfg.system_pose_noise, 0.0};
    sc.seed = opts.seed;
    sc.ego_id = cfg.ego_id;
    sc.n_ranks = cfg.n_ranks;
    for (double extra : grid) {
      sc.extra_latency_ms = extra;
      const auto ev = evaluate_system(eval, *sys.model, *sys.ex, sc, sys.cb);
      csv += sys.name + "," + num(extra) + "," + num(ev.ap) + "," + num(sys.ideal_ap) + "," +
             num(sys.ideal_ap - ev.ap) + "," + num(ev.mean_t_sys_ms) + "," +
             std::to_string(ev.links.empty() ? 0 : ev.links.front().bytes) + "\n";
      if (extra == 0.0) write_text(out / ("latency_" + sys.name + ".csv"), csv_provenance(st) + latency_csv(ev.links));
    }
    log("eval-system", sys.name + " done");
  }
  write_text(out / artifact::kMetricsSystem, csv);
}

// ---------------------------------------------------------------------------

namespace {

double cell_d(const CsvTable& t, const std::vector<std::string>& row, const char* col) {
  try {
    return std::stod(row[t.column(col)]);
  } catch (const std::logic_error&) {
    throw FormatError(std::string("csv: bad number in column ") + col);
  }
}

ArtifactStamp csv_stamp(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  ArtifactStamp st;
  unsigned ver = 0;
  char hash[17] = {};
  unsigned long long seed = 0;
  if (std::sscanf(line.c_str(), "# qv2x artifact_version=%u config_hash=%16s seed=%llu", &ver, hash, &seed) != 3) {
    throw FormatError(path.string() + ": missing provenance line");
  }
  if (ver != static_cast<unsigned>(kArtifactVersion)) throw VersionMismatch(path.string() + ": artifact version");
  st.config_hash = std::stoull(hash, nullptr, 16);
  st.seed = seed;
  return st;
}

}  // namespace

void cmd_report(const RunConfig& cfg, const fs::path& out) {
  prepare_out(cfg, out);
  const auto st = cfg.stamp(Stage::kEval);
  for (const char* f : {artifact::kMetricsIdeal, artifact::kSizes, artifact::kMetricsSystem})
    expect_stamp(csv_stamp(out / f), st, f);
  const auto ideal = read_csv((out / artifact::kMetricsIdeal).string());
  const auto sizes = read_csv((out / artifact::kSizes).string());
  const auto system = read_csv((out / artifact::kMetricsSystem).string());

  std::ostringstream md;
  md << "# qv2x run summary\n\n"
     << "config hash `" << hex64(st.config_hash) << "`, seed " << st.seed << ", artifact version " << kArtifactVersion
     << "\n\n## Model-level cell-AP (synchronous, lossless)\n\n| model | W | A | pose noise (m) | AP |\n|---|---|---|---|---|\n";
  std::map<std::string, PlotSeries> by_model;
  for (const auto& r : ideal.rows) {
    md << "| " << r[ideal.column("model")] << " | " << r[ideal.column("weight_bits")] << " | "
       << r[ideal.column("act_bits")] << " | " << r[ideal.column("pose_noise_m")] << " | " << r[ideal.column("ap")]
       << " |\n";
    auto& s = by_model[r[ideal.column("model")]];
    s.name = r[ideal.column("model")];
    s.x.push_back(cell_d(ideal, r, "pose_noise_m"));
    s.y.push_back(cell_d(ideal, r, "ap"));
  }

  md << "\n## System level\n\n| system | added latency (ms) | AP | ideal AP | gap | mean T_sys (ms) | bytes |\n"
        "|---|---|---|---|---|---|---|\n";
  std::map<std::string, PlotSeries> by_system;
  std::map<std::string, double> t_sys0, ap0, gap0;
  for (const auto& r : system.rows) {
    const std::string name = r[system.column("system")];
    md << "| " << name << " | " << r[system.column("added_latency_ms")] << " | " << r[system.column("ap")] << " | "
       << r[system.column("ideal_ap")] << " | " << r[system.column("ap_gap")] << " | "
       << r[system.column("mean_t_sys_ms")] << " | " << r[system.column("message_bytes")] << " |\n";
    auto& s = by_system[name];
    s.name = name;
    s.x.push_back(cell_d(system, r, "added_latency_ms"));
    s.y.push_back(cell_d(system, r, "ap"));
    if (cell_d(system, r, "added_latency_ms") == 0.0) {
      t_sys0[name] = cell_d(system, r, "mean_t_sys_ms");
      ap0[name] = cell_d(system, r, "ap");
      gap0[name] = cell_d(system, r, "ap_gap");
    }
  }
  if (t_sys0.count("fp_raw") && t_sys0.count("quant_codebook") && t_sys0.count("fp_compressed")) {
    md << "\nAt zero added latency: T_sys(fp_raw) / T_sys(quant_codebook) = "
       << num(t_sys0["fp_raw"] / t_sys0["quant_codebook"]) << "; AP quant_codebook - fp_compressed = "
       << num(ap0["quant_codebook"] - ap0["fp_compressed"]) << "; ideal-vs-system gap quant_codebook "
       << num(gap0["quant_codebook"]) << " vs fp_compressed " << num(gap0["fp_compressed"]) << ".\n";
  }

  md << "\n## Model size (base model)\n\n| bits | bytes |\n|---|---|\n";
  PlotSeries size_series{"base model", {}, {}};
  for (const auto& r : sizes.rows) {
    md << "| " << r[sizes.column("bits")] << " | " << r[sizes.column("model_size_bytes")] << " |\n";
    size_series.x.push_back(cell_d(sizes, r, "bits"));
    size_series.y.push_back(cell_d(sizes, r, "model_size_bytes"));
  }
  write_text(out / artifact::kSummary, md.str());

  auto values = [](const std::map<std::string, PlotSeries>& m) {
    std::vector<PlotSeries> v;
    for (const auto& [k, s] : m) v.push_back(s);
    return v;
  };
  write_text(out / "ap_vs_pose_noise.svg",
             svg_line_plot(values(by_model), {"Cell-AP vs pose noise", "pose noise sigma (m)", "cell-AP", false}));
  write_text(out / "ap_vs_latency.svg",
             svg_line_plot(values(by_system), {"Cell-AP vs added latency", "added latency (ms)", "cell-AP", false}));
  write_text(out / "size_vs_bits.svg",
             svg_line_plot({size_series}, {"Model size vs bit width", "bits", "bytes", true}));
  log("report", "wrote " + std::string(artifact::kSummary) + " and 3 plots");
}

}  // namespace qv2x
