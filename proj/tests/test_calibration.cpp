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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "qv2x/calibration.hpp"

namespace qv2x {
namespace {

ScenarioOptions small_options(int agents = 3) {
  ScenarioOptions o;
  o.n_agents = agents;
  o.n_objects = 5;
  o.n_frames = 4;
  o.roi = Roi{16.0, 16.0, 0.5};
  o.fov_radius = 9.0;
  return o;
}

std::vector<Scenario> small_set(int n, std::uint64_t seed, int agents = 3) {
  std::vector<Scenario> v;
  for (int i = 0; i < n; ++i) v.push_back(gen_scenario(seed + i, small_options(agents)));
  return v;
}

CalibConfig fast_config() {
  CalibConfig c;
  c.fraction = 0.5;
  c.steps = 40;
  c.grid_steps = 8;
  c.crop = 8;
  c.crops_per_sample = 2;
  c.seed = 5;
  return c;
}

// A briefly trained model so that activations are not degenerate.
const ModelParams& trained_model() {
  static const ModelParams p = [] {
    FitConfig fc;
    fc.epochs = 2;
    fc.seed = 1;
    return fit_fp(small_set(8, 100), init_model({}, 2), fc);
  }();
  return p;
}

TEST(CalibSet, FullFractionSingleAgentTakesEveryFrame) {
  auto scen = small_set(3, 10, 1);
  CalibConfig c;
  c.fraction = 1.0;
  const auto set = build_calib_set(scen, c);
  ASSERT_EQ(set.size(), 12u);
  std::map<std::pair<std::size_t, std::size_t>, int> seen;
  for (const auto& s : set) {
    EXPECT_EQ(s.present, std::vector<int>{0});
    EXPECT_EQ(s.ego_id, 0);
    ++seen[{s.scenario, s.frame}];
  }
  EXPECT_EQ(seen.size(), 12u);
}

TEST(CalibSet, HalfPercentOfTwoThousandFramesIsTen) {
  std::vector<Scenario> scen;
  for (int i = 0; i < 200; ++i) scen.push_back(gen_scenario(i, 2, 0, 10, 100.0));
  CalibConfig c;
  c.fraction = 0.005;
  EXPECT_EQ(build_calib_set(scen, c).size(), 10u);
  c.fraction = 0.0051;
  EXPECT_EQ(build_calib_set(scen, c).size(), 11u);
}

TEST(CalibSet, EgoAndSubsetAreUniform) {
  std::vector<Scenario> scen;
  for (int i = 0; i < 100; ++i) scen.push_back(gen_scenario(i, 3, 0, 100, 100.0));
  CalibConfig c;
  c.fraction = 1.0;
  c.seed = 1;
  const auto set = build_calib_set(scen, c);
  ASSERT_EQ(set.size(), 10000u);
  std::map<std::pair<int, std::vector<int>>, int> counts;
  int stale = 0;
  for (const auto& s : set) {
    ASSERT_TRUE(std::find(s.present.begin(), s.present.end(), s.ego_id) != s.present.end());
    ++counts[{s.ego_id, s.present}];
    stale += s.latency == LatencyTag::kStaleOneFrame;
  }
  // 3 egos x 4 subsets of the other two agents.
  ASSERT_EQ(counts.size(), 12u);
  const double p = 1.0 / 12.0, n = 10000.0, sd = std::sqrt(n * p * (1 - p));
  double chi2 = 0.0;
  for (const auto& [k, v] : counts) {
    EXPECT_NEAR(v, n * p, 3 * sd);
    chi2 += (v - n * p) * (v - n * p) / (n * p);
  }
  EXPECT_LT(chi2, 31.26);  // 11 degrees of freedom, p = 0.001
  EXPECT_NEAR(stale, 5000, 3 * 50);
}

TEST(CalibSet, DeterministicAndValidated) {
  const auto scen = small_set(4, 20);
  CalibConfig c;
  c.fraction = 0.5;
  EXPECT_EQ(build_calib_set(scen, c), build_calib_set(scen, c));
  c.seed = 1;
  const auto other = build_calib_set(scen, c);
  c.seed = 0;
  EXPECT_NE(build_calib_set(scen, c), other);
  EXPECT_THROW(build_calib_set({}, c), std::invalid_argument);
  c.fraction = 0.0;
  EXPECT_THROW(build_calib_set(scen, c), std::invalid_argument);
}

TEST(CalibSample, StaleTagReadsRemotesOneFrameBack) {
  CalibSample s;
  s.frame = 3;
  s.ego_id = 1;
  s.present = {0, 1, 2};
  s.latency = LatencyTag::kStaleOneFrame;
  const auto spec = s.spec();
  EXPECT_EQ(spec.frame_of(1, 3), 3u);
  EXPECT_EQ(spec.frame_of(0, 3), 2u);
  EXPECT_EQ(spec.frame_of(2, 3), 2u);
  s.frame = 0;
  EXPECT_EQ(s.spec().frame_of(0, 0), 0u);
  s.latency = LatencyTag::kSync;
  s.frame = 3;
  EXPECT_EQ(s.spec().frame_of(0, 3), 3u);
}

TEST(CollectBlockIo, FirstBlockSeesUnquantizedInputs) {
  const auto scen = small_set(3, 30);
  const auto samples = build_calib_set(scen, fast_config());
  const auto qm = make_quantized(trained_model(), 8);
  const auto a = collect_block_io(qm, scen, samples, kEncDenseConv1, Upstream::kQuantized);
  const auto b = collect_block_io(qm, scen, samples, kEncDenseConv1, Upstream::kFullPrecision);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.fp_outputs, b.fp_outputs);
  const auto c = collect_block_io(qm, scen, samples, kEncDenseConv1, Upstream::kFullPrecision);
  EXPECT_EQ(b.inputs, c.inputs);
  EXPECT_EQ(b.fp_head, c.fp_head);
}

TEST(CollectBlockIo, UncalibratedUpstreamIsRejected) {
  const auto scen = small_set(2, 31);
  const auto samples = build_calib_set(scen, fast_config());
  const auto qm = make_quantized(trained_model(), 8);
  EXPECT_THROW(collect_block_io(qm, scen, samples, kFusionConv, Upstream::kQuantized), std::logic_error);
  EXPECT_NO_THROW(collect_block_io(qm, scen, samples, kFusionConv, Upstream::kFullPrecision));
}

TEST(CollectBlockIo, QuantizedPrefixErrorWithinPropagatedBound) {
  const auto scen = small_set(3, 32);
  const auto samples = build_calib_set(scen, fast_config());
  const auto& fp = trained_model();
  auto qm = make_quantized(fp, 8);

  // Calibrate only the first block by hand: max-min input range, nearest rounding.
  const auto obs = collect_block_io(qm, scen, samples, kEncDenseConv1, Upstream::kFullPrecision);
  ValueRange r;
  double max_x = 0.0;
  for (const auto& per : obs.inputs) {
    for (const auto& x : per) {
      merge_range(r, observe_range(x.values(), Granularity::kPerTensor));
      for (double v : x.values()) max_x = std::max(max_x, std::abs(v));
    }
  }
  auto& b0 = qm.blocks[kEncDenseConv1];
  b0.act = qparams_from_range(r, 8, Granularity::kPerTensor);
  b0.calibrated = true;

  const auto& w = fp.layers[kEncDenseConv1].weight;
  const auto wq = qm.block_weights(kEncDenseConv1);
  double max_sw = 0.0, max_wq = 0.0;
  for (double s : b0.weight.scale) max_sw = std::max(max_sw, s);
  for (double v : wq) max_wq = std::max(max_wq, std::abs(v));
  ASSERT_EQ(w.size(), wq.size());
  // |relu(a) - relu(b)| <= |a - b| <= sum over the 9 taps of
  // |w - w~| |x| + |w~| |x - x~|.
  const double bound = 9.0 * (0.5 * max_sw * max_x + max_wq * 0.5 * b0.act.scale[0]);

  const auto fpio = collect_block_io(qm, scen, samples, kEncDenseConv2, Upstream::kFullPrecision);
  const auto qio = collect_block_io(qm, scen, samples, kEncDenseConv2, Upstream::kQuantized);
  double worst = 0.0;
  for (std::size_t k = 0; k < fpio.inputs.size(); ++k) {
    ASSERT_EQ(fpio.inputs[k].size(), qio.inputs[k].size());
    for (std::size_t i = 0; i < fpio.inputs[k].size(); ++i) {
      const auto& a = fpio.inputs[k][i];
      const auto& b = qio.inputs[k][i];
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
    }
  }
  EXPECT_GT(worst, 0.0);
  EXPECT_LE(worst, bound);
}

TEST(AlignmentLosses, Hetero) {
  RngStream rng(3);
  FeatureGrid a(4, 4, 2), b(4, 4, 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + 0.3 * rng.normal();
  }
  EXPECT_EQ(hetero_loss(a, a), 0.0);
  FeatureGrid shifted = a;
  for (double& v : shifted.values()) v += 2.5;
  EXPECT_NEAR(hetero_loss(a, shifted), 0.0, 1e-12);
  EXPECT_EQ(hetero_loss(a, b), kl_divergence(a, b));
  EXPECT_GT(hetero_loss(a, b), 0.0);
  EXPECT_THROW(hetero_loss(a, FeatureGrid(4, 4, 1)), std::invalid_argument);
}

TEST(AlignmentLosses, Spatial) {
  DetectionGrid a{FeatureGrid(3, 3, 1), FeatureGrid(3, 3, 1), FeatureGrid(3, 3, 1)};
  EXPECT_EQ(spatial_loss(a, a), 0.0);
  DetectionGrid b = a;
  b.score.at(1, 2) = 1.0;
  EXPECT_EQ(spatial_loss(a, b), 1.0);

  RngStream rng(4);
  DetectionGrid c = a, d = a;
  double ref = 0.0;
  for (FeatureGrid DetectionGrid::*m : {&DetectionGrid::score, &DetectionGrid::offset_x, &DetectionGrid::offset_y}) {
    for (std::size_t i = 0; i < 9; ++i) {
      (c.*m)[i] = rng.normal();
      (d.*m)[i] = rng.normal();
      ref += ((c.*m)[i] - (d.*m)[i]) * ((c.*m)[i] - (d.*m)[i]);
    }
  }
  EXPECT_NEAR(spatial_loss(c, d), ref, 1e-12);
  DetectionGrid e{FeatureGrid(2, 3, 1), FeatureGrid(2, 3, 1), FeatureGrid(2, 3, 1)};
  EXPECT_THROW(spatial_loss(a, e), std::invalid_argument);
}

FeatureGrid window(const FeatureGrid& g, long r0, long c0, std::size_t h, std::size_t w) {
  FeatureGrid out(h, w, g.channels());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t k = 0; k < g.channels(); ++k) {
        const long sr = r0 + static_cast<long>(r), sc = c0 + static_cast<long>(c);
        if (sr >= 0 && sc >= 0 && sr < static_cast<long>(g.height()) && sc < static_cast<long>(g.width()))
          out.at(r, c, k) = g.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc), k);
      }
  return out;
}

void check_window_gradient(std::size_t layer, double lh, double ls) {
  const auto scen = small_set(1, 80);
  const auto& p = trained_model();
  ForwardTrace tr;
  forward_traced(scen[0], 1, SampleSpec{0, {}, {0.1, 0.0}, {}}, p, RngStream(9), tr);
  const long r0 = 10, c0 = 12;
  const std::size_t n = 6;
  BlockWindow win;
  if (layer == kFusionScore) {
    for (std::size_t a = 0; a < tr.agents.size(); ++a) {
      win.in.push_back(window(tr.agents[a].warped, r0 - 1, c0 - 1, n + 2, n + 2));
      win.target.push_back(window(tr.scores[a], r0, c0, n, n));
    }
  } else {
    win.in.push_back(window(tr.mixed, r0 - 1, c0 - 1, n + 2, n + 2));
    win.target.push_back(window(tr.fused, r0, c0, n, n));
  }
  win.head_fp = window(tr.head_out, r0, c0, n, n);

  RngStream rng(10);
  std::vector<double> w = p.layers[layer].weight;
  for (double& v : w) v += 0.05 * rng.normal();
  std::vector<double> g(w.size());
  const auto act = identity_qparams();
  const double base = block_window_loss(p, layer, win, w, act, lh, ls, g);
  EXPECT_GT(base, 0.0);
  for (int t = 0; t < 10; ++t) {
    const std::size_t i = rng.below(w.size());
    const double h = 1e-6;
    auto a = w, b = w;
    a[i] += h;
    b[i] -= h;
    const double fd = (block_window_loss(p, layer, win, a, act, lh, ls) - block_window_loss(p, layer, win, b, act, lh, ls)) /
                      (2 * h);
    EXPECT_LT(std::abs(fd - g[i]) / std::max(1e-7, std::abs(fd) + std::abs(g[i])), 1e-4)
        << p.layers[layer].name << " weight " << i << " fd " << fd << " analytic " << g[i];
  }
}

TEST(BlockWindowLoss, GradientMatchesFiniteDifferences) {
  check_window_gradient(kFusionConv, 0.0, 0.0);
  check_window_gradient(kFusionConv, 1.0, 0.0);
  check_window_gradient(kFusionConv, 1.0, 0.1);
  check_window_gradient(kFusionScore, 1.0, 0.1);
  check_window_gradient(kFusionScore, 0.0, 2.0);
}

TEST(Calibrate, IdentityBitWidthsReproduceFullPrecision) {
  const auto scen = small_set(3, 40);
  auto cfg = fast_config();
  cfg.weight_bits = 32;
  cfg.act_bits = 32;
  const auto samples = build_calib_set(scen, cfg);
  const auto qm = calibrate(trained_model(), scen, samples, cfg);
  EXPECT_TRUE(qm.fully_calibrated());
  QuantizedExecutor ex(qm);
  const RngStream run(9);
  for (std::size_t f = 0; f < scen[0].frames.size(); ++f) {
    EXPECT_EQ(forward(scen[0], f, SampleSpec{}, qm.fp, run, ex), forward(scen[0], f, SampleSpec{}, qm.fp, run));
  }
}

TEST(Calibrate, ZeroAlignmentWeightsEqualPlainReconstruction) {
  const auto scen = small_set(3, 41);
  auto cfg = fast_config();
  cfg.lambda_hetero = 0.0;
  cfg.lambda_spatial = 0.0;
  const auto samples = build_calib_set(scen, cfg);
  const auto a = calibrate(trained_model(), scen, samples, cfg);
  cfg.alignment = false;
  EXPECT_EQ(a, calibrate(trained_model(), scen, samples, cfg));
}

TEST(Calibrate, DeterministicAndIndependentOfThreadCount) {
  const auto scen = small_set(3, 42);
  const auto cfg = fast_config();
  const auto samples = build_calib_set(scen, cfg);
  const int saved = kernels::max_threads();
  kernels::set_threads(1);
  const auto a = calibrate(trained_model(), scen, samples, cfg);
  kernels::set_threads(3);
  const auto b = calibrate(trained_model(), scen, samples, cfg);
  kernels::set_threads(saved);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, calibrate(trained_model(), scen, samples, cfg));
}

TEST(Calibrate, SelectionNeverRegressesFromInitialisation) {
  const auto scen = small_set(3, 43);
  auto cfg = fast_config();
  const auto samples = build_calib_set(scen, cfg);
  CalibReport rep;
  calibrate(trained_model(), scen, samples, cfg, &rep);
  ASSERT_EQ(rep.blocks.size(), 7u);
  for (const auto& b : rep.blocks) {
    // Learned rounding only sees the reconstruction term, so the alignment
    // terms of fusion blocks may move either way.
    if (trained_model().layers[b.layer].spec.tag == BlockTag::kFusion) continue;
    EXPECT_LE(b.objective_final, b.objective_initial) << b.name;
  }
  cfg.adaround = false;
  calibrate(trained_model(), scen, samples, cfg, &rep);
  for (const auto& b : rep.blocks) EXPECT_LE(b.objective_final, b.objective_initial) << b.name;
}

TEST(Calibrate, ActivationRangesComeFromQuantizedPrefix) {
  const auto scen = small_set(3, 44);
  auto cfg = fast_config();
  cfg.search_scales = false;
  cfg.adaround = false;
  cfg.alignment = false;
  const auto samples = build_calib_set(scen, cfg);
  const auto qm = calibrate_maxmin(trained_model(), scen, samples, 4, 8);
  EXPECT_EQ(qm, calibrate(trained_model(), scen, samples, [&] {
              auto c = cfg;
              c.weight_bits = 4;
              return c;
            }()));
  // Rebuild the fusion-conv input range from the quantized prefix.
  auto partial = qm;
  for (std::size_t id : {kFusionConv, kHeadLinear}) partial.blocks[id].calibrated = false;
  const auto io = collect_block_io(partial, scen, samples, kFusionConv, Upstream::kQuantized);
  ValueRange r;
  for (const auto& per : io.inputs)
    for (const auto& x : per) merge_range(r, observe_range(x.values(), Granularity::kPerTensor));
  auto expect = qparams_from_range(r, 8, Granularity::kPerTensor);
  for (double& s : expect.scale) s = static_cast<double>(static_cast<float>(s));
  EXPECT_EQ(qm.blocks[kFusionConv].act, expect);
}

TEST(Calibrate, NonFiniteObjectiveNamesTheBlock) {
  const auto scen = small_set(2, 45);
  auto fp = trained_model();
  for (double& w : fp.layers[kEncDenseConv2].weight) w = 1e300;
  const auto cfg = fast_config();
  const auto samples = build_calib_set(scen, cfg);
  try {
    calibrate(fp, scen, samples, cfg);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("enc_dense.conv2"), std::string::npos) << e.what();
  }
}

TEST(Calibrate, Int8AtLeastMatchesMaxMinOnSmallSet) {
  const auto scen = small_set(6, 46);
  const auto test = small_set(6, 460);
  auto cfg = fast_config();
  cfg.steps = 200;
  cfg.grid_steps = 20;
  const auto samples = build_calib_set(scen, cfg);
  EvalOptions eo;
  eo.seed = 3;
  const double cal = evaluate_ap(test, calibrate(trained_model(), scen, samples, cfg), eo);
  const double naive = evaluate_ap(test, calibrate_maxmin(trained_model(), scen, samples, 8, 8), eo);
  EXPECT_GE(cal, naive);
}

TEST(QuantizedFile, RoundTripAndErrors) {
  const auto scen = small_set(2, 47);
  const auto cfg = fast_config();
  const auto qm = calibrate(trained_model(), scen, build_calib_set(scen, cfg), cfg);
  const auto path = (std::filesystem::temp_directory_path() / "qv2x_quant_test.qv2q").string();
  save_quantized(path, qm, ArtifactStamp{3, 4});
  ArtifactStamp st;
  EXPECT_EQ(load_quantized(path, &st), qm);
  EXPECT_EQ(st, (ArtifactStamp{3, 4}));
  auto bytes = read_file_bytes(path);
  auto bad = bytes;
  bad[5] = 7;
  write_file_bytes(path, bad);
  EXPECT_THROW(load_quantized(path), VersionMismatch);
  bad = bytes;
  bad.push_back(0);
  write_file_bytes(path, bad);
  EXPECT_THROW(load_quantized(path), FormatError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  write_file_bytes(path, bad);
  EXPECT_THROW(load_quantized(path), TruncatedInput);
  std::filesystem::remove(path);
  EXPECT_THROW(load_quantized(path), MissingFile);
}

}  // namespace
}  // namespace qv2x
