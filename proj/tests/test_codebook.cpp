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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "qv2x/codebook.hpp"

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

const ModelParams& trained_model() {
  static const ModelParams p = [] {
    FitConfig fc;
    fc.epochs = 2;
    fc.seed = 1;
    return fit_fp(small_set(8, 100), init_model({}, 2), fc);
  }();
  return p;
}

Codebook random_codebook(std::size_t n, std::size_t dim, std::size_t ranks, std::uint64_t seed) {
  RngStream rng(seed);
  Codebook cb{n, dim, {}, {}};
  for (std::size_t i = 0; i < n * dim; ++i) cb.codes.push_back(static_cast<float>(rng.normal()));
  for (std::size_t r = 0; r < ranks; ++r) cb.alpha.push_back(static_cast<float>(0.2 + rng.uniform01()));
  return cb;
}

FeatureGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  RngStream rng(seed);
  FeatureGrid g(h, w, c);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(rng.normal());
  return g;
}

// ---------------------------------------------------------------------------
// assign / reconstruct

TEST(Assign, CodeEqualToFeatureIsSelected) {
  auto cb = random_codebook(8, 4, 1, 1);
  cb.alpha = {1.0};
  FeatureGrid f(1, 1, 4);
  for (std::size_t c = 0; c < 4; ++c) f[c] = cb.codes[5 * 4 + c];
  const auto m = assign(f, cb, 1);
  EXPECT_EQ(m.indices, std::vector<std::uint32_t>{5});
  EXPECT_EQ(reconstruct(m, cb), f);
}

TEST(Assign, TwoCodeExample) {
  const Codebook cb{2, 2, {0.0, 0.0, 1.0, 1.0}, {1.0}};
  FeatureGrid f(1, 1, 2);
  f[0] = f[1] = 0.9;
  EXPECT_EQ(assign(f, cb, 1).indices[0], 1u);
  f[0] = f[1] = 0.4;
  EXPECT_EQ(assign(f, cb, 1).indices[0], 0u);
}

TEST(Assign, TiesGoToTheSmallestIndex) {
  const Codebook cb{3, 1, {2.0, -1.0, 1.0}, {1.0}};
  FeatureGrid f(1, 1, 1);
  f[0] = 0.0;  // distance 1 to codes 1 and 2
  EXPECT_EQ(assign(f, cb, 1).indices[0], 1u);
}

TEST(Assign, MatchesBruteForceNearestNeighbour) {
  const auto cb = random_codebook(37, 5, 1, 2);
  const auto f = random_grid(100, 100, 5, 3);
  const auto m = assign(f, cb, 1);
  for (std::size_t i = 0; i < f.cells(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < cb.n_codes; ++l) {
      double d = 0.0;
      for (std::size_t c = 0; c < 5; ++c) d += std::pow(f[i * 5 + c] - cb.alpha[0] * cb.codes[l * 5 + c], 2);
      if (d < best_d) {
        best_d = d;
        best = l;
      }
    }
    ASSERT_EQ(m.indices[i], best) << "cell " << i;
  }
}

TEST(Assign, GreedyResidualSecondRankFitsTheResidual) {
  const Codebook cb{3, 1, {1.0, 0.25, -0.5}, {1.0, 1.0}};
  FeatureGrid f(1, 1, 1);
  f[0] = 1.3;
  const auto m = assign(f, cb, 2);
  EXPECT_EQ(m.indices, (std::vector<std::uint32_t>{0, 1}));
  EXPECT_DOUBLE_EQ(reconstruct(m, cb)[0], 1.25);
}

TEST(Assign, RejectsBadInput) {
  const auto cb = random_codebook(4, 3, 2, 4);
  EXPECT_THROW(assign(FeatureGrid(2, 2, 4), cb, 1), std::invalid_argument);
  EXPECT_THROW(assign(FeatureGrid(2, 2, 3), cb, 0), std::invalid_argument);
  EXPECT_THROW(assign(FeatureGrid(2, 2, 3), cb, 3), std::invalid_argument);
}

TEST(Reconstruct, PureLookupAndZeroAlpha) {
  auto cb = random_codebook(6, 3, 1, 5);
  cb.alpha = {1.0};
  const MessagePayload m{1, 2, 1, {4, 2}};
  const auto g = reconstruct(m, cb);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(g[c], cb.codes[4 * 3 + c]);
    EXPECT_EQ(g[3 + c], cb.codes[2 * 3 + c]);
  }
  cb.alpha = {0.0};
  EXPECT_EQ(reconstruct(m, cb), FeatureGrid(1, 2, 3));
}

TEST(Reconstruct, MatchesScalarReference) {
  const auto cb = random_codebook(11, 4, 3, 6);
  RngStream rng(7);
  MessagePayload m{5, 7, 3, {}};
  for (std::size_t i = 0; i < 5 * 7 * 3; ++i) m.indices.push_back(static_cast<std::uint32_t>(rng.below(11)));
  const auto g = reconstruct(m, cb);
  for (std::size_t h = 0; h < 5; ++h)
    for (std::size_t w = 0; w < 7; ++w)
      for (std::size_t c = 0; c < 4; ++c) {
        double ref = 0.0;
        for (std::size_t r = 0; r < 3; ++r) ref += cb.alpha[r] * cb.codes[m.index(h, w, r) * 4 + c];
        EXPECT_NEAR(g.at(h, w, c), ref, 1e-12);
      }
}

TEST(Reconstruct, RejectsOutOfRangeIndex) {
  const auto cb = random_codebook(4, 2, 1, 8);
  EXPECT_THROW(reconstruct(MessagePayload{1, 1, 1, {4}}, cb), std::invalid_argument);
  EXPECT_THROW(reconstruct(MessagePayload{1, 2, 1, {0}}, cb), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// stage 1

TEST(Stage1, ExactFitWithNDistinctVectors) {
  const auto base = random_grid(1, 12, 3, 9);
  FeatureGrid data(4, 12, 3);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = base[i % base.size()];
  Stage1Report rep;
  const auto cb = train_stage1({data}, 12, 1, 20, 1, &rep);
  EXPECT_LT(rep.final_loss, 1e-10);
  std::set<std::vector<double>> want, got;
  for (std::size_t i = 0; i < 12; ++i) {
    want.insert(std::vector<double>(base.data() + 3 * i, base.data() + 3 * i + 3));
    got.insert(std::vector<double>(cb.codes.begin() + 3 * i, cb.codes.begin() + 3 * i + 3));
  }
  EXPECT_EQ(got, want);
}

TEST(Stage1, TwoClustersConvergeToTheirMeans) {
  RngStream rng(10);
  FeatureGrid data(1, 200, 2);
  double mean[2][2] = {};
  for (std::size_t i = 0; i < 200; ++i) {
    const int k = i < 120 ? 0 : 1;
    const double cx = k ? 5.0 : -3.0, cy = k ? 4.0 : 1.0;
    data[2 * i] = cx + 0.3 * rng.normal();
    data[2 * i + 1] = cy + 0.3 * rng.normal();
    mean[k][0] += data[2 * i] / (k ? 80.0 : 120.0);
    mean[k][1] += data[2 * i + 1] / (k ? 80.0 : 120.0);
  }
  const auto cb = train_stage1({data}, 2, 1, 20, 3);
  // Code 0 may hold either cluster.
  const std::size_t a = cb.codes[0] < 1.0 ? 0 : 1;
  EXPECT_NEAR(cb.codes[2 * a], mean[0][0], 1e-5);
  EXPECT_NEAR(cb.codes[2 * a + 1], mean[0][1], 1e-5);
  EXPECT_NEAR(cb.codes[2 * (1 - a)], mean[1][0], 1e-5);
  EXPECT_NEAR(cb.codes[2 * (1 - a) + 1], mean[1][1], 1e-5);
}

TEST(Stage1, LossNonIncreasingOverTwentySweeps) {
  const auto data = random_grid(30, 40, 6, 11);
  Stage1Report rep;
  train_stage1({data}, 32, 1, 20, 4, &rep);
  ASSERT_EQ(rep.loss.size(), 20u);
  for (std::size_t i = 1; i < rep.loss.size(); ++i) EXPECT_LE(rep.loss[i], rep.loss[i - 1]) << "sweep " << i;
  EXPECT_LT(rep.loss.back(), rep.loss.front());
}

TEST(Stage1, CodesDistinctDespiteDuplicateData) {
  // Heavy duplication of a few values leaves codes unassigned; they must be
  // reseeded rather than collapse onto each other.
  FeatureGrid data(1, 300, 2);
  RngStream rng(12);
  for (std::size_t i = 0; i < 300; ++i) {
    const bool dup = i % 3 != 0;
    data[2 * i] = dup ? 1.0 : rng.normal();
    data[2 * i + 1] = dup ? 2.0 : rng.normal();
  }
  Stage1Report rep;
  const auto cb = train_stage1({data}, 16, 1, 20, 5, &rep);
  std::set<std::vector<double>> codes;
  for (std::size_t l = 0; l < 16; ++l) codes.insert(std::vector<double>(cb.code(l).begin(), cb.code(l).end()));
  EXPECT_EQ(codes.size(), 16u);
}

TEST(Stage1, DeterministicForSeed) {
  const auto data = random_grid(10, 10, 4, 13);
  EXPECT_EQ(train_stage1({data}, 8, 2, 5, 6), train_stage1({data}, 8, 2, 5, 6));
  EXPECT_NE(train_stage1({data}, 8, 2, 5, 6), train_stage1({data}, 8, 2, 5, 7));
}

TEST(Stage1, MultiRankAlphaNonNegativeAndErrorFallsWithRanks) {
  const auto data = random_grid(20, 30, 4, 14);
  Stage1Report rep;
  const auto cb = train_stage1({data}, 16, 3, 10, 8, &rep);
  for (double a : cb.alpha) EXPECT_GE(a, 0.0);
  EXPECT_LT(rep.final_loss, rep.loss.front());
  const double e1 = reconstruction_error(data, cb, 1);
  const double e2 = reconstruction_error(data, cb, 2);
  const double e3 = reconstruction_error(data, cb, 3);
  EXPECT_LE(e2, e1);
  EXPECT_LE(e3, e2);
}

TEST(Stage1, RejectsInsufficientVectors) {
  EXPECT_THROW(train_stage1({random_grid(1, 3, 2, 15)}, 4, 1, 5, 0), std::invalid_argument);
  EXPECT_THROW(train_stage1({FeatureGrid(2, 4, 2, 1.0)}, 2, 1, 5, 0), std::invalid_argument);
  EXPECT_THROW(train_stage1({random_grid(2, 4, 2, 15), random_grid(2, 4, 3, 15)}, 2, 1, 5, 0),
               std::invalid_argument);
}

TEST(Stage1, TrainingVectorsComeFromSenderFeatures) {
  const auto scen = small_set(2, 50);
  const auto v = codebook_training_vectors(scen, trained_model(), 10, 1);
  EXPECT_EQ(v.channels(), trained_model().config.feature_channels);
  EXPECT_EQ(v.width(), 2u * 4u * 3u * 10u);
  EXPECT_EQ(v, codebook_training_vectors(scen, trained_model(), 10, 1));
}

// ---------------------------------------------------------------------------
// hashing and files

TEST(CodebookHash, ChangesWithAnyCodeOrAlpha) {
  const auto cb = random_codebook(5, 3, 2, 16);
  const auto h = cb.version_hash();
  for (std::size_t i = 0; i < cb.codes.size(); ++i) {
    auto c = cb;
    c.codes[i] = std::nextafter(static_cast<float>(c.codes[i]), 1e9f);
    EXPECT_NE(c.version_hash(), h) << i;
  }
  for (std::size_t r = 0; r < 2; ++r) {
    auto c = cb;
    c.alpha[r] += 0.5;
    EXPECT_NE(c.version_hash(), h);
  }
}

TEST(CodebookFile, RoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "qv2x_cb_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "cb.bin").string();
  const auto cb = random_codebook(7, 4, 2, 17);
  save_codebook(path, cb, {11, 12});
  ArtifactStamp st;
  EXPECT_EQ(load_codebook(path, &st), cb);
  EXPECT_EQ(st, (ArtifactStamp{11, 12}));

  auto bytes = read_file_bytes(path);
  auto corrupt = bytes;
  corrupt[40] ^= 0x01;  // inside the code array
  write_file_bytes(path, corrupt);
  EXPECT_THROW(load_codebook(path), FormatError);
  corrupt = bytes;
  corrupt[6] = 9;
  write_file_bytes(path, corrupt);
  EXPECT_THROW(load_codebook(path), VersionMismatch);
  corrupt = bytes;
  corrupt[0] = 'X';
  write_file_bytes(path, corrupt);
  EXPECT_THROW(load_codebook(path), FormatError);
  for (std::size_t n : {3ul, 30ul, bytes.size() - 1}) {
    write_file_bytes(path, std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(n)));
    EXPECT_ANY_THROW(load_codebook(path)) << n;
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_codebook(path), MissingFile);
}

// ---------------------------------------------------------------------------
// stage 2

Codebook trained_codebook(const ModelParams& p, const std::vector<Scenario>& scen) {
  return train_stage1({codebook_training_vectors(scen, p, 64, 2)}, 16, 1, 10, 3);
}

TEST(Joint, LosslessCodebookGivesThePlainDetectionLoss) {
  const auto scen = small_set(1, 60);
  const auto& p = trained_model();
  const auto& s = scen[0];
  const RngStream run(4);
  const SampleSpec spec{0, {}, {}, {}};
  // Every remote feature vector becomes its own code.
  std::set<std::vector<double>> vecs;
  for (int id : {1, 2}) {
    const auto f = encode(agent_observation(s, id, 2, run), p, s.agent(id).modality);
    for (std::size_t i = 0; i < f.cells(); ++i)
      vecs.insert(std::vector<double>(f.data() + i * f.channels(), f.data() + (i + 1) * f.channels()));
  }
  Codebook cb{vecs.size(), p.config.feature_channels, {}, {1.0}};
  for (const auto& v : vecs) cb.codes.insert(cb.codes.end(), v.begin(), v.end());
  CodebookCodec codec(cb, 1, 0.0);
  const double plain = detection_loss(forward(s, 2, spec, p, run), make_targets(s, 2, 0));
  EXPECT_EQ(joint_loss(s, 2, spec, p, run, codec), plain);
}

TEST(Joint, StraightThroughGradientMatchesFrozenAssignmentFiniteDifferences) {
  const auto scen = small_set(2, 61);
  const auto& p = trained_model();
  Codebook cb = trained_codebook(p, scen);
  const auto& s = scen[0];
  const RngStream run(5);
  const SampleSpec spec{0, {}, {0.1, 0.01}, {}};
  CodebookCodec codec(cb, 1, 0.5);
  joint_loss(s, 1, spec, p, run, codec);
  codec.freeze();
  ModelParams grads = p.zeros_like();
  codec.zero_grad();
  joint_loss(s, 1, spec, p, run, codec, &grads);
  const auto code_grad = codec.code_grad();
  EXPECT_GT(codec.reconstruction_loss(), 0.0);

  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-7, std::abs(a) + std::abs(b)); };
  const double h = 1e-5;
  RngStream pick(6);
  for (std::size_t li : {std::size_t{kEncDenseConv1}, std::size_t{kEncDenseConv2}, std::size_t{kEncSparseConv1},
                         std::size_t{kEncSparseConv2}}) {
    for (int t = 0; t < 5; ++t) {
      const std::size_t i = pick.below(p.layers[li].weight.size());
      ModelParams a = p, b = p;
      a.layers[li].weight[i] += h;
      b.layers[li].weight[i] -= h;
      const double fd = (joint_loss(s, 1, spec, a, run, codec) - joint_loss(s, 1, spec, b, run, codec)) / (2 * h);
      EXPECT_LT(rel(fd, grads.layers[li].weight[i]), 1e-4)
          << p.layers[li].name << " " << i << " fd " << fd << " st " << grads.layers[li].weight[i];
    }
  }
  // Codes, restricted to ones that were used.
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < code_grad.size(); ++i)
    if (code_grad[i] != 0.0) used.push_back(i);
  ASSERT_FALSE(used.empty());
  for (int t = 0; t < 10; ++t) {
    const std::size_t i = used[pick.below(used.size())];
    const double orig = cb.codes[i];
    cb.codes[i] = orig + h;
    const double lp = joint_loss(s, 1, spec, p, run, codec);
    cb.codes[i] = orig - h;
    const double lm = joint_loss(s, 1, spec, p, run, codec);
    cb.codes[i] = orig;
    EXPECT_LT(rel((lp - lm) / (2 * h), code_grad[i]), 1e-4) << "code entry " << i;
  }
}

TEST(Joint, ZeroEpochsReturnsInputsUnchanged) {
  const auto scen = small_set(2, 62);
  const auto& p = trained_model();
  const auto cb = trained_codebook(p, scen);
  JointConfig cfg;
  cfg.epochs = 0;
  const auto [p2, cb2] = train_joint(p, cb, scen, cfg);
  EXPECT_EQ(p2, p);
  EXPECT_EQ(cb2, cb);
}

TEST(Joint, TrainingLowersTheJointLoss) {
  const auto scen = small_set(10, 63);
  const auto& p = trained_model();
  const auto cb = trained_codebook(p, scen);
  JointConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  JointReport rep;
  const auto [p2, cb2] = train_joint(p, cb, scen, cfg, &rep);
  EXPECT_LT(rep.final_loss, rep.initial_loss);
  EXPECT_DOUBLE_EQ(rep.final_loss, joint_objective(scen, p2, cb2, cfg));
  EXPECT_EQ(cb2.alpha, cb.alpha);
  EXPECT_NE(cb2.codes, cb.codes);
}

TEST(Joint, RejectsMismatchedCodebook) {
  const auto scen = small_set(1, 64);
  EXPECT_THROW(train_joint(trained_model(), random_codebook(4, 3, 1, 1), scen, JointConfig{}),
               std::invalid_argument);
}

}  // namespace
}  // namespace qv2x
