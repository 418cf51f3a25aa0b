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
#include <limits>
#include <sstream>

#include "qv2x/calibration.hpp"
#include "qv2x/comms.hpp"

namespace qv2x {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

MessagePayload random_payload(std::size_t h, std::size_t w, std::size_t ranks, std::size_t n_codes, RngStream& rng) {
  MessagePayload m{h, w, ranks, {}};
  for (std::size_t i = 0; i < h * w * ranks; ++i) m.indices.push_back(static_cast<std::uint32_t>(rng.next_u64() % n_codes));
  return m;
}

WireHeader header_for(const MessagePayload& m, std::size_t n_codes, std::uint64_t hash = 0x1234) {
  WireHeader h;
  h.sender_id = 7;
  h.frame_timestamp_ms = 1234567;
  h.pose[0] = 1.5f;
  h.pose[1] = -2.25f;
  h.pose[2] = 0.125f;
  h.codebook_hash = hash;
  h.height = static_cast<std::uint16_t>(m.height);
  h.width = static_cast<std::uint16_t>(m.width);
  h.n_codes = static_cast<std::uint16_t>(n_codes);
  h.n_ranks = static_cast<std::uint8_t>(m.n_ranks);
  return h;
}

WireError decode_error(const std::vector<std::uint8_t>& bytes, std::uint64_t hash) {
  try {
    decode_message(bytes, hash);
  } catch (const WireFormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return WireError::kBadHeader;
}

// ---------------------------------------------------------------------------
// sizes

TEST(Bandwidth, IndexBits) {
  EXPECT_EQ(index_bits(2), 1u);
  EXPECT_EQ(index_bits(3), 2u);
  EXPECT_EQ(index_bits(4), 2u);
  EXPECT_EQ(index_bits(128), 7u);
  EXPECT_EQ(index_bits(129), 8u);
  EXPECT_EQ(index_bits(256), 8u);
  EXPECT_THROW(index_bits(1), std::invalid_argument);
}

TEST(Bandwidth, RawFeatureExamples) {
  EXPECT_EQ(raw_feature_bytes(100, 352, 64, 32), 9011200u);
  EXPECT_EQ(raw_feature_bytes(100, 352, 4, 32), 563200u);  // x16 channel compression
  EXPECT_EQ(raw_feature_bytes(1, 1, 1, 8), 1u);
  EXPECT_EQ(raw_feature_bytes(1, 1, 1, 1), 1u);
  EXPECT_EQ(raw_feature_bytes(100, 352, 64, 16) * 2, raw_feature_bytes(100, 352, 64, 32));
  EXPECT_THROW(raw_feature_bytes(0, 1, 1, 8), std::invalid_argument);
}

TEST(Bandwidth, CodebookExamples) {
  EXPECT_EQ(codebook_payload_bytes(100, 352, 128, 1), 30800u);
  EXPECT_EQ(codebook_message_bytes(100, 352, 128, 1), 30800u + kWireHeaderBytes);
  EXPECT_EQ(codebook_payload_bytes(100, 352, 2, 1), 100u * 352u / 8u);
  EXPECT_EQ(codebook_payload_bytes(100, 352, 128, 2), 2u * 30800u);
  const double ratio = static_cast<double>(raw_feature_bytes(100, 352, 64, 32)) /
                       static_cast<double>(codebook_payload_bytes(100, 352, 128, 1));
  EXPECT_DOUBLE_EQ(ratio, 2048.0 / 7.0);
  EXPECT_EQ(kWireHeaderBytes, 39u);
}

// ---------------------------------------------------------------------------
// packing

TEST(Wire, KnownBitLayout) {
  const MessagePayload m{1, 3, 1, {1, 2, 3}};
  // 2 bits each, LSB first: 1 -> 10, 2 -> 01, 3 -> 11 => bits 100111 => 0b00111001.
  EXPECT_EQ(pack_indices(m, 4), std::vector<std::uint8_t>{57});
}

TEST(Wire, AllZeroPayloadIsZeroBytes) {
  const MessagePayload m{5, 7, 1, std::vector<std::uint32_t>(35, 0)};
  const auto bytes = pack_indices(m, 128);
  EXPECT_EQ(bytes.size(), (35u * 7u + 7u) / 8u);
  for (auto b : bytes) EXPECT_EQ(b, 0);
}

TEST(Wire, EightOneBitIndicesFillOneByte) {
  const MessagePayload m{2, 4, 1, {1, 0, 1, 1, 0, 0, 0, 1}};
  EXPECT_EQ(pack_indices(m, 2), std::vector<std::uint8_t>{0b10001101});
}

TEST(Wire, RoundTripAcrossCodebookSizes) {
  RngStream rng(11);
  for (std::size_t n_codes : {2u, 3u, 5u, 128u, 129u, 256u, 1000u}) {
    for (std::size_t ranks : {1u, 2u, 3u}) {
      const auto m = random_payload(3, 5, ranks, n_codes, rng);
      const auto h = header_for(m, n_codes);
      const auto bytes = encode_message(h, m);
      ASSERT_EQ(bytes.size(), codebook_message_bytes(3, 5, n_codes, ranks));
      const auto d = decode_message(bytes, h.codebook_hash);
      EXPECT_EQ(d.header, h);
      EXPECT_EQ(d.payload.indices, m.indices);
      EXPECT_EQ(d.payload.height, 3u);
      EXPECT_EQ(d.payload.width, 5u);
      EXPECT_EQ(d.payload.n_ranks, ranks);
    }
  }
}

TEST(Wire, RandomRoundTrips) {
  RngStream rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n_codes = 2 + rng.next_u64() % 300;
    const std::size_t ranks = 1 + rng.next_u64() % 3;
    const std::size_t h = 1 + rng.next_u64() % 40, w = 1 + rng.next_u64() % 40;
    const auto m = random_payload(h, w, ranks, n_codes, rng);
    const auto hd = header_for(m, n_codes, rng.next_u64());
    const auto d = decode_message(encode_message(hd, m), hd.codebook_hash);
    ASSERT_EQ(d.payload.indices, m.indices) << "trial " << trial;
    ASSERT_EQ(d.header, hd);
  }
}

TEST(Wire, EveryTruncationIsReported) {
  RngStream rng(13);
  const auto m = random_payload(4, 6, 2, 37, rng);
  const auto h = header_for(m, 37);
  const auto bytes = encode_message(h, m);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_EQ(decode_error(cut, h.codebook_hash), WireError::kTruncated) << "length " << n;
  }
}

TEST(Wire, MalformedMessagesAreRejected) {
  RngStream rng(14);
  auto m = random_payload(3, 3, 1, 5, rng);  // 9 * 3 bits = 27 bits, 5 padding bits
  auto h = header_for(m, 5);
  const auto good = encode_message(h, m);

  auto extra = good;
  extra.push_back(0);
  EXPECT_EQ(decode_error(extra, h.codebook_hash), WireError::kTrailingBytes);

  EXPECT_EQ(decode_error(good, h.codebook_hash + 1), WireError::kHashMismatch);

  auto pad = good;
  pad.back() |= 0x80;
  EXPECT_EQ(decode_error(pad, h.codebook_hash), WireError::kBadPadding);

  auto range = good;
  range[kWireHeaderBytes] |= 0x07;  // first index = 7 >= 5
  EXPECT_EQ(decode_error(range, h.codebook_hash), WireError::kIndexOutOfRange);

  auto bad_codes = good;
  bad_codes[36] = 1;  // n_L low byte
  bad_codes[37] = 0;
  EXPECT_EQ(decode_error(bad_codes, h.codebook_hash), WireError::kBadHeader);

  auto bad_ranks = good;
  bad_ranks[38] = 0;
  EXPECT_EQ(decode_error(bad_ranks, h.codebook_hash), WireError::kBadHeader);

  m.indices[0] = 5;
  EXPECT_THROW(encode_message(h, m), WireFormatError);
  h.height = 4;
  m.indices[0] = 0;
  EXPECT_THROW(encode_message(h, m), std::invalid_argument);
}

TEST(Wire, CorruptedBytesNeverCrash) {
  RngStream rng(15);
  const auto m = random_payload(6, 6, 1, 100, rng);
  const auto h = header_for(m, 100);
  const auto good = encode_message(h, m);
  int accepted = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    auto b = good;
    const int flips = 1 + static_cast<int>(rng.next_u64() % 4);
    for (int i = 0; i < flips; ++i) b[rng.next_u64() % b.size()] ^= static_cast<std::uint8_t>(1 + rng.next_u64() % 255);
    if (rng.next_u64() % 4 == 0) b.resize(rng.next_u64() % (b.size() + 8), 0);
    try {
      const auto d = decode_message(b, h.codebook_hash);
      for (auto ix : d.payload.indices) ASSERT_LT(ix, d.header.n_codes);
      ++accepted;
    } catch (const WireFormatError&) {
    }
  }
  EXPECT_GT(accepted, 0);  // flips in the pose/id fields decode fine
}

// ---------------------------------------------------------------------------
// latency

TEST(Latency, TransmissionExamples) {
  ChannelModel c;
  EXPECT_DOUBLE_EQ(transmission_ms(0, c), 0.0);
  EXPECT_NEAR(transmission_ms(30800, c), 9.126, 5e-4);
  EXPECT_NEAR(transmission_ms(540000, c), 160.0, 1e-9);
  c.jitter_hi_ms = 0.0;
  RngStream rng(1);
  EXPECT_DOUBLE_EQ(sample_comm_latency(0, c, rng), 0.0);
}

TEST(Latency, JitterMeanAndBounds) {
  const ChannelModel c;
  RngStream rng(2);
  const std::size_t bytes = 30800;
  const double base = transmission_ms(bytes, c);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double t = sample_comm_latency(bytes, c, rng);
    ASSERT_GE(t, base);
    ASSERT_LE(t, base + 200.0);
    sum += t;
  }
  // Standard error of the mean is 200 / sqrt(12 n) = 0.18 ms.
  EXPECT_NEAR(sum / n, base + 100.0, 1.0);
}

TEST(Latency, ChannelAndProfileValidation) {
  EXPECT_THROW(ChannelModel({0.0, 0.0, 1.0}).validate(), std::invalid_argument);
  EXPECT_THROW(ChannelModel({1.0, 5.0, 1.0}).validate(), std::invalid_argument);
  EXPECT_THROW(ChannelModel({1.0, -1.0, 1.0}).validate(), std::invalid_argument);
  EXPECT_THROW(ChannelModel({1.0, 0.0, kInf}).validate(), std::invalid_argument);
  EXPECT_NO_THROW(ChannelModel({kInf, 0.0, 0.0}).validate());
  const auto fp = LatencyProfile::fp32();
  const auto q = LatencyProfile::int8();
  EXPECT_NEAR(fp.t_local_ms + fp.t_fus_ms, 59.5, 1e-12);
  EXPECT_NEAR(q.t_local_ms + q.t_fus_ms, 27.1, 1e-12);
  EXPECT_THROW(LatencyProfile::split(10.0, 1.5), std::invalid_argument);
}

TEST(Transport, NamesRoundTrip) {
  for (auto t : {Transport::kRawFp32, Transport::kCompressedFp32, Transport::kCodebook})
    EXPECT_EQ(parse_transport(transport_name(t)), t);
  EXPECT_THROW(parse_transport("int4"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// system simulation

ScenarioOptions small_options() {
  ScenarioOptions o;
  o.n_agents = 3;
  o.n_objects = 5;
  o.n_frames = 6;
  o.roi = Roi{16.0, 16.0, 0.5};
  o.fov_radius = 9.0;
  return o;
}

std::vector<Scenario> small_set(int n, std::uint64_t seed) {
  std::vector<Scenario> v;
  for (int i = 0; i < n; ++i) v.push_back(gen_scenario(seed + i, small_options()));
  return v;
}

const ModelParams& trained_model() {
  static const ModelParams p = [] {
    FitConfig fc;
    fc.epochs = 2;
    fc.seed = 1;
    return fit_fp(small_set(8, 300), init_model({}, 2), fc);
  }();
  return p;
}

const Codebook& stage1_codebook() {
  static const Codebook cb =
      train_stage1({codebook_training_vectors(small_set(4, 300), trained_model(), 64, 2)}, 32, 1, 10, 3);
  return cb;
}

SystemConfig instant(Transport t) {
  SystemConfig c;
  c.transport = t;
  c.channel = {kInf, 0.0, 0.0};
  c.latency = {0.0, 0.0};
  c.seed = 5;
  return c;
}

TEST(System, ZeroLatencyMatchesSynchronousForward) {
  const auto scen = small_set(2, 400);
  const auto& p = trained_model();
  const auto cfg = instant(Transport::kRawFp32);
  for (std::size_t k = 0; k < scen.size(); ++k) {
    const auto r = simulate_system(scen[k], k, p, fp_executor(), cfg);
    ASSERT_EQ(r.detections.size(), scen[k].frames.size());
    for (std::size_t t = 0; t < r.detections.size(); ++t) {
      EXPECT_EQ(r.detections[t], forward(scen[k], t, SampleSpec{}, p, eval_stream(cfg.seed, k))) << k << "," << t;
      EXPECT_EQ(r.used[t].source_frame.size(), 2u);
    }
  }
  EXPECT_EQ(evaluate_system(scen, p, fp_executor(), cfg).ap, evaluate_ap(scen, p, EvalOptions{0, {}, cfg.seed}));
}

TEST(System, CodebookTransportMatchesInProcessCodec) {
  const auto scen = small_set(1, 410);
  const auto& p = trained_model();
  const auto& cb = stage1_codebook();
  const auto cfg = instant(Transport::kCodebook);
  const auto r = simulate_system(scen[0], 0, p, fp_executor(), cfg, &cb);
  CodebookCodec codec(cb, 1, 0.0);
  for (std::size_t t = 0; t < r.detections.size(); ++t)
    EXPECT_EQ(r.detections[t], forward(scen[0], t, SampleSpec{}, p, eval_stream(cfg.seed, 0), fp_executor(), &codec));
  EXPECT_EQ(r.links.front().bytes, codebook_message_bytes(32, 32, 32, 1));
}

TEST(System, UnboundedDelayLeavesTheEgoAlone) {
  const auto scen = small_set(1, 420);
  const auto& p = trained_model();
  auto cfg = instant(Transport::kRawFp32);
  cfg.extra_latency_ms = kInf;
  const auto r = simulate_system(scen[0], 0, p, fp_executor(), cfg);
  SampleSpec ego_only;
  ego_only.present = {0};
  for (std::size_t t = 0; t < r.detections.size(); ++t) {
    EXPECT_TRUE(r.used[t].source_frame.empty());
    EXPECT_EQ(r.detections[t], forward(scen[0], t, ego_only, p, eval_stream(cfg.seed, 0)));
  }
}

TEST(System, FixedDelayUsesTheExpectedStaleFrame) {
  const auto scen = small_set(1, 430);
  const auto& p = trained_model();
  auto cfg = instant(Transport::kRawFp32);
  cfg.extra_latency_ms = 150.0;  // frames are 100 ms apart
  const auto r = simulate_system(scen[0], 0, p, fp_executor(), cfg);
  for (std::size_t t = 0; t < r.used.size(); ++t) {
    if (t < 2) {
      EXPECT_TRUE(r.used[t].source_frame.empty());
      continue;
    }
    ASSERT_EQ(r.used[t].source_frame.size(), 2u);
    for (const auto& [id, f] : r.used[t].source_frame) EXPECT_EQ(f, t - 2) << "agent " << id;
    SampleSpec spec;
    spec.source_frame = {{1, t - 2}, {2, t - 2}};
    EXPECT_EQ(r.detections[t], forward(scen[0], t, spec, p, eval_stream(cfg.seed, 0)));
  }
}

TEST(System, LinkLatencyTermsSumExactly) {
  const auto scen = small_set(2, 440);
  SystemConfig cfg;
  cfg.seed = 9;
  const auto ev = evaluate_system(scen, trained_model(), fp_executor(), cfg);
  ASSERT_EQ(ev.links.size(), 2u * 2u * 6u);
  const double base = transmission_ms(message_bytes(scen[0], trained_model(), cfg, nullptr), cfg.channel);
  double sum = 0.0;
  for (const auto& l : ev.links) {
    EXPECT_EQ(l.t_sys_ms, l.t_local_ms + l.t_comm_ms + l.t_fus_ms);
    EXPECT_GE(l.t_comm_ms, base);
    EXPECT_LE(l.t_comm_ms, base + 200.0);
    sum += l.t_sys_ms;
  }
  EXPECT_DOUBLE_EQ(ev.mean_t_sys_ms, sum / static_cast<double>(ev.links.size()));
  // Same seed, same draws.
  const auto again = evaluate_system(scen, trained_model(), fp_executor(), cfg);
  EXPECT_EQ(again.ap, ev.ap);
  EXPECT_EQ(again.mean_t_sys_ms, ev.mean_t_sys_ms);
}

TEST(System, QuantizedCodebookLatencyBeatsFloat) {
  const auto scen = small_set(6, 450);
  const auto& p = trained_model();
  const auto& cb = stage1_codebook();
  SystemConfig fp;
  fp.seed = 21;
  SystemConfig q = fp;
  q.seed = 22;
  q.transport = Transport::kCodebook;
  q.latency = LatencyProfile::int8();
  const auto qm = make_quantized(p, 8);
  QuantizedExecutor qex(qm);
  const auto a = evaluate_system(scen, p, fp_executor(), fp);
  const auto b = evaluate_system(scen, qm.fp, qex, q, &cb);
  EXPECT_LT(b.mean_t_sys_ms, a.mean_t_sys_ms);
  const double expected = (59.5 - 27.1) + transmission_ms(raw_feature_bytes(32, 32, 16, 32), fp.channel) -
                          transmission_ms(codebook_message_bytes(32, 32, 32, 1), fp.channel);
  // Jitter draws are independent: SE of the difference of two 72-link means is about 9.6 ms.
  EXPECT_NEAR(a.mean_t_sys_ms - b.mean_t_sys_ms, expected, 4.0 * 9.7);
}

TEST(System, CompressedTransportCountsBottleneckChannels) {
  const auto scen = small_set(1, 460);
  ModelConfig mc;
  mc.compressed_channels = 1;
  const auto pc = init_model(mc, 3);
  SystemConfig cfg;
  cfg.transport = Transport::kCompressedFp32;
  EXPECT_EQ(message_bytes(scen[0], pc, cfg, nullptr), raw_feature_bytes(32, 32, 1, 32));
  cfg.transport = Transport::kRawFp32;
  EXPECT_THROW(message_bytes(scen[0], pc, cfg, nullptr), std::invalid_argument);
  cfg.transport = Transport::kCompressedFp32;
  EXPECT_THROW(message_bytes(scen[0], trained_model(), cfg, nullptr), std::invalid_argument);
  cfg.transport = Transport::kCodebook;
  EXPECT_THROW(message_bytes(scen[0], trained_model(), cfg, nullptr), std::invalid_argument);
}

TEST(System, CodebookHashMismatchIsRejected) {
  const auto scen = small_set(1, 470);
  const auto& cb = stage1_codebook();
  Codebook other = cb;
  other.codes[0] += 1.0;
  const auto cfg = instant(Transport::kCodebook);
  try {
    simulate_system(scen[0], 0, trained_model(), fp_executor(), cfg, &cb, &other);
    FAIL() << "expected a hash mismatch";
  } catch (const WireFormatError& e) {
    EXPECT_EQ(e.code(), WireError::kHashMismatch);
  }
}

TEST(System, LatencyCsvColumns) {
  const auto scen = small_set(1, 480);
  SystemConfig cfg;
  const auto r = simulate_system(scen[0], 0, trained_model(), fp_executor(), cfg);
  std::istringstream in(latency_csv(r.links));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "frame,link,t_local,t_comm,t_fus,t_sys,scenario,bytes");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7);
  }
  EXPECT_EQ(rows, r.links.size());
}

}  // namespace
}  // namespace qv2x
