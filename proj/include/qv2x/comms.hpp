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
#include <stdexcept>
#include <string>
#include <vector>

#include "qv2x/codebook.hpp"
#include "qv2x/pipeline.hpp"

namespace qv2x {

// ---------------------------------------------------------------------------
// Wire format.

enum class WireError : std::uint8_t {
  kTruncated = 1,
  kBadHeader = 2,
  kHashMismatch = 3,
  kIndexOutOfRange = 4,
  kBadPadding = 5,
  kTrailingBytes = 6,
};

const char* wire_error_name(WireError e);

class WireFormatError : public std::runtime_error {
 public:
  WireFormatError(WireError code, const std::string& what);
  WireError code() const { return code_; }

 private:
  WireError code_;
};

/// Fixed-size little-endian header, fields in declaration order.
struct WireHeader {
  std::uint32_t sender_id = 0;
  std::uint64_t frame_timestamp_ms = 0;
  float pose[3] = {0.0f, 0.0f, 0.0f};  // x, y, yaw
  std::uint64_t codebook_hash = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t n_codes = 0;
  std::uint8_t n_ranks = 0;

  friend bool operator==(const WireHeader&, const WireHeader&) = default;
};

inline constexpr std::size_t kWireHeaderBytes = 4 + 8 + 3 * 4 + 8 + 2 + 2 + 2 + 1;

/// ceil(log2 n_L) for n_L >= 2.
std::size_t index_bits(std::size_t n_codes);

/// h * w * c * bits / 8, rounded up to whole bytes.
std::size_t raw_feature_bytes(std::size_t h, std::size_t w, std::size_t c, std::size_t bits_per_value);
/// Bit-packed index payload only.
std::size_t codebook_payload_bytes(std::size_t h, std::size_t w, std::size_t n_codes, std::size_t n_ranks);
/// Payload plus the fixed header.
std::size_t codebook_message_bytes(std::size_t h, std::size_t w, std::size_t n_codes, std::size_t n_ranks);

/// Indices row-major and rank-minor, index_bits(n_L) bits each, LSB-first
/// within bytes, zero-padded to a byte boundary.
std::vector<std::uint8_t> pack_indices(const MessagePayload& msg, std::size_t n_codes);
/// Inverse of pack_indices for the shape declared in `header`; the byte
/// count must match exactly.
MessagePayload unpack_indices(std::span<const std::uint8_t> bytes, const WireHeader& header);

std::vector<std::uint8_t> encode_message(const WireHeader& header, const MessagePayload& msg);

struct DecodedMessage {
  WireHeader header;
  MessagePayload payload;
};

/// Parses header and payload; the header's codebook hash must equal
/// `expected_hash`. Every failure is a WireFormatError.
DecodedMessage decode_message(std::span<const std::uint8_t> bytes, std::uint64_t expected_hash);

// ---------------------------------------------------------------------------
// Latency model.

struct ChannelModel {
  double rate_mbps = 27.0;
  double jitter_lo_ms = 0.0;
  double jitter_hi_ms = 200.0;

  void validate() const;
};

/// size * 8 / (rate * 1000) milliseconds.
double transmission_ms(std::size_t size_bytes, const ChannelModel& channel);
/// transmission_ms plus a uniform jitter draw.
double sample_comm_latency(std::size_t size_bytes, const ChannelModel& channel, RngStream& rng);

/// Model execution time; the same profile applies to every agent.
struct LatencyProfile {
  double t_local_ms = 0.0;
  double t_fus_ms = 0.0;

  void validate() const;
  /// Default end-to-end model times (FP32 59.5 ms, INT8 27.1 ms) split 60/40
  /// between the local encoder and fusion.
  static LatencyProfile fp32();
  static LatencyProfile int8();
  static LatencyProfile split(double total_ms, double local_fraction = 0.6);
};

// ---------------------------------------------------------------------------
// System-level simulation.

enum class Transport : std::uint8_t { kRawFp32 = 0, kCompressedFp32 = 1, kCodebook = 2 };

const char* transport_name(Transport t);
Transport parse_transport(const std::string& s);

struct SystemConfig {
  Transport transport = Transport::kRawFp32;
  ChannelModel channel;
  LatencyProfile latency = LatencyProfile::fp32();
  PoseNoise pose_noise;
  std::uint64_t seed = 0;
  int ego_id = 0;
  double extra_latency_ms = 0.0;  // constant network delay added to every T_comm
  std::size_t n_ranks = 1;        // codebook transport only
};

/// Latency of the message a remote agent sends at `frame`.
struct LinkLatency {
  std::size_t scenario = 0;
  std::size_t frame = 0;
  int link = 0;  // sender id
  std::size_t bytes = 0;
  double t_local_ms = 0.0;
  double t_comm_ms = 0.0;
  double t_fus_ms = 0.0;
  double t_sys_ms = 0.0;
};

struct FrameUse {
  std::size_t frame = 0;
  std::map<int, std::size_t> source_frame;  // remote agents whose messages had arrived
};

struct SystemResult {
  std::vector<DetectionGrid> detections;  // one per frame
  std::vector<LinkLatency> links;
  std::vector<FrameUse> used;
};

/// Bytes one remote agent sends per frame for the transport.
std::size_t message_bytes(const Scenario& s, const ModelParams& p, const SystemConfig& cfg, const Codebook* cb);

/// Runs every frame of a scenario. Each remote agent contributes its newest
/// message whose send timestamp plus T_sys is not later than the current
/// frame's timestamp, encoded at that earlier frame with its pose estimate
/// from then; agents with no delivered message are left out. Codebook
/// transport goes through encode_message/decode_message and requires the
/// receiver codebook (defaults to the sender's) to have the same hash.
SystemResult simulate_system(const Scenario& s, std::size_t scenario_index, const ModelParams& p, LayerExecutor& ex,
                             const SystemConfig& cfg, const Codebook* sender_cb = nullptr,
                             const Codebook* receiver_cb = nullptr);

struct SystemEval {
  double ap = 0.0;
  double mean_t_sys_ms = 0.0;
  std::vector<LinkLatency> links;
};

SystemEval evaluate_system(const std::vector<Scenario>& scenarios, const ModelParams& p, LayerExecutor& ex,
                           const SystemConfig& cfg, const Codebook* sender_cb = nullptr,
                           const Codebook* receiver_cb = nullptr);

/// CSV with columns frame,link,t_local,t_comm,t_fus,t_sys,scenario,bytes.
std::string latency_csv(const std::vector<LinkLatency>& links);

}  // namespace qv2x
