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

#include <bit>
#include <cmath>
#include <stdexcept>

#include "qv2x/byte_io.hpp"
#include "qv2x/comms.hpp"

namespace qv2x {

const char* wire_error_name(WireError e) {
  switch (e) {
    case WireError::kTruncated: return "truncated";
    case WireError::kBadHeader: return "bad_header";
    case WireError::kHashMismatch: return "hash_mismatch";
    case WireError::kIndexOutOfRange: return "index_out_of_range";
    case WireError::kBadPadding: return "bad_padding";
    case WireError::kTrailingBytes: return "trailing_bytes";
  }
  return "unknown";
}

WireFormatError::WireFormatError(WireError code, const std::string& what)
    : std::runtime_error(std::string("wire: ") + wire_error_name(code) + ": " + what), code_(code) {}

std::size_t index_bits(std::size_t n_codes) {
  if (n_codes < 2) throw std::invalid_argument("index_bits: n_L must be at least 2");
  return static_cast<std::size_t>(std::bit_width(n_codes - 1));
}

std::size_t raw_feature_bytes(std::size_t h, std::size_t w, std::size_t c, std::size_t bits_per_value) {
  if (h == 0 || w == 0 || c == 0 || bits_per_value == 0) throw std::invalid_argument("raw_feature_bytes: zero count");
  return (h * w * c * bits_per_value + 7) / 8;
}

std::size_t codebook_payload_bytes(std::size_t h, std::size_t w, std::size_t n_codes, std::size_t n_ranks) {
  return (h * w * n_ranks * index_bits(n_codes) + 7) / 8;
}

std::size_t codebook_message_bytes(std::size_t h, std::size_t w, std::size_t n_codes, std::size_t n_ranks) {
  return kWireHeaderBytes + codebook_payload_bytes(h, w, n_codes, n_ranks);
}

std::vector<std::uint8_t> pack_indices(const MessagePayload& msg, std::size_t n_codes) {
  const std::size_t b = index_bits(n_codes);
  const std::size_t n = msg.height * msg.width * msg.n_ranks;
  if (msg.indices.size() != n) throw std::invalid_argument("pack_indices: index count does not match the shape");
  std::vector<std::uint8_t> out((n * b + 7) / 8, 0);
  std::size_t pos = 0;
  for (std::uint32_t ix : msg.indices) {
    if (ix >= n_codes) {
      throw WireFormatError(WireError::kIndexOutOfRange,
                            "index " + std::to_string(ix) + " >= n_L " + std::to_string(n_codes));
    }
    for (std::size_t j = 0; j < b; ++j, ++pos)
      if ((ix >> j) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
  }
  return out;
}

namespace {

void check_header(const WireHeader& h) {
  if (h.n_codes < 2) throw WireFormatError(WireError::kBadHeader, "n_L < 2");
  if (h.n_ranks < 1) throw WireFormatError(WireError::kBadHeader, "n_R = 0");
  if (h.height < 1 || h.width < 1) throw WireFormatError(WireError::kBadHeader, "empty grid");
}

}  // namespace

MessagePayload unpack_indices(std::span<const std::uint8_t> bytes, const WireHeader& header) {
  check_header(header);
  const std::size_t b = index_bits(header.n_codes);
  MessagePayload msg{header.height, header.width, header.n_ranks, {}};
  const std::size_t n = msg.height * msg.width * msg.n_ranks;
  const std::size_t need = (n * b + 7) / 8;
  if (bytes.size() < need) {
    throw WireFormatError(WireError::kTruncated,
                          "payload has " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(need));
  }
  if (bytes.size() > need) {
    throw WireFormatError(WireError::kTrailingBytes,
                          std::to_string(bytes.size() - need) + " bytes after the payload");
  }
  if ((n * b) % 8 != 0 && (bytes[need - 1] >> ((n * b) % 8)) != 0) {
    throw WireFormatError(WireError::kBadPadding, "non-zero padding bits");
  }
  msg.indices.resize(n);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t ix = 0;
    for (std::size_t j = 0; j < b; ++j, ++pos) ix |= static_cast<std::uint32_t>((bytes[pos / 8] >> (pos % 8)) & 1u) << j;
    if (ix >= header.n_codes) {
      throw WireFormatError(WireError::kIndexOutOfRange,
                            "index " + std::to_string(ix) + " >= n_L " + std::to_string(header.n_codes));
    }
    msg.indices[i] = ix;
  }
  return msg;
}

std::vector<std::uint8_t> encode_message(const WireHeader& header, const MessagePayload& msg) {
  check_header(header);
  if (msg.height != header.height || msg.width != header.width || msg.n_ranks != header.n_ranks) {
    throw std::invalid_argument("encode_message: header shape does not match the payload");
  }
  ByteWriter w;
  w.u32(header.sender_id);
  w.u64(header.frame_timestamp_ms);
  for (float v : header.pose) w.f32(v);
  w.u64(header.codebook_hash);
  w.u16(header.height);
  w.u16(header.width);
  w.u16(header.n_codes);
  w.u8(header.n_ranks);
  w.bytes(pack_indices(msg, header.n_codes));
  return w.take();
}

DecodedMessage decode_message(std::span<const std::uint8_t> bytes, std::uint64_t expected_hash) {
  if (bytes.size() < kWireHeaderBytes) {
    throw WireFormatError(WireError::kTruncated, "message shorter than the " + std::to_string(kWireHeaderBytes) +
                                                     "-byte header");
  }
  ByteReader r(bytes);
  DecodedMessage m;
  m.header.sender_id = r.u32();
  m.header.frame_timestamp_ms = r.u64();
  for (float& v : m.header.pose) v = r.f32();
  m.header.codebook_hash = r.u64();
  m.header.height = r.u16();
  m.header.width = r.u16();
  m.header.n_codes = r.u16();
  m.header.n_ranks = r.u8();
  check_header(m.header);
  if (m.header.codebook_hash != expected_hash) {
    throw WireFormatError(WireError::kHashMismatch, "sender and receiver codebooks differ");
  }
  m.payload = unpack_indices(bytes.subspan(kWireHeaderBytes), m.header);
  return m;
}

void ChannelModel::validate() const {
  if (!(rate_mbps > 0.0)) throw std::invalid_argument("channel: rate must be positive");
  if (!(jitter_lo_ms >= 0.0) || !(jitter_lo_ms <= jitter_hi_ms) || !std::isfinite(jitter_hi_ms)) {
    throw std::invalid_argument("channel: jitter bounds must satisfy 0 <= lo <= hi < inf");
  }
}

double transmission_ms(std::size_t size_bytes, const ChannelModel& channel) {
  channel.validate();
  return static_cast<double>(size_bytes) * 8.0 / (channel.rate_mbps * 1000.0);
}

double sample_comm_latency(std::size_t size_bytes, const ChannelModel& channel, RngStream& rng) {
  return transmission_ms(size_bytes, channel) + rng_uniform(rng, channel.jitter_lo_ms, channel.jitter_hi_ms);
}

void LatencyProfile::validate() const {
  if (!(t_local_ms >= 0.0) || !(t_fus_ms >= 0.0)) throw std::invalid_argument("latency profile: negative time");
}

LatencyProfile LatencyProfile::split(double total_ms, double local_fraction) {
  if (!(local_fraction >= 0.0 && local_fraction <= 1.0)) throw std::invalid_argument("latency profile: bad split");
  return {total_ms * local_fraction, total_ms * (1.0 - local_fraction)};
}

LatencyProfile LatencyProfile::fp32() { return split(59.5); }
LatencyProfile LatencyProfile::int8() { return split(27.1); }

}  // namespace qv2x
