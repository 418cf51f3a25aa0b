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

#include <string>

#include "qv2x/calibration.hpp"

namespace qv2x {

namespace {

constexpr std::string_view kMagic = "QV2Q";
constexpr std::uint16_t kVersion = 1;

void write_qparams(ByteWriter& w, const QuantParams& qp) {
  w.u8(static_cast<std::uint8_t>(qp.bits));
  w.u8(static_cast<std::uint8_t>(qp.granularity));
  w.i32(qp.q_min);
  w.i32(qp.q_max);
  w.u32(static_cast<std::uint32_t>(qp.groups()));
  for (double s : qp.scale) w.f32(static_cast<float>(s));
  for (std::int32_t z : qp.zero_point) w.i32(z);
}

QuantParams read_qparams(ByteReader& r) {
  QuantParams qp;
  qp.bits = r.u8();
  const auto g = r.u8();
  if (g > 1) throw FormatError("quantized model: bad granularity");
  qp.granularity = static_cast<Granularity>(g);
  qp.q_min = r.i32();
  qp.q_max = r.i32();
  const auto n = r.u32();
  if (n > r.remaining() / 8) throw TruncatedInput("quantized model: parameter arrays truncated");
  for (std::uint32_t i = 0; i < n; ++i) qp.scale.push_back(r.f32());
  for (std::uint32_t i = 0; i < n; ++i) qp.zero_point.push_back(r.i32());
  try {
    qp.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("quantized model: ") + e.what());
  }
  return qp;
}

void write_mask(ByteWriter& w, const std::vector<std::uint8_t>& mask) {
  w.u32(static_cast<std::uint32_t>(mask.size()));
  std::vector<std::uint8_t> packed((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  w.bytes(packed);
}

std::vector<std::uint8_t> read_mask(ByteReader& r) {
  const auto n = r.u32();
  const auto packed = r.bytes((static_cast<std::size_t>(n) + 7) / 8);
  std::vector<std::uint8_t> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return mask;
}

}  // namespace

void save_quantized(const std::string& path, const QuantizedModel& qm, const ArtifactStamp& stamp) {
  ByteWriter w;
  w.raw(kMagic);
  w.u16(kVersion);
  w.u64(stamp.config_hash);
  w.u64(stamp.seed);
  write_model(w, qm.fp);
  w.u32(static_cast<std::uint32_t>(qm.blocks.size()));
  for (const auto& b : qm.blocks) {
    w.u8(b.calibrated ? 1 : 0);
    write_qparams(w, b.weight);
    write_mask(w, b.rounding);
    write_qparams(w, b.act);
  }
  write_file_bytes(path, w.buffer());
}

QuantizedModel load_quantized(const std::string& path, ArtifactStamp* stamp) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != kMagic) throw FormatError(path + ": not a quantized model file");
  const auto version = r.u16();
  if (version != kVersion) {
    throw VersionMismatch(path + ": quantized model version " + std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  }
  ArtifactStamp st;
  st.config_hash = r.u64();
  st.seed = r.u64();
  QuantizedModel qm;
  qm.fp = read_model(r);
  const auto n = r.u32();
  if (n != qm.fp.layers.size()) throw FormatError(path + ": block count does not match the model");
  for (std::uint32_t i = 0; i < n; ++i) {
    BlockQuant b;
    const auto c = r.u8();
    if (c > 1) throw FormatError(path + ": bad calibration flag");
    b.calibrated = c == 1;
    b.weight = read_qparams(r);
    b.rounding = read_mask(r);
    b.act = read_qparams(r);
    if (!b.rounding.empty() && b.rounding.size() != qm.fp.layers[i].weight.size()) {
      throw FormatError(path + ": rounding mask size mismatch");
    }
    qm.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0) throw FormatError(path + ": trailing bytes");
  if (stamp) *stamp = st;
  return qm;
}

}  // namespace qv2x
