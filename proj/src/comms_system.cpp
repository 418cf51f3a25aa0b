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

#include <cmath>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "qv2x/comms.hpp"

namespace qv2x {

const char* transport_name(Transport t) {
  switch (t) {
    case Transport::kRawFp32: return "raw_fp32";
    case Transport::kCompressedFp32: return "compressed_fp32";
    case Transport::kCodebook: return "codebook";
  }
  return "unknown";
}

Transport parse_transport(const std::string& s) {
  for (auto t : {Transport::kRawFp32, Transport::kCompressedFp32, Transport::kCodebook})
    if (s == transport_name(t)) return t;
  throw std::invalid_argument("unknown transport '" + s + "'");
}

namespace {

// Sends every remote feature through the real wire encoding.
class WireCodec : public RemoteCodec {
 public:
  WireCodec(const Codebook& tx, const Codebook& rx, std::size_t n_ranks, std::size_t expected_bytes)
      : tx_(tx), rx_(rx), n_ranks_(n_ranks), expected_bytes_(expected_bytes), rx_hash_(rx.version_hash()) {}

  void set_header(int agent_id, const WireHeader& h) { headers_[agent_id] = h; }

  FeatureGrid transmit(const FeatureGrid& f, int agent_id) override {
    const MessagePayload msg = assign(f, tx_, n_ranks_);
    WireHeader h = headers_.at(agent_id);
    h.height = static_cast<std::uint16_t>(f.height());
    h.width = static_cast<std::uint16_t>(f.width());
    const auto bytes = encode_message(h, msg);
    if (bytes.size() != expected_bytes_) throw std::logic_error("WireCodec: message size differs from the estimate");
    return reconstruct(decode_message(bytes, rx_hash_).payload, rx_);
  }

 private:
  const Codebook& tx_;
  const Codebook& rx_;
  std::size_t n_ranks_;
  std::size_t expected_bytes_;
  std::uint64_t rx_hash_;
  std::map<int, WireHeader> headers_;
};

std::size_t sent_channels(const ModelParams& p) {
  return p.has_compressor() ? p.layers[kCompressDown].spec.out_channels : p.config.feature_channels;
}

}  // namespace

std::size_t message_bytes(const Scenario& s, const ModelParams& p, const SystemConfig& cfg, const Codebook* cb) {
  const std::size_t h = s.roi.rows(), w = s.roi.cols();
  switch (cfg.transport) {
    case Transport::kRawFp32:
      if (p.has_compressor()) throw std::invalid_argument("raw_fp32 transport needs a model without a compressor");
      return raw_feature_bytes(h, w, sent_channels(p), 32);
    case Transport::kCompressedFp32:
      if (!p.has_compressor()) throw std::invalid_argument("compressed_fp32 transport needs a model with a compressor");
      return raw_feature_bytes(h, w, sent_channels(p), 32);
    case Transport::kCodebook:
      if (!cb) throw std::invalid_argument("codebook transport needs a codebook");
      if (h > 0xffff || w > 0xffff || cb->n_codes > 0xffff || cfg.n_ranks > 0xff) {
        throw std::invalid_argument("codebook transport: message shape exceeds the header fields");
      }
      return codebook_message_bytes(h, w, cb->n_codes, cfg.n_ranks);
  }
  throw std::invalid_argument("unknown transport");
}

SystemResult simulate_system(const Scenario& s, std::size_t scenario_index, const ModelParams& p, LayerExecutor& ex,
                             const SystemConfig& cfg, const Codebook* sender_cb, const Codebook* receiver_cb) {
  cfg.channel.validate();
  cfg.latency.validate();
  if (!(cfg.extra_latency_ms >= 0.0)) throw std::invalid_argument("simulate_system: negative extra latency");
  const std::size_t bytes = message_bytes(s, p, cfg, sender_cb);

  std::unique_ptr<WireCodec> codec;
  if (cfg.transport == Transport::kCodebook) {
    const Codebook& rx = receiver_cb ? *receiver_cb : *sender_cb;
    if (rx.version_hash() != sender_cb->version_hash()) {
      throw WireFormatError(WireError::kHashMismatch, "sender and receiver codebooks differ");
    }
    if (sender_cb->dim != p.config.feature_channels) {
      throw std::invalid_argument("simulate_system: codebook dim does not match the feature channels");
    }
    codec = std::make_unique<WireCodec>(*sender_cb, rx, cfg.n_ranks, bytes);
  }

  SampleSpec base;
  base.ego_id = cfg.ego_id;
  base.pose_noise = cfg.pose_noise;
  std::vector<int> remotes;
  for (const auto& a : s.agents)
    if (a.id != cfg.ego_id) remotes.push_back(a.id);
  s.agent(cfg.ego_id);  // throws for an unknown ego

  SystemResult out;
  const std::size_t n_frames = s.frames.size();
  const RngStream lat_root = RngStream(cfg.seed).split(0x1a7e).split(scenario_index);
  // t_sys[r][f]: latency of remote r's message sent at frame f.
  std::vector<std::vector<double>> t_sys(remotes.size(), std::vector<double>(n_frames));
  for (std::size_t f = 0; f < n_frames; ++f) {
    for (std::size_t r = 0; r < remotes.size(); ++r) {
      RngStream rng = lat_root.split(static_cast<std::uint64_t>(remotes[r])).split(f);
      LinkLatency l;
      l.scenario = scenario_index;
      l.frame = f;
      l.link = remotes[r];
      l.bytes = bytes;
      l.t_local_ms = cfg.latency.t_local_ms;
      l.t_comm_ms = sample_comm_latency(bytes, cfg.channel, rng) + cfg.extra_latency_ms;
      l.t_fus_ms = cfg.latency.t_fus_ms;
      l.t_sys_ms = l.t_local_ms + l.t_comm_ms + l.t_fus_ms;
      t_sys[r][f] = l.t_sys_ms;
      out.links.push_back(l);
    }
  }

  const RngStream run = eval_stream(cfg.seed, scenario_index);
  for (std::size_t t = 0; t < n_frames; ++t) {
    SampleSpec spec = base;
    spec.present = {cfg.ego_id};
    const double now = s.frames[t].timestamp_ms;
    for (std::size_t r = 0; r < remotes.size(); ++r) {
      for (std::size_t f = t + 1; f-- > 0;) {
        if (s.frames[f].timestamp_ms + t_sys[r][f] <= now) {
          spec.present.push_back(remotes[r]);
          spec.source_frame[remotes[r]] = f;
          if (codec) {
            const Pose2D pose = agent_pose_estimate(s, remotes[r], f, cfg.pose_noise, run);
            WireHeader h;
            h.sender_id = static_cast<std::uint32_t>(remotes[r]);
            h.frame_timestamp_ms = static_cast<std::uint64_t>(std::llround(s.frames[f].timestamp_ms));
            h.pose[0] = static_cast<float>(pose.x);
            h.pose[1] = static_cast<float>(pose.y);
            h.pose[2] = static_cast<float>(pose.yaw);
            h.codebook_hash = sender_cb->version_hash();
            h.n_codes = static_cast<std::uint16_t>(sender_cb->n_codes);
            h.n_ranks = static_cast<std::uint8_t>(cfg.n_ranks);
            codec->set_header(remotes[r], h);
          }
          break;
        }
      }
    }
    out.detections.push_back(forward(s, t, spec, p, run, ex, codec.get()));
    out.used.push_back({t, spec.source_frame});
  }
  return out;
}

SystemEval evaluate_system(const std::vector<Scenario>& scenarios, const ModelParams& p, LayerExecutor& ex,
                           const SystemConfig& cfg, const Codebook* sender_cb, const Codebook* receiver_cb) {
  std::vector<DetectionGrid> preds;
  std::vector<FeatureGrid> labels;
  SystemEval ev;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    auto r = simulate_system(scenarios[k], k, p, ex, cfg, sender_cb, receiver_cb);
    for (std::size_t t = 0; t < r.detections.size(); ++t) {
      preds.push_back(std::move(r.detections[t]));
      labels.push_back(make_targets(scenarios[k], t, cfg.ego_id).label);
    }
    ev.links.insert(ev.links.end(), r.links.begin(), r.links.end());
  }
  ev.ap = eval_ap(preds, labels);
  double sum = 0.0;
  for (const auto& l : ev.links) sum += l.t_sys_ms;
  ev.mean_t_sys_ms = ev.links.empty() ? 0.0 : sum / static_cast<double>(ev.links.size());
  return ev;
}

std::string latency_csv(const std::vector<LinkLatency>& links) {
  std::ostringstream os;
  os << "frame,link,t_local,t_comm,t_fus,t_sys,scenario,bytes\n";
  os << std::setprecision(17);
  for (const auto& l : links) {
    os << l.frame << ',' << l.link << ',' << l.t_local_ms << ',' << l.t_comm_ms << ',' << l.t_fus_ms << ','
       << l.t_sys_ms << ',' << l.scenario << ',' << l.bytes << '\n';
  }
  return os.str();
}

}  // namespace qv2x
