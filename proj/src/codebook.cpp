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
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "qv2x/codebook.hpp"

namespace qv2x {

namespace {

constexpr std::string_view kMagic = "QV2XCB";
constexpr std::uint16_t kVersion = 1;

void check_ranks(const Codebook& cb, std::size_t n_ranks) {
  if (n_ranks < 1 || n_ranks > cb.max_ranks()) {
    throw std::invalid_argument("codebook: n_R = " + std::to_string(n_ranks) + " outside [1, " +
                                std::to_string(cb.max_ranks()) + "]");
  }
}

// Greedy residual assignment of one vector; writes n_ranks indices and
// leaves the final residual in `res`.
void assign_vector(const Codebook& cb, std::size_t n_ranks, double* res, std::uint32_t* out) {
  const std::size_t dim = cb.dim;
  for (std::size_t r = 0; r < n_ranks; ++r) {
    const double a = cb.alpha[r];
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < cb.n_codes; ++l) {
      const double* d = cb.codes.data() + l * dim;
      double dist = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double e = res[c] - a * d[c];
        dist += e * e;
      }
      if (dist < best_d) {
        best_d = dist;
        best = l;
      }
    }
    out[r] = static_cast<std::uint32_t>(best);
    const double* d = cb.codes.data() + best * dim;
    for (std::size_t c = 0; c < dim; ++c) res[c] -= a * d[c];
  }
}

// Training vectors flattened to N x dim.
struct Vectors {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> x;
  const double* row(std::size_t i) const { return x.data() + i * dim; }
};

Vectors gather(const std::vector<FeatureGrid>& features) {
  Vectors v;
  for (const auto& g : features) {
    if (g.empty()) continue;
    if (v.dim == 0) v.dim = g.channels();
    if (g.channels() != v.dim) throw std::invalid_argument("train_stage1: feature channel counts differ");
    v.x.insert(v.x.end(), g.values().begin(), g.values().end());
  }
  v.n = v.dim ? v.x.size() / v.dim : 0;
  return v;
}

// Assigns every vector; returns the mean squared residual.
double assign_all(const Vectors& v, const Codebook& cb, std::size_t n_ranks, std::vector<std::uint32_t>& idx) {
  idx.assign(v.n * n_ranks, 0);
  std::vector<double> err(v.n);
  const auto n = static_cast<std::ptrdiff_t>(v.n);
#pragma omp parallel
  {
    std::vector<double> res(v.dim);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(i);
      std::copy(v.row(u), v.row(u) + v.dim, res.begin());
      assign_vector(cb, n_ranks, res.data(), idx.data() + u * n_ranks);
      double e = 0.0;
      for (double r : res) e += r * r;
      err[u] = e;
    }
  }
  double total = 0.0;
  for (double e : err) total += e;
  return total / static_cast<double>(v.n);
}

// Mean squared residual for fixed indices.
double fixed_loss(const Vectors& v, const Codebook& cb, std::size_t n_ranks, const std::vector<std::uint32_t>& idx) {
  double total = 0.0;
  for (std::size_t i = 0; i < v.n; ++i) {
    const double* x = v.row(i);
    for (std::size_t c = 0; c < v.dim; ++c) {
      double rec = 0.0;
      for (std::size_t r = 0; r < n_ranks; ++r) rec += cb.alpha[r] * cb.codes[idx[i * n_ranks + r] * v.dim + c];
      const double e = x[c] - rec;
      total += e * e;
    }
  }
  return total / static_cast<double>(v.n);
}

void update_codes_lloyd(const Vectors& v, Codebook& cb, const std::vector<std::uint32_t>& idx,
                        std::vector<std::size_t>& count) {
  std::vector<double> sum(cb.codes.size(), 0.0);
  count.assign(cb.n_codes, 0);
  for (std::size_t i = 0; i < v.n; ++i) {
    const std::size_t l = idx[i];
    ++count[l];
    for (std::size_t c = 0; c < v.dim; ++c) sum[l * v.dim + c] += v.row(i)[c];
  }
  for (std::size_t l = 0; l < cb.n_codes; ++l) {
    if (count[l] == 0) continue;
    for (std::size_t c = 0; c < v.dim; ++c) cb.codes[l * v.dim + c] = sum[l * v.dim + c] / static_cast<double>(count[l]);
  }
}

// Least squares over the codes that appear in some assignment with a
// non-zero weight, alpha and indices fixed.
void update_codes_ls(const Vectors& v, Codebook& cb, std::size_t n_ranks, const std::vector<std::uint32_t>& idx,
                     std::vector<std::size_t>& count) {
  const std::size_t L = cb.n_codes;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(v.dim));
  count.assign(L, 0);
  for (std::size_t i = 0; i < v.n; ++i) {
    const std::uint32_t* ix = idx.data() + i * n_ranks;
    for (std::size_t r = 0; r < n_ranks; ++r) {
      ++count[ix[r]];
      for (std::size_t s = 0; s < n_ranks; ++s) A(ix[r], ix[s]) += cb.alpha[r] * cb.alpha[s];
      for (std::size_t c = 0; c < v.dim; ++c) B(ix[r], static_cast<Eigen::Index>(c)) += cb.alpha[r] * v.row(i)[c];
    }
  }
  std::vector<Eigen::Index> live;
  for (std::size_t l = 0; l < L; ++l) {
    if (A(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(l)) > 0.0) live.push_back(static_cast<Eigen::Index>(l));
    else count[l] = 0;
  }
  if (live.empty()) return;
  const auto m = static_cast<Eigen::Index>(live.size());
  Eigen::MatrixXd As(m, m), Bs(m, static_cast<Eigen::Index>(v.dim));
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) As(a, b) = A(live[a], live[b]);
    Bs.row(a) = B.row(live[a]);
  }
  const Eigen::MatrixXd D = As.completeOrthogonalDecomposition().solve(Bs);
  if (!D.allFinite()) return;
  for (Eigen::Index a = 0; a < m; ++a)
    for (std::size_t c = 0; c < v.dim; ++c)
      cb.codes[static_cast<std::size_t>(live[a]) * v.dim + c] = D(a, static_cast<Eigen::Index>(c));
}

// Least squares for alpha given codes and indices, projected onto alpha >= 0.
// Kept only when it lowers the loss for the fixed indices.
void update_alpha(const Vectors& v, Codebook& cb, std::size_t n_ranks, const std::vector<std::uint32_t>& idx) {
  const auto R = static_cast<Eigen::Index>(n_ranks);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(R, R);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(R);
  for (std::size_t i = 0; i < v.n; ++i) {
    const std::uint32_t* ix = idx.data() + i * n_ranks;
    for (Eigen::Index r = 0; r < R; ++r) {
      const auto dr = cb.code(ix[r]);
      for (Eigen::Index s = 0; s < R; ++s) {
        const auto ds = cb.code(ix[s]);
        double dot = 0.0;
        for (std::size_t c = 0; c < v.dim; ++c) dot += dr[c] * ds[c];
        G(r, s) += dot;
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < v.dim; ++c) dot += dr[c] * v.row(i)[c];
      h(r) += dot;
    }
  }
  const Eigen::VectorXd a = G.completeOrthogonalDecomposition().solve(h);
  if (!a.allFinite()) return;
  Codebook trial = cb;
  for (Eigen::Index r = 0; r < R; ++r) trial.alpha[static_cast<std::size_t>(r)] = std::max(0.0, a(r));
  if (fixed_loss(v, trial, n_ranks, idx) < fixed_loss(v, cb, n_ranks, idx)) cb.alpha = std::move(trial.alpha);
}

void round_to_float(Codebook& cb) {
  for (double& x : cb.codes) x = static_cast<float>(x);
  for (double& a : cb.alpha) a = static_cast<float>(a);
}

}  // namespace

std::uint64_t Codebook::version_hash() const {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(n_codes));
  w.u32(static_cast<std::uint32_t>(dim));
  w.u32(static_cast<std::uint32_t>(alpha.size()));
  for (double a : alpha) w.f32(static_cast<float>(a));
  for (double x : codes) w.f32(static_cast<float>(x));
  return fnv1a64(w.buffer());
}

void Codebook::validate() const {
  if (n_codes < 2) throw std::invalid_argument("codebook: n_L must be at least 2");
  if (dim < 1) throw std::invalid_argument("codebook: dim must be positive");
  if (codes.size() != n_codes * dim) throw std::invalid_argument("codebook: code matrix has the wrong size");
  if (alpha.empty()) throw std::invalid_argument("codebook: no ranks");
  for (double x : codes)
    if (!std::isfinite(x)) throw std::invalid_argument("codebook: non-finite code value");
  for (double a : alpha)
    if (!std::isfinite(a)) throw std::invalid_argument("codebook: non-finite alpha");
}

MessagePayload assign(const FeatureGrid& f, const Codebook& cb, std::size_t n_ranks) {
  cb.validate();
  check_ranks(cb, n_ranks);
  if (f.channels() != cb.dim) {
    throw std::invalid_argument("assign: feature has " + std::to_string(f.channels()) + " channels, codebook dim " +
                                std::to_string(cb.dim));
  }
  MessagePayload msg{f.height(), f.width(), n_ranks, std::vector<std::uint32_t>(f.cells() * n_ranks)};
  const auto cells = static_cast<std::ptrdiff_t>(f.cells());
#pragma omp parallel
  {
    std::vector<double> res(cb.dim);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < cells; ++i) {
      const auto u = static_cast<std::size_t>(i);
      std::copy(f.data() + u * cb.dim, f.data() + (u + 1) * cb.dim, res.begin());
      assign_vector(cb, n_ranks, res.data(), msg.indices.data() + u * n_ranks);
    }
  }
  return msg;
}

FeatureGrid reconstruct(const MessagePayload& msg, const Codebook& cb) {
  cb.validate();
  check_ranks(cb, msg.n_ranks);
  if (msg.indices.size() != msg.height * msg.width * msg.n_ranks) {
    throw std::invalid_argument("reconstruct: index count does not match the message shape");
  }
  for (auto ix : msg.indices) {
    if (ix >= cb.n_codes) {
      throw std::invalid_argument("reconstruct: index " + std::to_string(ix) + " >= n_L " + std::to_string(cb.n_codes));
    }
  }
  FeatureGrid out(msg.height, msg.width, cb.dim);
  for (std::size_t i = 0; i < msg.height * msg.width; ++i) {
    double* o = out.data() + i * cb.dim;
    for (std::size_t r = 0; r < msg.n_ranks; ++r) {
      const double a = cb.alpha[r];
      const double* d = cb.codes.data() + msg.indices[i * msg.n_ranks + r] * cb.dim;
      for (std::size_t c = 0; c < cb.dim; ++c) o[c] += a * d[c];
    }
  }
  return out;
}

double reconstruction_error(const FeatureGrid& f, const Codebook& cb, std::size_t n_ranks) {
  if (f.cells() == 0) return 0.0;
  return squared_distance(f, reconstruct(assign(f, cb, n_ranks), cb)) / static_cast<double>(f.cells());
}

Codebook train_stage1(const std::vector<FeatureGrid>& features, std::size_t n_codes, std::size_t n_ranks, int iters,
                      std::uint64_t seed, Stage1Report* report) {
  if (n_codes < 2) throw std::invalid_argument("train_stage1: n_L must be at least 2");
  if (n_ranks < 1) throw std::invalid_argument("train_stage1: n_R must be positive");
  if (iters < 0) throw std::invalid_argument("train_stage1: negative iteration count");
  const Vectors v = gather(features);
  if (v.n < n_codes) {
    throw std::invalid_argument("train_stage1: " + std::to_string(v.n) + " training vectors for n_L = " +
                                std::to_string(n_codes));
  }
  for (double x : v.x)
    if (!std::isfinite(x)) throw std::invalid_argument("train_stage1: non-finite training vector");

  RngStream rng = RngStream(seed).split(0xcb);
  Codebook cb;
  cb.n_codes = n_codes;
  cb.dim = v.dim;
  cb.alpha.resize(n_ranks);
  for (std::size_t r = 0; r < n_ranks; ++r) cb.alpha[r] = std::ldexp(1.0, -static_cast<int>(r));

  // Distinct initial codes, visiting vectors in random order.
  {
    std::vector<std::size_t> order(v.n);
    for (std::size_t i = 0; i < v.n; ++i) order[i] = i;
    std::set<std::vector<double>> seen;
    for (std::size_t k = 0; k < v.n && seen.size() < n_codes; ++k) {
      std::swap(order[k], order[k + rng.below(v.n - k)]);
      std::vector<double> x(v.row(order[k]), v.row(order[k]) + v.dim);
      if (seen.insert(x).second) cb.codes.insert(cb.codes.end(), x.begin(), x.end());
    }
    if (seen.size() < n_codes) {
      throw std::invalid_argument("train_stage1: only " + std::to_string(seen.size()) +
                                  " distinct training vectors for n_L = " + std::to_string(n_codes));
    }
  }

  double ms = 0.0;
  for (double x : v.x) ms += x * x;
  const double jitter = 1e-3 * std::max(std::sqrt(ms / static_cast<double>(v.x.size())), 1e-3);

  Stage1Report rep;
  std::vector<std::uint32_t> idx;
  std::vector<std::size_t> count;
  for (int it = 0; it < iters; ++it) {
    rep.loss.push_back(assign_all(v, cb, n_ranks, idx));
    if (n_ranks == 1) {
      update_codes_lloyd(v, cb, idx, count);
    } else {
      update_codes_ls(v, cb, n_ranks, idx, count);
      update_alpha(v, cb, n_ranks, idx);
    }
    for (std::size_t l = 0; l < n_codes; ++l) {
      if (count[l] != 0) continue;
      const double* x = v.row(rng.below(v.n));
      for (std::size_t c = 0; c < v.dim; ++c) cb.codes[l * v.dim + c] = x[c] + jitter * rng.normal();
      ++rep.reseeded;
    }
  }
  round_to_float(cb);
  rep.final_loss = assign_all(v, cb, n_ranks, idx);
  if (report) *report = std::move(rep);
  return cb;
}

FeatureGrid codebook_training_vectors(const std::vector<Scenario>& scenarios, const ModelParams& p,
                                      std::size_t per_grid, std::uint64_t seed) {
  std::vector<double> out;
  std::size_t dim = 0;
  const RngStream root = RngStream(seed).split(0xcbd);
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    const auto& s = scenarios[k];
    const RngStream run = eval_stream(seed, k);
    for (std::size_t f = 0; f < s.frames.size(); ++f) {
      for (const auto& a : s.agents) {
        const FeatureGrid g = compress(encode(agent_observation(s, a.id, f, run), p, a.modality), p);
        dim = g.channels();
        RngStream rng = root.split(k).split(f).split(static_cast<std::uint64_t>(a.id));
        std::vector<std::size_t> cells(g.cells());
        for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
        const std::size_t take = std::min(per_grid, cells.size());
        for (std::size_t i = 0; i < take; ++i) {
          std::swap(cells[i], cells[i + rng.below(cells.size() - i)]);
          out.insert(out.end(), g.data() + cells[i] * dim, g.data() + (cells[i] + 1) * dim);
        }
      }
    }
  }
  FeatureGrid grid(1, dim ? out.size() / dim : 0, dim);
  std::copy(out.begin(), out.end(), grid.data());
  return grid;
}

void write_codebook(ByteWriter& w, const Codebook& cb) {
  cb.validate();
  w.u32(static_cast<std::uint32_t>(cb.n_codes));
  w.u32(static_cast<std::uint32_t>(cb.dim));
  w.u32(static_cast<std::uint32_t>(cb.alpha.size()));
  for (double a : cb.alpha) w.f32(static_cast<float>(a));
  for (double x : cb.codes) w.f32(static_cast<float>(x));
  w.u64(cb.version_hash());
}

Codebook read_codebook(ByteReader& r) {
  Codebook cb;
  cb.n_codes = r.u32();
  cb.dim = r.u32();
  const std::size_t ranks = r.u32();
  if (ranks > r.remaining() / 4) throw TruncatedInput("codebook: alpha truncated");
  for (std::size_t i = 0; i < ranks; ++i) cb.alpha.push_back(r.f32());
  if (cb.dim != 0 && cb.n_codes > r.remaining() / 4 / cb.dim) throw TruncatedInput("codebook: codes truncated");
  cb.codes.reserve(cb.n_codes * cb.dim);
  for (std::size_t i = 0; i < cb.n_codes * cb.dim; ++i) cb.codes.push_back(r.f32());
  const std::uint64_t hash = r.u64();
  try {
    cb.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  if (hash != cb.version_hash()) throw FormatError("codebook: content hash mismatch");
  return cb;
}

void save_codebook(const std::string& path, const Codebook& cb, const ArtifactStamp& stamp) {
  ByteWriter w;
  w.raw(kMagic);
  w.u16(kVersion);
  w.u64(stamp.config_hash);
  w.u64(stamp.seed);
  write_codebook(w, cb);
  write_file_bytes(path, w.buffer());
}

Codebook load_codebook(const std::string& path, ArtifactStamp* stamp) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.remaining() < kMagic.size() || r.raw(kMagic.size()) != kMagic) {
    throw FormatError(path + ": not a codebook file");
  }
  const auto version = r.u16();
  if (version != kVersion) {
    throw VersionMismatch(path + ": codebook version " + std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  }
  ArtifactStamp st;
  st.config_hash = r.u64();
  st.seed = r.u64();
  Codebook cb;
  try {
    cb = read_codebook(r);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (r.remaining() != 0) throw FormatError(path + ": trailing bytes");
  if (stamp) *stamp = st;
  return cb;
}

}  // namespace qv2x
