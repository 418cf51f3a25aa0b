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
#include <stdexcept>
#include <string>

#include "qv2x/quantizer.hpp"

namespace qv2x {

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Integer base floor(W/s) + z per element, before the rounding offset.
inline double rounding_base(double w, const QuantParams& qp, std::size_t i) {
  const std::size_t g = qp.group_of(i);
  return std::floor(w / qp.scale[g]) + static_cast<double>(qp.zero_point[g]);
}

void check_sizes(std::span<const double> w, const QuantParams& qp, const RoundingVars& vars) {
  if (qp.identity()) throw std::invalid_argument("learnable rounding needs an integer grid");
  if (vars.v.size() != w.size()) throw std::invalid_argument("rounding variables do not match weights");
}

}  // namespace

double RoundingVars::rectified(double v) {
  return std::clamp(1.2 * sigmoid(v) - 0.1, 0.0, 1.0);
}

double RoundingVars::rectified_grad(double v) {
  const double sg = sigmoid(v);
  const double h = 1.2 * sg - 0.1;
  if (h <= 0.0 || h >= 1.0) return 0.0;
  return 1.2 * sg * (1.0 - sg);
}

std::vector<std::uint8_t> RoundingVars::hard_mask() const {
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = rectified(v[i]) >= 0.5 ? 1 : 0;
  return m;
}

RoundingVars init_rounding(std::span<const double> w, const QuantParams& qp) {
  if (qp.identity()) throw std::invalid_argument("learnable rounding needs an integer grid");
  RoundingVars vars;
  vars.v.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double x = w[i] / qp.scale[qp.group_of(i)];
    const double frac = x - std::floor(x);
    // Invert h(v) = frac on the unclamped branch.
    const double sg = (frac + 0.1) / 1.2;
    vars.v[i] = -std::log(1.0 / sg - 1.0);
  }
  return vars;
}

std::vector<double> soft_rounded_weights(std::span<const double> w, const QuantParams& qp,
                                         const RoundingVars& vars) {
  check_sizes(w, qp, vars);
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = qp.group_of(i);
    const double q = std::clamp(rounding_base(w[i], qp, i) + vars.h(i), static_cast<double>(qp.q_min),
                                static_cast<double>(qp.q_max));
    out[i] = qp.scale[g] * (q - static_cast<double>(qp.zero_point[g]));
  }
  return out;
}

std::vector<double> rounded_weights(std::span<const double> w, const QuantParams& qp,
                                    std::span<const std::uint8_t> mask) {
  if (mask.empty()) return fake_quant(w, qp);
  if (qp.identity()) throw std::invalid_argument("rounding mask needs an integer grid");
  if (mask.size() != w.size()) throw std::invalid_argument("rounding mask does not match weights");
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = qp.group_of(i);
    const double q = std::clamp(rounding_base(w[i], qp, i) + (mask[i] ? 1.0 : 0.0),
                                static_cast<double>(qp.q_min), static_cast<double>(qp.q_max));
    out[i] = qp.scale[g] * (q - static_cast<double>(qp.zero_point[g]));
  }
  return out;
}

double rounding_regularizer(const RoundingVars& vars, double beta, std::span<double> grad_v) {
  double reg = 0.0;
  for (std::size_t i = 0; i < vars.v.size(); ++i) {
    const double d = 2.0 * vars.h(i) - 1.0;
    const double a = std::abs(d);
    reg += 1.0 - std::pow(a, beta);
    if (!grad_v.empty() && a > 0.0) {
      const double dd = -beta * std::pow(a, beta - 1.0) * (d > 0 ? 1.0 : -1.0);
      grad_v[i] += dd * 2.0 * RoundingVars::rectified_grad(vars.v[i]);
    }
  }
  return reg;
}

double adaround_objective(std::span<const double> w, const QuantParams& qp, const RoundingVars& vars,
                          const ReconstructionFn& recon, int iter, double beta, double lambda_reg,
                          std::span<double> grad_v) {
  check_sizes(w, qp, vars);
  const auto soft = soft_rounded_weights(w, qp, vars);
  std::vector<double> grad_w(grad_v.empty() ? 0 : w.size(), 0.0);
  const double rec = recon(iter, soft, grad_w);
  if (!grad_v.empty()) {
    if (grad_v.size() != w.size()) throw std::invalid_argument("gradient buffer size mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t g = qp.group_of(i);
      const double q = rounding_base(w[i], qp, i) + vars.h(i);
      // The clamp to the integer range blocks the gradient.
      const bool inside = q > qp.q_min && q < qp.q_max;
      grad_v[i] = inside ? grad_w[i] * qp.scale[g] * RoundingVars::rectified_grad(vars.v[i]) : 0.0;
    }
  }
  double reg = 0.0;
  if (lambda_reg > 0.0) {
    std::vector<double> rg(grad_v.empty() ? 0 : w.size(), 0.0);
    reg = rounding_regularizer(vars, beta, rg);
    for (std::size_t i = 0; i < rg.size(); ++i) grad_v[i] += lambda_reg * rg[i];
  }
  return rec + lambda_reg * reg;
}

AdaRoundReport adaround_optimize(std::span<const double> w, const QuantParams& qp,
                                 const ReconstructionFn& recon, const AdaRoundConfig& cfg) {
  if (cfg.iters < 0 || !(cfg.lr > 0.0)) throw std::invalid_argument("adaround: bad iteration count or lr");
  AdaRoundReport rep;
  rep.vars = init_rounding(w, qp);
  auto& v = rep.vars.v;
  const std::size_t n = w.size();

  const auto nearest = fake_quant(w, qp);
  rep.initial_loss = recon(-1, nearest, {});

  std::vector<double> m(n, 0.0), s2(n, 0.0), g(n, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const int warm = static_cast<int>(std::floor(cfg.warmup * cfg.iters));
  for (int it = 0; it < cfg.iters; ++it) {
    double beta = cfg.beta_hi;
    double lambda = 0.0;
    if (it >= warm) {
      const int span = std::max(1, cfg.iters - warm - 1);
      beta = cfg.beta_hi + (cfg.beta_lo - cfg.beta_hi) * static_cast<double>(it - warm) / span;
      lambda = cfg.lambda_reg;
    }
    const double loss = adaround_objective(w, qp, rep.vars, recon, it, beta, lambda, g);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("adaround: non-finite objective at iteration " + std::to_string(it));
    }
    const double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      s2[i] = b2 * s2[i] + (1 - b2) * g[i] * g[i];
      v[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(s2[i] / c2) + eps);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double h = rep.vars.h(i);
    if (h > 0.01 && h < 0.99) ++rep.non_converged;
  }
  // Commit to the hard decision so h(v) is exactly 0 or 1.
  for (std::size_t i = 0; i < n; ++i) v[i] = rep.vars.h(i) >= 0.5 ? 10.0 : -10.0;
  const auto mask = rep.vars.hard_mask();
  rep.final_loss = recon(-1, rounded_weights(w, qp, mask), {});
  if (rep.final_loss > rep.initial_loss) {
    // Fall back to nearest rounding, expressed as a mask.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t gi = qp.group_of(i);
      const double x = w[i] / qp.scale[gi];
      v[i] = round_half_even(x) > std::floor(x) ? 10.0 : -10.0;
    }
    rep.final_loss = rep.initial_loss;
    rep.kept_nearest = true;
  }
  return rep;
}

AdaRoundReport adaround_optimize(std::span<const double> w, const QuantParams& qp,
                                 const std::vector<std::vector<double>>& block_inputs,
                                 const std::vector<std::vector<double>>& fp_outputs,
                                 const BlockFunction& block, const AdaRoundConfig& cfg) {
  if (block_inputs.empty() || block_inputs.size() != fp_outputs.size()) {
    throw std::invalid_argument("adaround: need matching, non-empty input/output lists");
  }
  const double inv_k = 1.0 / static_cast<double>(block_inputs.size());
  ReconstructionFn recon = [&](int, std::span<const double> wq, std::span<double> grad) {
    double loss = 0.0;
    for (std::size_t k = 0; k < block_inputs.size(); ++k) {
      const auto out = block.forward(wq, block_inputs[k]);
      if (out.size() != fp_outputs[k].size()) throw std::invalid_argument("adaround: output size mismatch");
      std::vector<double> go(out.size());
      for (std::size_t j = 0; j < out.size(); ++j) {
        const double d = out[j] - fp_outputs[k][j];
        loss += d * d * inv_k;
        go[j] = 2.0 * d * inv_k;
      }
      if (!grad.empty()) {
        const auto gw = block.backward_weights(wq, block_inputs[k], go);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += gw[i];
      }
    }
    return loss;
  };
  return adaround_optimize(w, qp, recon, cfg);
}

}  // namespace qv2x
