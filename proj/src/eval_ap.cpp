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
#include <numeric>
#include <stdexcept>
#include <utility>

#include "qv2x/pipeline.hpp"

namespace qv2x {

std::vector<double> default_recall_points() {
  std::vector<double> r(101);
  for (int i = 0; i <= 100; ++i) r[static_cast<std::size_t>(i)] = i / 100.0;
  return r;
}

double eval_ap(const std::vector<DetectionGrid>& preds, const std::vector<FeatureGrid>& labels,
               const std::vector<double>& recall_points) {
  if (preds.size() != labels.size()) throw std::invalid_argument("eval_ap: prediction/label count mismatch");
  if (recall_points.empty()) throw std::invalid_argument("eval_ap: no operating points");
  for (double r : recall_points) {
    if (r < 0.0 || r > 1.0) throw std::invalid_argument("eval_ap: operating points must lie in [0, 1]");
  }
  std::vector<std::pair<double, bool>> cells;
  std::size_t positives = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    require_same_shape(preds[k].score, labels[k], "eval_ap");
    for (std::size_t i = 0; i < labels[k].size(); ++i) {
      const bool pos = labels[k][i] > 0.5;
      positives += pos ? 1 : 0;
      cells.emplace_back(preds[k].score[i], pos);
    }
  }
  if (positives == 0) return 0.0;
  // Ranking by logits is the same as ranking by sigmoid confidence.
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  // One PR point per distinct score; tied cells enter together.
  std::vector<double> prec, rec;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < cells.size();) {
    std::size_t j = i;
    while (j < cells.size() && cells[j].first == cells[i].first) {
      tp += cells[j].second ? 1 : 0;
      ++j;
    }
    seen = j;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    i = j;
  }
  // Interpolated precision: running maximum from the high-recall end.
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);

  double total = 0.0;
  for (double r : recall_points) {
    const auto it = std::lower_bound(rec.begin(), rec.end(), r);
    total += it == rec.end() ? 0.0 : prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return total / static_cast<double>(recall_points.size());
}

}  // namespace qv2x
