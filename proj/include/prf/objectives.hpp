// Copyright (c) the prf project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prf/autodiff.hpp"
#include "prf/tensor.hpp"

namespace prf {

struct LossWeights {
  double lambda_bce = 1.0;
  double lambda_dice = 1.0;
};

struct LossBreakdown {
  double det = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double total = 0.0;
};

// ---- losses (eager scalars) ----

// Softmax cross-entropy on a 2-class logit pair. label must be 0 or 1.
double detection_loss(const Tensor& logits, int label);

// Mean binary cross-entropy; predictions clipped to [1e-7, 1-1e-7].
double mask_bce(const Tensor& pred, const Tensor& gt);

// 1 - (2*intersection + s) / (sum_pred + sum_gt + s), smoothing s = 1.
double mask_dice(const Tensor& pred, const Tensor& gt);

// Weighted sum; for authentic samples the mask terms are skipped and
// recorded as zero.
LossBreakdown composite_loss(double det, double bce, double dice, const LossWeights& w,
                             bool authentic = false);

// ---- losses (tape graph, for training) ----

ad::Var mask_bce_loss(ad::Var pred, const Tensor& gt);
ad::Var mask_dice_loss(ad::Var pred, const Tensor& gt);

// ---- metrics ----

// Pixels above 0.5 are positive; both masks empty scores 0.
double pixel_f1(const Tensor& pred, const Tensor& gt);
double mask_iou(const Tensor& pred, const Tensor& gt);

// Mann-Whitney rank AUC with midrank ties; nullopt when gt is single-class.
std::optional<double> pixel_auc(const Tensor& pred, const Tensor& gt);

// argmax detection over 2-class logit rows; F1 treats manipulated (1) as
// the positive class. Returns {accuracy, f1}.
std::pair<double, double> image_level_metrics(const std::vector<std::array<double, 2>>& logits,
                                              const std::vector<int>& labels);

struct SampleMetrics {
  std::string id;
  int label = 0;
  int predicted = 0;
  double pixel_f1 = 0.0;
  double pixel_iou = 0.0;
  double pixel_auc = 0.0;
  bool auc_defined = false;
};

struct MetricsReport {
  std::vector<SampleMetrics> samples;
  double pixel_f1 = 0.0;
  double pixel_iou = 0.0;
  double pixel_auc = 0.0;
  double image_f1 = 0.0;
  double image_acc = 0.0;
};

// Dataset averages. Pixel scores average over manipulated samples only
// unless include_authentic_pixels is set; AUC averages over samples where
// it is defined.
MetricsReport summarize_metrics(std::vector<SampleMetrics> samples,
                                bool include_authentic_pixels = false);

// Stable JSON: dataset averages at the top level plus a "samples" array.
// Byte-identical for
// identical reports.
std::string metrics_to_json(const MetricsReport& report);

}  // namespace prf
