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

#include "prf/objectives.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "prf/errors.hpp"

namespace prf {

namespace {

constexpr double kBceClip = 1e-7;
constexpr double kDiceSmooth = 1.0;

bool positive(double v) { return v > 0.5; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw ContractError(std::string(what) + ": shape mismatch");
}

}  // namespace

double detection_loss(const Tensor& logits, int label) {
  if (logits.size() != 2) throw ContractError("detection_loss: expected 2 logits");
  if (label != 0 && label != 1) throw DataError("detection_loss: label must be 0 or 1");
  const double a = logits[0], b = logits[1];
  const double mx = std::max(a, b);
  const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  return lse - logits[label];
}

double mask_bce(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "mask_bce");
  double acc = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kBceClip, 1.0 - kBceClip);
    acc -= gt[i] * std::log(p) + (1.0 - gt[i]) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(pred.size());
}

double mask_dice(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "mask_dice");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  return 1.0 - (2.0 * inter + kDiceSmooth) / (sp + sg + kDiceSmooth);
}

LossBreakdown composite_loss(double det, double bce, double dice, const LossWeights& w,
                             bool authentic) {
  LossBreakdown out;
  out.det = det;
  out.bce = authentic ? 0.0 : bce;
  out.dice = authentic ? 0.0 : dice;
  out.total = out.det + w.lambda_bce * out.bce + w.lambda_dice * out.dice;
  return out;
}

ad::Var mask_bce_loss(ad::Var pred, const Tensor& gt) {
  if (!pred.val().same_shape(gt)) throw ContractError("mask_bce_loss: shape mismatch");
  ad::Var p = ad::clip(pred, kBceClip, 1.0 - kBceClip);
  ad::Var log_p = ad::log(p);
  ad::Var log_q = ad::log(ad::add_scalar(ad::mul_scalar(p, -1.0), 1.0));
  Tensor gt_c = gt.clone();
  Tensor one_minus_gt = gt.clone();
  for (std::int64_t i = 0; i < gt.size(); ++i) one_minus_gt[i] = 1.0 - gt[i];
  ad::Var ll = ad::add(ad::mul_const(log_p, gt_c), ad::mul_const(log_q, one_minus_gt));
  return ad::mul_scalar(ad::mean_all(ll), -1.0);
}

ad::Var mask_dice_loss(ad::Var pred, const Tensor& gt) {
  if (!pred.val().same_shape(gt)) throw ContractError("mask_dice_loss: shape mismatch");
  ad::Var inter = ad::sum_all(ad::mul_const(pred, gt));
  ad::Var denom = ad::add_scalar(ad::sum_all(pred), gt.sum() + kDiceSmooth);
  ad::Var ratio = ad::div(ad::add_scalar(ad::mul_scalar(inter, 2.0), kDiceSmooth), denom);
  return ad::add_scalar(ad::mul_scalar(ratio, -1.0), 1.0);
}

double pixel_f1(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "pixel_f1");
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const bool p = positive(pred[i]), g = positive(gt[i]);
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  const std::int64_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double mask_iou(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "mask_iou");
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const bool p = positive(pred[i]), g = positive(gt[i]);
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<double> pixel_auc(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "pixel_auc");
  const std::int64_t n = pred.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::int64_t a, std::int64_t b) { return pred[a] < pred[b]; });
  std::int64_t n_pos = 0;
  for (std::int64_t i = 0; i < n; ++i) n_pos += positive(gt[i]);
  const std::int64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  // midrank sum over positives
  double rank_sum = 0.0;
  std::int64_t i = 0;
  while (i < n) {
    std::int64_t j = i;
    while (j + 1 < n && pred[order[j + 1]] == pred[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (std::int64_t k = i; k <= j; ++k)
      if (positive(gt[order[k]])) rank_sum += midrank;
    i = j + 1;
  }
  const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::pair<double, double> image_level_metrics(const std::vector<std::array<double, 2>>& logits,
                                              const std::vector<int>& labels) {
  if (logits.empty() || logits.size() != labels.size())
    throw ContractError("image_level_metrics: bad inputs");
  std::int64_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const int pred = logits[k][1] > logits[k][0] ? 1 : 0;
    correct += pred == labels[k];
    tp += pred == 1 && labels[k] == 1;
    fp += pred == 1 && labels[k] == 0;
    fn += pred == 0 && labels[k] == 1;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(logits.size());
  const std::int64_t denom = 2 * tp + fp + fn;
  const double f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  return {acc, f1};
}

MetricsReport summarize_metrics(std::vector<SampleMetrics> samples,
                                bool include_authentic_pixels) {
  MetricsReport report;
  report.samples = std::move(samples);
  double f1 = 0.0, iou = 0.0, auc = 0.0;
  std::int64_t n_pix = 0, n_auc = 0, correct = 0, tp = 0, fp = 0, fn = 0;
  for (const SampleMetrics& s : report.samples) {
    if (include_authentic_pixels || s.label == 1) {
      f1 += s.pixel_f1;
      iou += s.pixel_iou;
      ++n_pix;
    }
    if (s.auc_defined) {
      auc += s.pixel_auc;
      ++n_auc;
    }
    correct += s.predicted == s.label;
    tp += s.predicted == 1 && s.label == 1;
    fp += s.predicted == 1 && s.label == 0;
    fn += s.predicted == 0 && s.label == 1;
  }
  if (n_pix > 0) {
    report.pixel_f1 = f1 / static_cast<double>(n_pix);
    report.pixel_iou = iou / static_cast<double>(n_pix);
  }
  if (n_auc > 0) report.pixel_auc = auc / static_cast<double>(n_auc);
  if (!report.samples.empty())
    report.image_acc = static_cast<double>(correct) / static_cast<double>(report.samples.size());
  const std::int64_t denom = 2 * tp + fp + fn;
  report.image_f1 =
      denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  return report;
}

std::string metrics_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["pixel_f1"] = report.pixel_f1;
  j["pixel_iou"] = report.pixel_iou;
  j["pixel_auc"] = report.pixel_auc;
  j["image_f1"] = report.image_f1;
  j["image_acc"] = report.image_acc;
  nlohmann::json rows = nlohmann::json::array();
  for (const SampleMetrics& s : report.samples) {
    nlohmann::json row = {{"id", s.id},
                          {"label", s.label},
                          {"predicted", s.predicted},
                          {"pixel_f1", s.pixel_f1},
                          {"pixel_iou", s.pixel_iou}};
    if (s.auc_defined)
      row["pixel_auc"] = s.pixel_auc;
    else
      row["pixel_auc"] = nullptr;
    rows.push_back(row);
  }
  j["samples"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace prf
