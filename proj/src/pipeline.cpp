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

#include "prf/pipeline.hpp"

#include "prf/errors.hpp"

namespace prf {

namespace {

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

RectifierConfig rectifier_config(const PipelineConfig& cfg) {
  RectifierConfig rc;
  rc.d = cfg.d;
  rc.d_conv = cfg.d_conv > 0 ? cfg.d_conv : cfg.d;
  rc.heads = cfg.heads;
  rc.patch = cfg.patch;
  rc.k_channels = FilterBank::kChannels;
  rc.residual_norm = cfg.residual_norm;
  rc.scales = cfg.scales;
  return rc;
}

SegmenterConfig segmenter_config(const PipelineConfig& cfg) {
  SegmenterConfig sc;
  sc.d = cfg.d;
  sc.c = cfg.c;
  sc.heads = cfg.heads;
  sc.k_channels = FilterBank::kChannels;
  return sc;
}

BackendSpec backend_spec(const PipelineConfig& cfg) {
  BackendSpec spec;
  spec.name = cfg.backend;
  spec.seed = Rng::mix(cfg.seed, 1);
  spec.d = cfg.d;
  spec.command = cfg.backend_command;
  return spec;
}

Tensor small_gaussian(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.02 * rng.gaussian();
  return t;
}

}  // namespace

RgbImage pad_to_16(const RgbImage& image) {
  const int h = image.height(), w = image.width();
  const int ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
  if (ph == h && pw == w) return image;
  RgbImage out;
  out.pixels = Tensor({ph, pw, 3});
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x)
      for (int c = 0; c < 3; ++c)
        out.pixels.at(y, x, c) = image.pixels.at(reflect_index(y, h), reflect_index(x, w), c);
  return out;
}

Pipeline::Pipeline(const PipelineConfig& cfg)
    : cfg_(cfg),
      backend_(load_backend(backend_spec(cfg))),
      fb_([&] {
        Rng rng(Rng::mix(cfg.seed, 3));
        return FilterBank("filterbank", rng);
      }()),
      rect_([&] {
        Rng rng(Rng::mix(cfg.seed, 4));
        return Rectifier("rectifier", rectifier_config(cfg), rng);
      }()),
      seg_([&] {
        Rng rng(Rng::mix(cfg.seed, 5));
        return Segmenter("segmenter", segmenter_config(cfg), rng);
      }()) {
  Rng rng(Rng::mix(cfg.seed, 2));
  const_anl_ = Parameter("pipeline.const_anl", small_gaussian({cfg.d}, rng));
  const_seg_ = Parameter("pipeline.const_seg", small_gaussian({cfg.d}, rng));
}

PipelineVars Pipeline::forward(ad::Tape& t, const RgbImage& image) {
  validate_image(image);
  const int h = image.height(), w = image.width();
  const RgbImage padded = pad_to_16(image);

  ad::Var map = fb_.extract(t, padded);
  ad::Var e_anl0, e_seg0;
  if (cfg_.toggles.use_pg) {
    PromptText prompt{cfg_.prompt};
    auto pair = backend_->generate(t, padded, prompt);
    e_anl0 = pair.first;
    e_seg0 = pair.second;
  } else {
    e_anl0 = t.param(const_anl_);
    e_seg0 = t.param(const_seg_);
  }

  RectifierVars rect = rect_.run(t, e_anl0, e_seg0, map, cfg_.toggles);
  ad::Var probs =
      seg_.run(t, t.constant(padded.pixels), map, rect.e_seg_hat, cfg_.toggles);
  if (padded.height() != h || padded.width() != w)
    probs = ad::slice_lastdim(ad::slice_rows(probs, 0, h), 0, w);
  return {rect.logits, probs};
}

PipelineOutput Pipeline::predict(const RgbImage& image) {
  ad::Tape t(false);
  PipelineVars out = forward(t, image);
  return {out.logits.val().clone(), out.probs.val().clone()};
}

std::vector<Parameter*> Pipeline::parameters() {
  std::vector<Parameter*> out;
  backend_->collect(out);
  out.push_back(&const_anl_);
  out.push_back(&const_seg_);
  fb_.collect(out);
  rect_.collect(out);
  seg_.collect(out);
  return out;
}

std::vector<Parameter*> Pipeline::active_parameters() {
  std::vector<Parameter*> out;
  if (cfg_.toggles.use_pg) {
    backend_->collect(out);
  } else {
    out.push_back(&const_anl_);
    out.push_back(&const_seg_);
  }
  fb_.collect(out);
  rect_.collect(out, cfg_.toggles);
  seg_.collect(out, cfg_.toggles);
  return out;
}

}  // namespace prf
