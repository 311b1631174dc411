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

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prf/filterbank.hpp"
#include "prf/nn.hpp"
#include "prf/rectifier.hpp"

namespace prf {

struct SegmenterConfig {
  int d = 256;         // prompt embedding width
  int c = 64;          // image embedding channels
  int heads = 8;       // decoder attention heads
  int k_channels = 18; // forensic feature channels
};

// Per-pixel manipulation probabilities at full image resolution. The
// threshold only affects the binarized view, never the probabilities.
struct MaskPrediction {
  Tensor probabilities;  // [H,W] in [0,1]
  double threshold = 0.5;
};

// probabilities > threshold -> 1.0, else 0.0
Tensor binarize_mask(const Tensor& probabilities, double threshold = 0.5);

// Strided image encoder, forensic aligner, discrepancy-driven embedding
// amplification, and the prompt-guided mask decoder.
class Segmenter {
 public:
  Segmenter(const std::string& name, const SegmenterConfig& cfg, Rng& rng);

  const SegmenterConfig& config() const { return cfg_; }

  // [H,W,3] -> [H/16, W/16, c]; H and W must be multiples of 16.
  ad::Var encode_image(ad::Tape& t, ad::Var image);

  // [16*th, 16*tw, K] -> [th, tw, c]
  ad::Var align_forensics(ad::Tape& t, ad::Var map, int th, int tw);

  // Channel-mixed stack of [E, Ft, E-Ft, E*Ft] -> [h,w,c]
  ad::Var build_discrepancy(ad::Tape& t, ad::Var e, ad::Var ft);

  // Dual gates of the discrepancy: channel gate [c] and spatial gate
  // [h,w,1], both sigmoid outputs in (0,1).
  std::pair<ad::Var, ad::Var> discrepancy_gates(ad::Tape& t, ad::Var s);

  // E * (1 + channel gate) * (1 + spatial gate); elementwise ratio to E is
  // inside (1, 4) and the sign never flips.
  ad::Var amplify(ad::Tape& t, ad::Var e, ad::Var s);

  // Prompt-guided decoding back to full resolution: [h,w,c] + [d] -> [H,W]
  // probabilities.
  ad::Var decode_mask(ad::Tape& t, ad::Var e_img, ad::Var e_seg_hat);

  ad::Var run(ad::Tape& t, ad::Var image, ad::Var map, ad::Var e_seg_hat,
              const AblationToggles& toggles);

  // Parameters reachable under the given toggles.
  void collect(std::vector<Parameter*>& out, const AblationToggles& toggles);
  void collect(std::vector<Parameter*>& out) { collect(out, AblationToggles{}); }

  // Invocation counters; bypass tests assert the toggle-off path skips these.
  std::int64_t discrepancy_calls = 0;
  std::int64_t amplify_calls = 0;

  // Layers are public: tests recompute closed forms from the raw weights.
  nn::Conv2d enc1_, enc2_, enc3_, enc4_;
  nn::Conv2d al1_, al2_, al3_, al4_, al_proj_;
  nn::Conv2d disc_proj_;
  nn::Conv2d gate_conv_;  // spatial gate pre-activation, 1x1 c -> 1
  nn::Mlp gate_mlp_;      // channel gate pre-activation on pooled S
  nn::Linear prompt_proj_;
  nn::MultiheadAttention self_attn_, t2i_, i2t_;
  nn::LayerNorm ln_self_, ln_t2i_, ln_mlp_, ln_i2t_;
  nn::Mlp tok_mlp_;
  nn::ConvTranspose2d up1_, up2_, up3_, up4_;
  nn::Mlp hyper_;
  Parameter mask_bias_;

 private:
  SegmenterConfig cfg_;
  int c_up_ = 0;
};

// Eager wrapper for inspection and tests.
MaskPrediction run_segmentation(Segmenter& seg, const RgbImage& image, const Tensor& map,
                                const Tensor& e_seg_hat, const AblationToggles& toggles);

// 8-bit single-channel PNG, 255 = manipulated (probability above threshold).
void write_mask_png(const std::string& path, const Tensor& probabilities,
                    double threshold = 0.5);
// -> [H,W] of 0/1
Tensor read_mask_png(const std::string& path);

// Raw probabilities: u32le H, W header then row-major float32.
void write_probability_map(const std::string& path, const Tensor& probabilities);
Tensor read_probability_map(const std::string& path);

}  // namespace prf
