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

#include <string>
#include <utility>
#include <vector>

#include "prf/nn.hpp"
#include "prf/tensor.hpp"

namespace prf {

// RGB image in [0,1], shape [H,W,3].
struct RgbImage {
  Tensor pixels;

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
};

// Throws DataError unless pixels are finite, within [0,1], and at least 16x16.
void validate_image(const RgbImage& img);

// Stacked low-level evidence channels, shape [H,W,K].
struct ForensicFeatureMap {
  Tensor values;
  std::vector<std::pair<std::string, int>> channel_layout;

  int channels() const { return values.dim(2); }
};

// Binary container: u32le H, W, K header then row-major f32 values; the
// channel layout goes to `path`.json.
void dump_feature_map(const ForensicFeatureMap& map, const std::string& path);
ForensicFeatureMap load_feature_map(const std::string& path);

// The three fixed high-pass residual kernels (first order, second order,
// square), each normalized by its largest coefficient. Shape [3,5,5].
Tensor srm_kernels();

// Fixed conv weights applying each residual kernel per color channel.
// Shape [5,5,3,9]; output channel k*3+c pairs kernel k with color c.
Tensor srm_conv_weights();

// Constraint projection for learned residual kernels, shape [5,5,3,3]:
// every 5x5 slice gets center -1 and off-center taps rescaled to sum to 1
// (uniform additive correction when the raw sum is zero). Idempotent.
Tensor project_bayar(const Tensor& w);

// True when every slice has center -1 exactly and off-center sum 1 within tol.
bool bayar_constraint_holds(const Tensor& w, double tol = 1e-6);

// Four complementary extractors concatenated as
// [residual(9), constrained(3), gradient(3), noise(3)], K = 18.
class FilterBank {
 public:
  static constexpr int kChannels = 18;

  FilterBank(const std::string& name, Rng& rng);

  // Tape-aware path used inside the training graph; [H,W,18]. The fixed
  // extractors enter as constants, the constrained and noise extractors
  // carry gradients.
  ad::Var extract(ad::Tape& t, const RgbImage& img);

  // Eager path for dumps and inspection.
  ForensicFeatureMap extract_features(const RgbImage& img);

  ForensicFeatureMap apply_srm(const RgbImage& img) const;
  ForensicFeatureMap apply_bayar(const RgbImage& img);
  ForensicFeatureMap apply_sobel(const RgbImage& img) const;
  ForensicFeatureMap apply_noise_net(const RgbImage& img);

  // Re-applies the constraint projection in place; call after every
  // optimizer step that touched the constrained kernels.
  void project_constraints();

  Parameter& bayar_weights() { return bayar_; }
  void collect(std::vector<Parameter*>& out);

 private:
  ad::Var bayar_var(ad::Tape& t, ad::Var x);
  ad::Var noise_var(ad::Tape& t, ad::Var x);

  Parameter bayar_;  // [5,5,3,3], constraint-projected
  nn::Conv2d nc1_, nc2_, nc3_, nc4_;
};

}  // namespace prf
