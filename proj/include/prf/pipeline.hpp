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

#include <memory>
#include <string>
#include <vector>

#include "prf/filterbank.hpp"
#include "prf/proposal.hpp"
#include "prf/rectifier.hpp"
#include "prf/segmenter.hpp"

namespace prf {

struct PipelineConfig {
  int d = 256;
  int d_conv = 0;  // 0 means match d
  int c = 64;
  int heads = 8;
  int patch = 8;
  bool residual_norm = true;
  std::array<ScaleConfig, 3> scales = default_scales();
  AblationToggles toggles;
  std::string backend = "toy";
  std::string backend_command;  // external backend only
  std::string prompt = "Inspect the image for manipulated regions and localize them.";
  std::uint64_t seed = 0;
};

struct PipelineVars {
  ad::Var logits;  // [2]
  ad::Var probs;   // [H,W], original image dims
};

struct PipelineOutput {
  Tensor logits;         // [2]
  Tensor probabilities;  // [H,W]
};

// Full detector: forensic filter bank, proposal backend, embedding
// rectification, and prompt-guided segmentation. Images of any size at
// least 16x16 are reflect-padded to multiples of 16 internally and the
// predicted mask is cropped back.
class Pipeline {
 public:
  explicit Pipeline(const PipelineConfig& cfg);

  const PipelineConfig& config() const { return cfg_; }

  PipelineVars forward(ad::Tape& t, const RgbImage& image);

  // Inference path on a no-grad tape.
  PipelineOutput predict(const RgbImage& image);

  // Every parameter in construction order, toggles ignored. Used for
  // checkpoints so ablations never change the archive layout.
  std::vector<Parameter*> parameters();

  // Parameters reachable under the configured toggles; the optimizer must
  // step exactly these.
  std::vector<Parameter*> active_parameters();

  FilterBank& filter_bank() { return fb_; }
  Rectifier& rectifier() { return rect_; }
  Segmenter& segmenter() { return seg_; }
  ProposalBackend& backend() { return *backend_; }
  Parameter& const_anl() { return const_anl_; }
  Parameter& const_seg() { return const_seg_; }

 private:
  PipelineConfig cfg_;
  std::unique_ptr<ProposalBackend> backend_;
  Parameter const_anl_, const_seg_;  // fixed-prompt stand-ins when the backend is off
  FilterBank fb_;
  Rectifier rect_;
  Segmenter seg_;
};

// Reflect-pad to the next multiples of 16; identity when already aligned.
RgbImage pad_to_16(const RgbImage& image);

}  // namespace prf
