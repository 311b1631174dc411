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

#include <array>
#include <string>
#include <vector>

#include "prf/nn.hpp"

namespace prf {

// Which pipeline stages run; disabling one must leave its parameters out of
// the graph entirely so ablation training never touches them.
struct AblationToggles {
  bool use_frm = true;  // multi-scale rectification chain
  bool use_fg = true;   // analysis-informed channel gating
  bool use_esm = true;  // discrepancy-driven embedding enhancement
  bool use_pg = true;   // proposal backend (off: learned constant embeddings)
};

struct ScaleConfig {
  int kernel_size = 3;
  int dilation = 1;
  int scale_index = 1;
};

inline std::array<ScaleConfig, 3> default_scales() {
  return {ScaleConfig{3, 1, 1}, ScaleConfig{7, 1, 2}, ScaleConfig{9, 2, 3}};
}

struct RectifierConfig {
  int d = 256;
  int d_conv = 256;
  int heads = 8;
  int patch = 8;
  int k_channels = 18;
  bool residual_norm = true;
  std::array<ScaleConfig, 3> scales = default_scales();
};

// Embedding pair [2,d] after k completed refinement scales.
struct RectifierState {
  ad::Var pair;
  int k = 0;
};

struct RectifierVars {
  ad::Var logits;     // [2]
  ad::Var e_seg_hat;  // [d]
};

struct RectifierOutput {
  Tensor logits;
  Tensor e_seg_hat;
};

// Channel gating plus the three-scale refinement chain between the proposal
// embeddings and the output heads.
class Rectifier {
 public:
  Rectifier(const std::string& name, const RectifierConfig& cfg, Rng& rng);

  const RectifierConfig& config() const { return cfg_; }

  // Patch tokens of a [H,W,K] map: flatten p x p patches, project to d, add
  // the fixed grid encoding.
  ad::Var patch_tokens(ad::Tape& t, ad::Var map);

  // Pre-sigmoid per-channel gate vectors, one per scale.
  std::array<ad::Var, 3> compute_gates(ad::Tape& t, ad::Var e_anl0, ad::Var map);

  // map[:,:,c] * sigmoid(w[c])
  static ad::Var gate_features(ad::Var map, ad::Var w);

  // The scale-specific convolution alone (exposed for receptive-field
  // inspection); k indexes scales_ from 0.
  ad::Var scale_conv(ad::Tape& t, ad::Var map, int k);

  // Convolution, patch tokens, one self-attention block.
  ad::Var refine_scale(ad::Tape& t, ad::Var map, int k);

  // Jointly update [e_anl, e_seg] against the refined tokens of scale k.
  RectifierState rectify_embeddings(ad::Tape& t, const RectifierState& state, ad::Var tokens);

  // Heads require the completed chain (state.k == 3).
  RectifierVars project_heads(ad::Tape& t, const RectifierState& state);

  RectifierVars run(ad::Tape& t, ad::Var e_anl0, ad::Var e_seg0, ad::Var map,
                    const AblationToggles& toggles);

  // Parameters reachable under the given toggles.
  void collect(std::vector<Parameter*>& out, const AblationToggles& toggles);
  void collect(std::vector<Parameter*>& out) { collect(out, AblationToggles{}); }

  struct Scale {
    ScaleConfig cfg;
    nn::Conv2d conv;
    nn::Linear pe;
    nn::MultiheadAttention msa;
    nn::LayerNorm msa_ln;
    nn::MultiheadAttention mca;
    nn::LayerNorm mca_ln;
  };

  // Layers are public: tests recompute closed forms from the raw weights.
  nn::Linear pe_gate_;
  nn::MultiheadAttention gate_mca_;
  nn::Mlp phi_;
  std::array<Scale, 3> scales_;
  nn::Linear h_c_;
  nn::Mlp h_s_;

 private:
  RectifierConfig cfg_;
};

// Eager wrapper for inspection and tests.
RectifierOutput run_rectification(Rectifier& rect, const Tensor& e_anl0, const Tensor& e_seg0,
                                  const Tensor& map, const AblationToggles& toggles);

}  // namespace prf
