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

#include "prf/rectifier.hpp"

#include "prf/errors.hpp"

namespace prf {

namespace {

void validate_config(const RectifierConfig& cfg) {
  if (cfg.d <= 0 || cfg.d % 4 != 0) throw ConfigError("rectifier: d must be positive, %4 == 0");
  if (cfg.d % cfg.heads != 0) throw ConfigError("rectifier: heads must divide d");
  if (cfg.d_conv <= 0) throw ConfigError("rectifier: d_conv must be positive");
  if (cfg.patch <= 0) throw ConfigError("rectifier: patch size must be positive");
  if (cfg.k_channels <= 0) throw ConfigError("rectifier: channel count must be positive");
  for (int k = 0; k < 3; ++k) {
    const ScaleConfig& s = cfg.scales[static_cast<std::size_t>(k)];
    if (s.kernel_size < 1 || s.kernel_size % 2 == 0)
      throw ConfigError("rectifier: scale kernels must be odd");
    if (s.dilation < 1) throw ConfigError("rectifier: dilation must be positive");
    if (s.scale_index != k + 1) throw ConfigError("rectifier: scale indices must be 1,2,3");
  }
}

}  // namespace

Rectifier::Rectifier(const std::string& name, const RectifierConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  validate_config(cfg);
  const int pp = cfg.patch * cfg.patch;
  pe_gate_ = nn::Linear(name + ".pe_gate", pp * cfg.k_channels, cfg.d, rng);
  gate_mca_ = nn::MultiheadAttention(name + ".gate_mca", cfg.d, cfg.heads, rng);
  phi_ = nn::Mlp(name + ".phi", cfg.d, cfg.d, 3 * cfg.k_channels, rng);
  for (int k = 0; k < 3; ++k) {
    Scale& s = scales_[static_cast<std::size_t>(k)];
    const std::string base = name + ".scale" + std::to_string(k + 1);
    s.cfg = cfg.scales[static_cast<std::size_t>(k)];
    s.conv = nn::Conv2d(base + ".conv", s.cfg.kernel_size, s.cfg.kernel_size, cfg.k_channels,
                        cfg.d_conv, rng, 1, s.cfg.dilation);
    s.pe = nn::Linear(base + ".pe", pp * cfg.d_conv, cfg.d, rng);
    s.msa = nn::MultiheadAttention(base + ".msa", cfg.d, cfg.heads, rng);
    s.msa_ln = nn::LayerNorm(base + ".msa_ln", cfg.d);
    s.mca = nn::MultiheadAttention(base + ".mca", cfg.d, cfg.heads, rng);
    s.mca_ln = nn::LayerNorm(base + ".mca_ln", cfg.d);
  }
  h_c_ = nn::Linear(name + ".h_c", cfg.d, 2, rng);
  h_s_ = nn::Mlp(name + ".h_s", cfg.d, cfg.d, cfg.d, rng);
}

ad::Var Rectifier::patch_tokens(ad::Tape& t, ad::Var map) {
  const int h = map.val().dim(0), w = map.val().dim(1);
  if (cfg_.patch > h || cfg_.patch > w)
    throw ConfigError("rectifier: patch size exceeds feature map");
  const int gh = (h + cfg_.patch - 1) / cfg_.patch;
  const int gw = (w + cfg_.patch - 1) / cfg_.patch;
  ad::Var tokens = pe_gate_(t, ad::extract_patches(map, cfg_.patch));
  return ad::add(tokens, t.constant(sinusoidal_position_encoding(gh, gw, cfg_.d)));
}

std::array<ad::Var, 3> Rectifier::compute_gates(ad::Tape& t, ad::Var e_anl0, ad::Var map) {
  if (static_cast<int>(e_anl0.val().size()) != cfg_.d)
    throw ContractError("compute_gates: embedding width mismatch");
  if (map.val().dim(2) != cfg_.k_channels)
    throw ContractError("compute_gates: channel count mismatch");
  ad::Var tokens = patch_tokens(t, map);
  ad::Var q = ad::reshape(e_anl0, {1, cfg_.d});
  ad::Var attended = gate_mca_(t, q, tokens);
  ad::Var gates = phi_(t, attended);  // [1, 3K]
  const int K = cfg_.k_channels;
  return {ad::reshape(ad::slice_lastdim(gates, 0, K), {K}),
          ad::reshape(ad::slice_lastdim(gates, K, 2 * K), {K}),
          ad::reshape(ad::slice_lastdim(gates, 2 * K, 3 * K), {K})};
}

ad::Var Rectifier::gate_features(ad::Var map, ad::Var w) {
  if (map.val().dim(2) != static_cast<int>(w.val().size()))
    throw ContractError("gate_features: gate length must equal channel count");
  return ad::mul_channel(map, ad::sigmoid(w));
}

ad::Var Rectifier::scale_conv(ad::Tape& t, ad::Var map, int k) {
  if (k < 0 || k >= 3) throw ConfigError("rectifier: scale index out of range");
  return scales_[static_cast<std::size_t>(k)].conv(t, map);
}

ad::Var Rectifier::refine_scale(ad::Tape& t, ad::Var map, int k) {
  if (k < 0 || k >= 3) throw ConfigError("rectifier: scale index out of range");
  Scale& s = scales_[static_cast<std::size_t>(k)];
  ad::Var conv = s.conv(t, map);
  const int h = conv.val().dim(0), w = conv.val().dim(1);
  const int gh = (h + cfg_.patch - 1) / cfg_.patch;
  const int gw = (w + cfg_.patch - 1) / cfg_.patch;
  ad::Var tokens = s.pe(t, ad::extract_patches(conv, cfg_.patch));
  tokens = ad::add(tokens, t.constant(sinusoidal_position_encoding(gh, gw, cfg_.d)));
  ad::Var attended = s.msa(t, tokens, tokens);
  if (!cfg_.residual_norm) return attended;
  return s.msa_ln(t, ad::add(tokens, attended));
}

RectifierState Rectifier::rectify_embeddings(ad::Tape& t, const RectifierState& state,
                                             ad::Var tokens) {
  if (state.k < 0 || state.k >= 3) throw ContractError("rectify_embeddings: bad stage");
  Scale& s = scales_[static_cast<std::size_t>(state.k)];
  ad::Var attended = s.mca(t, state.pair, tokens);
  ad::Var next =
      cfg_.residual_norm ? s.mca_ln(t, ad::add(state.pair, attended)) : attended;
  return RectifierState{next, state.k + 1};
}

RectifierVars Rectifier::project_heads(ad::Tape& t, const RectifierState& state) {
  if (state.k != 3) throw ContractError("project_heads: rectification incomplete");
  ad::Var anl = ad::slice_rows(state.pair, 0, 1);
  ad::Var seg = ad::slice_rows(state.pair, 1, 2);
  RectifierVars out;
  out.logits = ad::reshape(h_c_(t, anl), {2});
  out.e_seg_hat = ad::reshape(h_s_(t, seg), {cfg_.d});
  return out;
}

RectifierVars Rectifier::run(ad::Tape& t, ad::Var e_anl0, ad::Var e_seg0, ad::Var map,
                             const AblationToggles& toggles) {
  RectifierState state{ad::stack_rows({e_anl0, e_seg0}), 0};
  if (!toggles.use_frm) {
    state.k = 3;  // bypass: heads read the proposal embeddings directly
    return project_heads(t, state);
  }
  std::array<ad::Var, 3> gates{};
  if (toggles.use_fg) gates = compute_gates(t, e_anl0, map);
  for (int k = 0; k < 3; ++k) {
    ad::Var gated = toggles.use_fg ? gate_features(map, gates[static_cast<std::size_t>(k)])
                                   : map;  // all-pass
    ad::Var tokens = refine_scale(t, gated, k);
    state = rectify_embeddings(t, state, tokens);
  }
  return project_heads(t, state);
}

void Rectifier::collect(std::vector<Parameter*>& out, const AblationToggles& toggles) {
  if (toggles.use_frm && toggles.use_fg) {
    pe_gate_.collect(out);
    gate_mca_.collect(out);
    phi_.collect(out);
  }
  if (toggles.use_frm) {
    for (Scale& s : scales_) {
      s.conv.collect(out);
      s.pe.collect(out);
      s.msa.collect(out);
      s.msa_ln.collect(out);
      s.mca.collect(out);
      s.mca_ln.collect(out);
    }
  }
  h_c_.collect(out);
  h_s_.collect(out);
}

RectifierOutput run_rectification(Rectifier& rect, const Tensor& e_anl0, const Tensor& e_seg0,
                                  const Tensor& map, const AblationToggles& toggles) {
  ad::Tape t(false);
  RectifierVars v = rect.run(t, t.constant(e_anl0), t.constant(e_seg0), t.constant(map), toggles);
  return RectifierOutput{v.logits.val().clone(), v.e_seg_hat.val().clone()};
}

}  // namespace prf
