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

#include "prf/segmenter.hpp"

#include <algorithm>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "prf/errors.hpp"

namespace prf {

namespace {

void validate_config(const SegmenterConfig& cfg) {
  if (cfg.d <= 0) throw ConfigError("segmenter: d must be positive");
  if (cfg.c <= 0 || cfg.c % 4 != 0) throw ConfigError("segmenter: c must be positive, %4 == 0");
  if (cfg.c % cfg.heads != 0) throw ConfigError("segmenter: heads must divide c");
  if (cfg.k_channels <= 0) throw ConfigError("segmenter: channel count must be positive");
}

}  // namespace

Segmenter::Segmenter(const std::string& name, const SegmenterConfig& cfg, Rng& rng)
    : mask_bias_(name + ".mask_bias", Tensor::zeros({1})), cfg_(cfg) {
  validate_config(cfg);
  const int c = cfg.c;
  enc1_ = nn::Conv2d(name + ".enc1", 3, 3, 3, std::min(8, c), rng, 2);
  enc2_ = nn::Conv2d(name + ".enc2", 3, 3, std::min(8, c), std::min(16, c), rng, 2);
  enc3_ = nn::Conv2d(name + ".enc3", 3, 3, std::min(16, c), std::min(32, c), rng, 2);
  enc4_ = nn::Conv2d(name + ".enc4", 3, 3, std::min(32, c), c, rng, 2);

  const int ca = std::min(16, c);
  al1_ = nn::Conv2d(name + ".al1", 3, 3, cfg.k_channels, ca, rng, 2);
  al2_ = nn::Conv2d(name + ".al2", 3, 3, ca, ca, rng, 2);
  al3_ = nn::Conv2d(name + ".al3", 3, 3, ca, ca, rng, 2);
  al4_ = nn::Conv2d(name + ".al4", 3, 3, ca, ca, rng, 2);
  al_proj_ = nn::Conv2d(name + ".al_proj", 1, 1, ca, c, rng);

  disc_proj_ = nn::Conv2d(name + ".disc_proj", 1, 1, 4 * c, c, rng);
  gate_conv_ = nn::Conv2d(name + ".gate_conv", 1, 1, c, 1, rng);
  gate_mlp_ = nn::Mlp(name + ".gate_mlp", c, c, c, rng);

  prompt_proj_ = nn::Linear(name + ".prompt_proj", cfg.d, c, rng);
  self_attn_ = nn::MultiheadAttention(name + ".self_attn", c, cfg.heads, rng);
  t2i_ = nn::MultiheadAttention(name + ".t2i", c, cfg.heads, rng);
  i2t_ = nn::MultiheadAttention(name + ".i2t", c, cfg.heads, rng);
  ln_self_ = nn::LayerNorm(name + ".ln_self", c);
  ln_t2i_ = nn::LayerNorm(name + ".ln_t2i", c);
  ln_mlp_ = nn::LayerNorm(name + ".ln_mlp", c);
  ln_i2t_ = nn::LayerNorm(name + ".ln_i2t", c);
  tok_mlp_ = nn::Mlp(name + ".tok_mlp", c, c, c, rng);

  c_up_ = std::max(4, c / 8);
  up1_ = nn::ConvTranspose2d(name + ".up1", 2, c, std::max(4, c / 2), rng, 2);
  up2_ = nn::ConvTranspose2d(name + ".up2", 2, std::max(4, c / 2), std::max(4, c / 4), rng, 2);
  up3_ = nn::ConvTranspose2d(name + ".up3", 2, std::max(4, c / 4), c_up_, rng, 2);
  up4_ = nn::ConvTranspose2d(name + ".up4", 2, c_up_, c_up_, rng, 2);
  hyper_ = nn::Mlp(name + ".hyper", c, c, c_up_, rng);
}

ad::Var Segmenter::encode_image(ad::Tape& t, ad::Var image) {
  if (image.val().rank() != 3 || image.val().dim(2) != 3)
    throw ContractError("encode_image: expected [H,W,3]");
  const int h = image.val().dim(0), w = image.val().dim(1);
  if (h % 16 != 0 || w % 16 != 0)
    throw DataError("encode_image: dims must be multiples of 16");
  ad::Var x = ad::gelu(enc1_(t, image));
  x = ad::gelu(enc2_(t, x));
  x = ad::gelu(enc3_(t, x));
  return enc4_(t, x);
}

ad::Var Segmenter::align_forensics(ad::Tape& t, ad::Var map, int th, int tw) {
  if (map.val().rank() != 3 || map.val().dim(2) != cfg_.k_channels)
    throw ContractError("align_forensics: channel count mismatch");
  if (th < 1 || tw < 1 || map.val().dim(0) != 16 * th || map.val().dim(1) != 16 * tw)
    throw ConfigError("align_forensics: target is not the 16x downsampled input");
  ad::Var x = ad::gelu(al1_(t, map));
  x = ad::gelu(al2_(t, x));
  x = ad::gelu(al3_(t, x));
  x = ad::gelu(al4_(t, x));
  return al_proj_(t, x);
}

ad::Var Segmenter::build_discrepancy(ad::Tape& t, ad::Var e, ad::Var ft) {
  if (!e.val().same_shape(ft.val()) || e.val().rank() != 3 || e.val().dim(2) != cfg_.c)
    throw ContractError("build_discrepancy: embedding shapes must match");
  ++discrepancy_calls;
  ad::Var cat = ad::concat_lastdim({e, ft, ad::sub(e, ft), ad::mul(e, ft)});
  return disc_proj_(t, cat);
}

std::pair<ad::Var, ad::Var> Segmenter::discrepancy_gates(ad::Tape& t, ad::Var s) {
  ad::Var sp = ad::sigmoid(gate_conv_(t, s));  // [h,w,1]
  ad::Var pooled = ad::reshape(ad::spatial_mean(s), {1, cfg_.c});
  ad::Var sc = ad::reshape(ad::sigmoid(gate_mlp_(t, pooled)), {cfg_.c});
  return {sc, sp};
}

ad::Var Segmenter::amplify(ad::Tape& t, ad::Var e, ad::Var s) {
  ++amplify_calls;
  auto [sc, sp] = discrepancy_gates(t, s);
  ad::Var scaled = ad::mul_channel(e, ad::add_scalar(sc, 1.0));
  return ad::mul_spatial(scaled, ad::add_scalar(sp, 1.0));
}

ad::Var Segmenter::decode_mask(ad::Tape& t, ad::Var e_img, ad::Var e_seg_hat) {
  if (e_img.val().rank() != 3 || e_img.val().dim(2) != cfg_.c)
    throw ContractError("decode_mask: embedding width mismatch");
  if (static_cast<int>(e_seg_hat.val().size()) != cfg_.d)
    throw ContractError("decode_mask: prompt width mismatch");
  const int h = e_img.val().dim(0), w = e_img.val().dim(1);

  ad::Var prompt = prompt_proj_(t, ad::reshape(e_seg_hat, {1, cfg_.d}));
  ad::Var img = ad::add(ad::reshape(e_img, {h * w, cfg_.c}),
                        t.constant(sinusoidal_position_encoding(h, w, cfg_.c)));

  ad::Var tok = ln_self_(t, ad::add(prompt, self_attn_(t, prompt, prompt)));
  tok = ln_t2i_(t, ad::add(tok, t2i_(t, tok, img)));
  tok = ln_mlp_(t, ad::add(tok, tok_mlp_(t, tok)));
  ad::Var img2 = ln_i2t_(t, ad::add(img, i2t_(t, img, tok)));

  ad::Var u = ad::gelu(up1_(t, ad::reshape(img2, {h, w, cfg_.c})));
  u = ad::gelu(up2_(t, u));
  u = ad::gelu(up3_(t, u));
  u = up4_(t, u);  // [16h, 16w, c_up]

  ad::Var weights = ad::reshape(hyper_(t, tok), {c_up_, 1});
  ad::Var logits = ad::reshape(ad::matmul(ad::reshape(u, {16 * h * 16 * w, c_up_}), weights),
                               {16 * h, 16 * w});
  return ad::sigmoid(ad::add_scalar_param(logits, t.param(mask_bias_)));
}

ad::Var Segmenter::run(ad::Tape& t, ad::Var image, ad::Var map, ad::Var e_seg_hat,
                       const AblationToggles& toggles) {
  ad::Var z = encode_image(t, image);
  if (toggles.use_esm) {
    ad::Var ft = align_forensics(t, map, z.val().dim(0), z.val().dim(1));
    ad::Var s = build_discrepancy(t, z, ft);
    z = amplify(t, z, s);
  }
  return decode_mask(t, z, e_seg_hat);
}

void Segmenter::collect(std::vector<Parameter*>& out, const AblationToggles& toggles) {
  enc1_.collect(out);
  enc2_.collect(out);
  enc3_.collect(out);
  enc4_.collect(out);
  if (toggles.use_esm) {
    al1_.collect(out);
    al2_.collect(out);
    al3_.collect(out);
    al4_.collect(out);
    al_proj_.collect(out);
    disc_proj_.collect(out);
    gate_conv_.collect(out);
    gate_mlp_.collect(out);
  }
  prompt_proj_.collect(out);
  self_attn_.collect(out);
  t2i_.collect(out);
  i2t_.collect(out);
  ln_self_.collect(out);
  ln_t2i_.collect(out);
  ln_mlp_.collect(out);
  ln_i2t_.collect(out);
  tok_mlp_.collect(out);
  up1_.collect(out);
  up2_.collect(out);
  up3_.collect(out);
  up4_.collect(out);
  hyper_.collect(out);
  out.push_back(&mask_bias_);
}

Tensor binarize_mask(const Tensor& probabilities, double threshold) {
  if (probabilities.rank() != 2) throw ContractError("binarize_mask: expected [H,W]");
  Tensor out(probabilities.shape());
  for (std::int64_t i = 0; i < out.size(); ++i)
    out[i] = probabilities[i] > threshold ? 1.0 : 0.0;
  return out;
}

MaskPrediction run_segmentation(Segmenter& seg, const RgbImage& image, const Tensor& map,
                                const Tensor& e_seg_hat, const AblationToggles& toggles) {
  validate_image(image);
  ad::Tape t(false);
  ad::Var probs =
      seg.run(t, t.constant(image.pixels), t.constant(map), t.constant(e_seg_hat), toggles);
  return MaskPrediction{probs.val().clone(), 0.5};
}

void write_mask_png(const std::string& path, const Tensor& probabilities, double threshold) {
  if (probabilities.rank() != 2) throw ContractError("write_mask_png: expected [H,W]");
  const int h = probabilities.dim(0), w = probabilities.dim(1);
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      m.at<std::uint8_t>(y, x) = probabilities.at(y, x) > threshold ? 255 : 0;
  if (!cv::imwrite(path, m)) throw DataError("cannot write mask: " + path);
}

Tensor read_mask_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read mask: " + path);
  Tensor out({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out.at(y, x) = m.at<std::uint8_t>(y, x) >= 128 ? 1.0 : 0.0;
  return out;
}

void write_probability_map(const std::string& path, const Tensor& probabilities) {
  if (probabilities.rank() != 2) throw ContractError("write_probability_map: expected [H,W]");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write probability map: " + path);
  const std::uint32_t hdr[2] = {static_cast<std::uint32_t>(probabilities.dim(0)),
                                static_cast<std::uint32_t>(probabilities.dim(1))};
  f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  std::vector<float> buf(static_cast<std::size_t>(probabilities.size()));
  for (std::int64_t i = 0; i < probabilities.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(probabilities[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor read_probability_map(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read probability map: " + path);
  std::uint32_t hdr[2] = {0, 0};
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!f || hdr[0] == 0 || hdr[1] == 0)
    throw DataError("corrupt probability map header: " + path);
  Tensor out({static_cast<int>(hdr[0]), static_cast<int>(hdr[1])});
  std::vector<float> buf(static_cast<std::size_t>(out.size()));
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DataError("truncated probability map: " + path);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = buf[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace prf
