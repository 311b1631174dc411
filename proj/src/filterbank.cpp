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

#include "prf/filterbank.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

#include "json.hpp"
#include "prf/errors.hpp"

namespace prf {

namespace {

constexpr int kBayarKernels = 3;
constexpr int kBayarSize = 5;

Tensor luma(const Tensor& rgb) {
  const int h = rgb.dim(0), w = rgb.dim(1);
  Tensor out({h, w, 1});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.at(y, x, 0) =
          0.299 * rgb.at(y, x, 0) + 0.587 * rgb.at(y, x, 1) + 0.114 * rgb.at(y, x, 2);
  return out;
}

ad::Var fixed_conv(ad::Tape& t, ad::Var x, const Tensor& w) {
  return ad::conv2d(x, t.constant(w), t.constant(Tensor::zeros({w.dim(3)})), 1, 1,
                    ad::Padding::kReflect);
}

}  // namespace

void validate_image(const RgbImage& img) {
  if (!img.pixels.defined() || img.pixels.rank() != 3 || img.pixels.dim(2) != 3)
    throw DataError("image must be [H,W,3]");
  if (img.height() < 16 || img.width() < 16)
    throw DataError("image too small: minimum side is 16");
  for (std::int64_t i = 0; i < img.pixels.size(); ++i) {
    const double v = img.pixels[i];
    if (!std::isfinite(v)) throw DataError("image has non-finite pixels");
    if (v < 0.0 || v > 1.0) throw DataError("image pixels out of [0,1]");
  }
}

Tensor srm_kernels() {
  Tensor k({3, 5, 5});
  // first order: right neighbor minus center
  k.at(0, 2, 2) = -1.0;
  k.at(0, 2, 3) = 1.0;
  // second order: horizontal [1,-2,1] / 2
  k.at(1, 2, 1) = 0.5;
  k.at(1, 2, 2) = -1.0;
  k.at(1, 2, 3) = 0.5;
  // square 5x5 / 12
  const double sq[5][5] = {{-1, 2, -2, 2, -1},
                           {2, -6, 8, -6, 2},
                           {-2, 8, -12, 8, -2},
                           {2, -6, 8, -6, 2},
                           {-1, 2, -2, 2, -1}};
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) k.at(2, y, x) = sq[y][x] / 12.0;
  return k;
}

Tensor srm_conv_weights() {
  const Tensor k = srm_kernels();
  Tensor w({5, 5, 3, 9});
  for (int ki = 0; ki < 3; ++ki)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) w.at(y, x, c, ki * 3 + c) = k.at(ki, y, x);
  return w;
}

Tensor project_bayar(const Tensor& w) {
  if (w.rank() != 4 || w.dim(0) != kBayarSize || w.dim(1) != kBayarSize || w.dim(2) != 3 ||
      w.dim(3) != kBayarKernels)
    throw ContractError("project_bayar: expected [5,5,3,3]");
  Tensor out = w.clone();
  const int c = kBayarSize / 2;
  for (int co = 0; co < kBayarKernels; ++co)
    for (int ci = 0; ci < 3; ++ci) {
      double off_sum = 0.0;
      for (int y = 0; y < kBayarSize; ++y)
        for (int x = 0; x < kBayarSize; ++x)
          if (y != c || x != c) off_sum += out.at(y, x, ci, co);
      if (std::abs(off_sum) < 1e-12) {
        const double corr = 1.0 / (kBayarSize * kBayarSize - 1);
        for (int y = 0; y < kBayarSize; ++y)
          for (int x = 0; x < kBayarSize; ++x)
            if (y != c || x != c) out.at(y, x, ci, co) += corr;
      } else {
        const double scale = 1.0 / off_sum;
        for (int y = 0; y < kBayarSize; ++y)
          for (int x = 0; x < kBayarSize; ++x)
            if (y != c || x != c) out.at(y, x, ci, co) *= scale;
      }
      out.at(c, c, ci, co) = -1.0;
    }
  return out;
}

bool bayar_constraint_holds(const Tensor& w, double tol) {
  if (w.rank() != 4 || w.dim(0) != kBayarSize || w.dim(1) != kBayarSize) return false;
  const int c = kBayarSize / 2;
  for (int co = 0; co < w.dim(3); ++co)
    for (int ci = 0; ci < w.dim(2); ++ci) {
      if (w.at(c, c, ci, co) != -1.0) return false;
      double off_sum = 0.0;
      for (int y = 0; y < kBayarSize; ++y)
        for (int x = 0; x < kBayarSize; ++x)
          if (y != c || x != c) off_sum += w.at(y, x, ci, co);
      if (std::abs(off_sum - 1.0) > tol) return false;
    }
  return true;
}

FilterBank::FilterBank(const std::string& name, Rng& rng)
    : bayar_(name + ".bayar.w", Tensor({5, 5, 3, kBayarKernels})),
      nc1_(name + ".noise1", 3, 3, 3, 8, rng),
      nc2_(name + ".noise2", 3, 3, 8, 8, rng),
      nc3_(name + ".noise3", 3, 3, 8, 8, rng),
      nc4_(name + ".noise4", 3, 3, 8, 3, rng) {
  for (std::int64_t i = 0; i < bayar_.value.size(); ++i)
    bayar_.value[i] = rng.uniform(-0.1, 0.1);
  bayar_.value = project_bayar(bayar_.value);
  bayar_.grad = Tensor::zeros(bayar_.value.shape());
}

ad::Var FilterBank::bayar_var(ad::Tape& t, ad::Var x) {
  if (!bayar_constraint_holds(bayar_.value))
    throw ContractError("constrained kernels violate their projection invariant");
  return ad::conv2d(x, t.param(bayar_), t.constant(Tensor::zeros({kBayarKernels})), 1, 1,
                    ad::Padding::kReflect);
}

ad::Var FilterBank::noise_var(ad::Tape& t, ad::Var x) {
  ad::Var h = ad::gelu(nc1_(t, x));
  h = ad::gelu(nc2_(t, h));
  h = ad::gelu(nc3_(t, h));
  return nc4_(t, h);
}

ad::Var FilterBank::extract(ad::Tape& t, const RgbImage& img) {
  validate_image(img);
  const ForensicFeatureMap srm = apply_srm(img);
  const ForensicFeatureMap sobel = apply_sobel(img);
  ad::Var x = t.constant(img.pixels);
  return ad::concat_lastdim(
      {t.constant(srm.values), bayar_var(t, x), t.constant(sobel.values), noise_var(t, x)});
}

ForensicFeatureMap FilterBank::extract_features(const RgbImage& img) {
  ad::Tape t(false);
  ForensicFeatureMap out;
  out.values = extract(t, img).val();
  out.channel_layout = {{"srm", 9}, {"bayar", 3}, {"sobel", 3}, {"noise", 3}};
  return out;
}

ForensicFeatureMap FilterBank::apply_srm(const RgbImage& img) const {
  validate_image(img);
  ad::Tape t(false);
  ForensicFeatureMap out;
  out.values = fixed_conv(t, t.constant(img.pixels), srm_conv_weights()).val();
  out.channel_layout = {{"srm", 9}};
  return out;
}

ForensicFeatureMap FilterBank::apply_bayar(const RgbImage& img) {
  validate_image(img);
  ad::Tape t(false);
  ForensicFeatureMap out;
  out.values = bayar_var(t, t.constant(img.pixels)).val();
  out.channel_layout = {{"bayar", 3}};
  return out;
}

ForensicFeatureMap FilterBank::apply_sobel(const RgbImage& img) const {
  validate_image(img);
  const int h = img.height(), w = img.width();
  Tensor gw({3, 3, 1, 2});
  const double gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      gw.at(y, x, 0, 0) = gx[y][x];
      gw.at(y, x, 0, 1) = gx[x][y];  // transpose gives the vertical kernel
    }
  ad::Tape t(false);
  const Tensor g = fixed_conv(t, t.constant(luma(img.pixels)), gw).val();
  ForensicFeatureMap out;
  out.values = Tensor({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = g.at(y, x, 0), dy = g.at(y, x, 1);
      out.values.at(y, x, 0) = dx;
      out.values.at(y, x, 1) = dy;
      out.values.at(y, x, 2) = std::sqrt(dx * dx + dy * dy);
    }
  out.channel_layout = {{"sobel", 3}};
  return out;
}

ForensicFeatureMap FilterBank::apply_noise_net(const RgbImage& img) {
  validate_image(img);
  ad::Tape t(false);
  ForensicFeatureMap out;
  out.values = noise_var(t, t.constant(img.pixels)).val();
  out.channel_layout = {{"noise", 3}};
  return out;
}

void FilterBank::project_constraints() { bayar_.value = project_bayar(bayar_.value); }

void FilterBank::collect(std::vector<Parameter*>& out) {
  out.push_back(&bayar_);
  nc1_.collect(out);
  nc2_.collect(out);
  nc3_.collect(out);
  nc4_.collect(out);
}

void dump_feature_map(const ForensicFeatureMap& map, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature map: " + path);
  const std::uint32_t hdr[3] = {static_cast<std::uint32_t>(map.values.dim(0)),
                                static_cast<std::uint32_t>(map.values.dim(1)),
                                static_cast<std::uint32_t>(map.values.dim(2))};
  f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  std::vector<float> buf(static_cast<std::size_t>(map.values.size()));
  for (std::int64_t i = 0; i < map.values.size(); ++i)
    buf[static_cast<std::size_t>(i)] = static_cast<float>(map.values[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& [n, c] : map.channel_layout) layout.push_back({{"name", n}, {"channels", c}});
  std::ofstream side(path + ".json");
  side << layout.dump(2) << "\n";
}

ForensicFeatureMap load_feature_map(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read feature map: " + path);
  std::uint32_t hdr[3] = {0, 0, 0};
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!f || hdr[0] == 0 || hdr[1] == 0 || hdr[2] == 0)
    throw DataError("corrupt feature map header: " + path);
  ForensicFeatureMap map;
  map.values = Tensor({static_cast<int>(hdr[0]), static_cast<int>(hdr[1]),
                       static_cast<int>(hdr[2])});
  std::vector<float> buf(static_cast<std::size_t>(map.values.size()));
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DataError("truncated feature map: " + path);
  for (std::int64_t i = 0; i < map.values.size(); ++i)
    map.values[i] = buf[static_cast<std::size_t>(i)];
  std::ifstream side(path + ".json");
  if (side) {
    nlohmann::json layout = nlohmann::json::parse(side);
    for (const auto& e : layout)
      map.channel_layout.emplace_back(e.at("name").get<std::string>(),
                                      e.at("channels").get<int>());
  }
  return map;
}

}  // namespace prf
