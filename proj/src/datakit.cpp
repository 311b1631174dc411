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

#include "prf/datakit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <fftw3.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"
#include "prf/errors.hpp"
#include "prf/segmenter.hpp"

namespace prf {

namespace {

constexpr double kFeatherSigma = 2.0;

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

double clip01(double v) { return std::min(1.0, std::max(0.0, v)); }

// out = (1-a)*base + a*patch, exact at a == 0 so untouched pixels stay
// bitwise equal to the base image.
Tensor blend(const Tensor& base, const Tensor& patch, const Tensor& alpha) {
  Tensor out = base.clone();
  const int h = base.dim(0), w = base.dim(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = alpha.at(y, x);
      if (a == 0.0) continue;
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = (1.0 - a) * base.at(y, x, c) + a * patch.at(y, x, c);
    }
  return out;
}

// Even-odd scanline fill of a closed polygon given as (x, y) vertices.
Tensor rasterize_polygon(const std::vector<double>& xs, const std::vector<double>& ys, int h,
                         int w) {
  Tensor mask = Tensor::zeros({h, w});
  const std::size_t n = xs.size();
  for (int y = 0; y < h; ++y) {
    const double yc = y + 0.5;
    std::vector<double> hits;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (i + 1) % n;
      const double y0 = ys[i], y1 = ys[j];
      if ((y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc))
        hits.push_back(xs[i] + (yc - y0) / (y1 - y0) * (xs[j] - xs[i]));
    }
    std::sort(hits.begin(), hits.end());
    for (std::size_t k = 0; k + 1 < hits.size(); k += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(hits[k] - 0.5)));
      const int x1 = std::min(w - 1, static_cast<int>(std::floor(hits[k + 1] - 0.5)));
      for (int x = x0; x <= x1; ++x) mask.at(y, x) = 1.0;
    }
  }
  return mask;
}

double mask_area(const Tensor& mask) {
  double area = 0.0;
  for (std::int64_t i = 0; i < mask.size(); ++i) area += mask[i];
  return area;
}

// Zero-mean, unit-variance field with a 1/f amplitude spectrum.
Tensor pink_noise_field(int h, int w, Rng& rng) {
  std::vector<double> real(static_cast<std::size_t>(h) * w);
  for (double& v : real) v = rng.gaussian();
  const int wc = w / 2 + 1;
  std::vector<double> spec(2 * static_cast<std::size_t>(h) * wc);
  fftw_plan fwd = fftw_plan_dft_r2c_2d(h, w, real.data(),
                                       reinterpret_cast<fftw_complex*>(spec.data()),
                                       FFTW_ESTIMATE);
  fftw_execute(fwd);
  fftw_destroy_plan(fwd);
  for (int ky = 0; ky < h; ++ky)
    for (int kx = 0; kx < wc; ++kx) {
      const double fy = static_cast<double>(ky <= h / 2 ? ky : h - ky) / h;
      const double fx = static_cast<double>(kx) / w;
      const double f = std::sqrt(fy * fy + fx * fx);
      const double scale = f == 0.0 ? 0.0 : 1.0 / std::sqrt(f);
      spec[2 * (static_cast<std::size_t>(ky) * wc + kx)] *= scale;
      spec[2 * (static_cast<std::size_t>(ky) * wc + kx) + 1] *= scale;
    }
  fftw_plan bwd = fftw_plan_dft_c2r_2d(h, w, reinterpret_cast<fftw_complex*>(spec.data()),
                                       real.data(), FFTW_ESTIMATE);
  fftw_execute(bwd);
  fftw_destroy_plan(bwd);

  const double n = static_cast<double>(h) * w;
  double mean = 0.0;
  for (double& v : real) {
    v /= n;
    mean += v;
  }
  mean /= n;
  double var = 0.0;
  for (double v : real) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var);
  Tensor field({h, w});
  for (std::int64_t i = 0; i < field.size(); ++i)
    field[i] = (real[static_cast<std::size_t>(i)] - mean) * inv;
  return field;
}

void floyd_steinberg(Tensor& pixels, int bits) {
  const int h = pixels.dim(0), w = pixels.dim(1);
  const double levels = static_cast<double>((1 << bits) - 1);
  for (int c = 0; c < 3; ++c) {
    Tensor plane({h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) plane.at(y, x) = pixels.at(y, x, c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double old = plane.at(y, x);
        const double q = std::round(clip01(old) * levels) / levels;
        plane.at(y, x) = q;
        const double err = old - q;
        if (x + 1 < w) plane.at(y, x + 1) += err * (7.0 / 16.0);
        if (y + 1 < h) {
          if (x > 0) plane.at(y + 1, x - 1) += err * (3.0 / 16.0);
          plane.at(y + 1, x) += err * (5.0 / 16.0);
          if (x + 1 < w) plane.at(y + 1, x + 1) += err * (1.0 / 16.0);
        }
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) pixels.at(y, x, c) = plane.at(y, x);
  }
}

cv::Mat to_mat8(const Tensor& pixels) {
  const int h = pixels.dim(0), w = pixels.dim(1);
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      cv::Vec3b& px = m.at<cv::Vec3b>(y, x);
      px[0] = static_cast<std::uint8_t>(std::lround(clip01(pixels.at(y, x, 2)) * 255.0));
      px[1] = static_cast<std::uint8_t>(std::lround(clip01(pixels.at(y, x, 1)) * 255.0));
      px[2] = static_cast<std::uint8_t>(std::lround(clip01(pixels.at(y, x, 0)) * 255.0));
    }
  return m;
}

Tensor from_mat8(const cv::Mat& m) {
  Tensor pixels({m.rows, m.cols, 3});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const cv::Vec3b& px = m.at<cv::Vec3b>(y, x);
      pixels.at(y, x, 0) = px[2] / 255.0;
      pixels.at(y, x, 1) = px[1] / 255.0;
      pixels.at(y, x, 2) = px[0] / 255.0;
    }
  return pixels;
}

RgbImage jpeg2000_roundtrip(const RgbImage& image, int severity) {
  const int h = image.height(), w = image.width();
  // The codec rejects tiny tiles; reflect-pad up to 32 px and crop back.
  const int ph = std::max(h, 32), pw = std::max(w, 32);
  Tensor padded({ph, pw, 3});
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x)
      for (int c = 0; c < 3; ++c)
        padded.at(y, x, c) = image.pixels.at(reflect_index(y, h), reflect_index(x, w), c);

  const double ratio = 10.0 * std::pow(2.0, severity - 1);
  const int quality = std::max(1, std::min(1000, static_cast<int>(std::lround(1000.0 / ratio))));
  std::vector<std::uint8_t> buf;
  bool ok = false;
  try {
    ok = cv::imencode(".jp2", to_mat8(padded),
                      buf, {cv::IMWRITE_JPEG2000_COMPRESSION_X1000, quality});
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok || buf.empty()) throw Error("perturb: jpeg2000 codec unavailable");
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (decoded.empty() || decoded.rows != ph || decoded.cols != pw)
    throw Error("perturb: jpeg2000 decode failed");
  Tensor full = from_mat8(decoded);
  RgbImage out;
  out.pixels = Tensor({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.pixels.at(y, x, c) = full.at(y, x, c);
  return out;
}

nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::json j;
  j["image_path"] = e.image_path;
  j["mask_path"] = e.mask_path.empty() ? nlohmann::json() : nlohmann::json(e.mask_path);
  j["label"] = e.label == 1 ? "manipulated" : "authentic";
  j["provenance"] = e.provenance;
  return j;
}

}  // namespace

PerturbationKind perturbation_from_name(const std::string& name) {
  if (name == "brightness") return PerturbationKind::kBrightness;
  if (name == "contrast") return PerturbationKind::kContrast;
  if (name == "darken") return PerturbationKind::kDarken;
  if (name == "dither") return PerturbationKind::kDither;
  if (name == "jpeg2000") return PerturbationKind::kJpeg2000;
  if (name == "pink_noise") return PerturbationKind::kPinkNoise;
  throw ConfigError("unknown perturbation kind: " + name);
}

std::string perturbation_name(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::kBrightness: return "brightness";
    case PerturbationKind::kContrast: return "contrast";
    case PerturbationKind::kDarken: return "darken";
    case PerturbationKind::kDither: return "dither";
    case PerturbationKind::kJpeg2000: return "jpeg2000";
    case PerturbationKind::kPinkNoise: return "pink_noise";
  }
  throw ConfigError("unknown perturbation kind");
}

const std::vector<PerturbationKind>& all_perturbations() {
  static const std::vector<PerturbationKind> kinds = {
      PerturbationKind::kBrightness, PerturbationKind::kContrast,
      PerturbationKind::kDarken,     PerturbationKind::kDither,
      PerturbationKind::kJpeg2000,   PerturbationKind::kPinkNoise};
  return kinds;
}

RgbImage make_authentic(int height, int width, Rng& rng) {
  Tensor pixels({height, width, 3});
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.75);
    gx[c] = rng.uniform(-0.25, 0.25);
    gy[c] = rng.uniform(-0.25, 0.25);
  }
  const long blobs = rng.uniform_int(3, 7);
  std::vector<double> bx(static_cast<std::size_t>(blobs)), by(bx.size()), br(bx.size());
  std::vector<std::array<double, 3>> bamp(bx.size());
  for (std::size_t b = 0; b < bx.size(); ++b) {
    bx[b] = rng.uniform(0.0, width - 1.0);
    by[b] = rng.uniform(0.0, height - 1.0);
    br[b] = rng.uniform(0.08, 0.35) * std::min(height, width);
    for (int c = 0; c < 3; ++c) bamp[b][static_cast<std::size_t>(c)] = rng.uniform(-0.3, 0.3);
  }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double blob[3] = {0.0, 0.0, 0.0};
      for (std::size_t b = 0; b < bx.size(); ++b) {
        const double dx = x - bx[b], dy = y - by[b];
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * br[b] * br[b]));
        for (int c = 0; c < 3; ++c) blob[c] += bamp[b][static_cast<std::size_t>(c)] * g;
      }
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + gx[c] * (static_cast<double>(x) / (width - 1) - 0.5) +
                         gy[c] * (static_cast<double>(y) / (height - 1) - 0.5) + blob[c] +
                         rng.uniform(-0.02, 0.02);
        pixels.at(y, x, c) = clip01(v);
      }
    }
  RgbImage img;
  img.pixels = pixels;
  validate_image(img);
  return img;
}

Tensor random_region(int height, int width, Rng& rng, double min_frac, double max_frac) {
  const double total = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const long nv = rng.uniform_int(5, 10);
    const double cx = rng.uniform(0.2, 0.8) * width;
    const double cy = rng.uniform(0.2, 0.8) * height;
    const double base_r = rng.uniform(0.10, 0.32) * std::min(height, width);
    std::vector<double> xs(static_cast<std::size_t>(nv)), ys(xs.size());
    for (long k = 0; k < nv; ++k) {
      const double step = 2.0 * 3.14159265358979323846 / static_cast<double>(nv);
      const double angle = step * static_cast<double>(k) + rng.uniform(-0.3, 0.3) * step;
      const double r = base_r * rng.uniform(0.55, 1.35);
      xs[static_cast<std::size_t>(k)] = cx + r * std::cos(angle);
      ys[static_cast<std::size_t>(k)] = cy + r * std::sin(angle);
    }
    Tensor mask = rasterize_polygon(xs, ys, height, width);
    const double frac = mask_area(mask) / total;
    if (frac >= min_frac && frac <= max_frac) return mask;
  }
  // Deterministic fallback: a centered rectangle in the middle of the band.
  const double side = std::sqrt(0.5 * (min_frac + max_frac) * total);
  const int sh = std::max(1, std::min(height, static_cast<int>(std::lround(side))));
  const int sw = std::max(1, std::min(width, static_cast<int>(std::lround(side))));
  Tensor mask = Tensor::zeros({height, width});
  for (int y = (height - sh) / 2; y < (height - sh) / 2 + sh; ++y)
    for (int x = (width - sw) / 2; x < (width - sw) / 2 + sw; ++x) mask.at(y, x) = 1.0;
  return mask;
}

Tensor dilate_mask(const Tensor& mask, int radius) {
  if (mask.rank() != 2) throw ContractError("dilate_mask: expected [H,W]");
  const int h = mask.dim(0), w = mask.dim(1);
  Tensor out = Tensor::zeros({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (mask.at(y, x) == 0.0) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) out.at(yy, xx) = 1.0;
        }
    }
  return out;
}

Tensor gaussian_blur(const Tensor& plane, double sigma) {
  if (plane.rank() != 2) throw ContractError("gaussian_blur: expected [H,W]");
  if (sigma <= 0.0) throw ContractError("gaussian_blur: sigma must be positive");
  const int h = plane.dim(0), w = plane.dim(1);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= sum;

  Tensor tmp({h, w}), out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * plane.at(y, reflect_index(x + i, w));
      tmp.at(y, x) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(reflect_index(y + i, h), x);
      out.at(y, x) = acc;
    }
  return out;
}

Sample synth_splice(const RgbImage& host, const RgbImage& donor, Rng& rng) {
  validate_image(host);
  validate_image(donor);
  if (host.height() != donor.height() || host.width() != donor.width())
    throw DataError("splice: host and donor dims differ");
  Tensor mask = random_region(host.height(), host.width(), rng);
  Tensor alpha = gaussian_blur(mask, kFeatherSigma);
  Sample s;
  s.image.pixels = blend(host.pixels, donor.pixels, alpha);
  s.mask = mask;
  s.label = 1;
  s.provenance = "splice";
  return s;
}

Sample synth_copy_move(const RgbImage& image, Rng& rng, CopyMoveOffset* offset) {
  validate_image(image);
  const int h = image.height(), w = image.width();
  Tensor src = random_region(h, w, rng, 0.01, 0.15);
  int y0 = h, y1 = -1, x0 = w, x1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (src.at(y, x) != 0.0) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }

  for (int attempt = 0; attempt < 100; ++attempt) {
    const int dy = static_cast<int>(rng.uniform_int(-y0, h - 1 - y1));
    const int dx = static_cast<int>(rng.uniform_int(-x0, w - 1 - x1));
    if (dy == 0 && dx == 0) continue;
    Tensor dest = Tensor::zeros({h, w});
    bool disjoint = true;
    for (int y = y0; y <= y1 && disjoint; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (src.at(y, x) == 0.0) continue;
        if (src.at(y + dy, x + dx) != 0.0) {
          disjoint = false;
          break;
        }
        dest.at(y + dy, x + dx) = 1.0;
      }
    if (!disjoint) continue;

    Tensor shifted({h, w, 3});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          shifted.at(y, x, c) =
              image.pixels.at(reflect_index(y - dy, h), reflect_index(x - dx, w), c);
    Tensor alpha = gaussian_blur(dest, kFeatherSigma);
    if (offset != nullptr) {
      offset->dy = dy;
      offset->dx = dx;
    }
    Sample s;
    s.image.pixels = blend(image.pixels, shifted, alpha);
    s.mask = dest;
    s.label = 1;
    s.provenance = "copymove";
    return s;
  }
  throw Error("copy-move: no non-overlapping placement found in 100 attempts");
}

Sample synth_inpaint(const RgbImage& image, Rng& rng) {
  validate_image(image);
  const int h = image.height(), w = image.width();
  Tensor mask = random_region(h, w, rng, 0.01, 0.20);

  // Seed the region with the mean of its surround, then diffuse.
  Tensor filled = image.pixels.clone();
  double outside_mean[3] = {0.0, 0.0, 0.0};
  double outside_n = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(y, x) == 0.0) {
        for (int c = 0; c < 3; ++c) outside_mean[c] += image.pixels.at(y, x, c);
        outside_n += 1.0;
      }
  for (int c = 0; c < 3; ++c) outside_mean[c] /= std::max(1.0, outside_n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(y, x) != 0.0)
        for (int c = 0; c < 3; ++c) filled.at(y, x, c) = outside_mean[c];

  Tensor next = filled.clone();
  for (int it = 0; it < 250; ++it) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (mask.at(y, x) == 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          double acc = 0.0;
          acc += filled.at(reflect_index(y - 1, h), x, c);
          acc += filled.at(reflect_index(y + 1, h), x, c);
          acc += filled.at(y, reflect_index(x - 1, w), c);
          acc += filled.at(y, reflect_index(x + 1, w), c);
          next.at(y, x, c) = acc / 4.0;
        }
      }
    std::swap(filled, next);
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(y, x) != 0.0)
        for (int c = 0; c < 3; ++c)
          filled.at(y, x, c) = clip01(filled.at(y, x, c) + 0.012 * rng.gaussian());

  Sample s;
  s.image.pixels = filled;
  s.mask = mask;
  s.label = 1;
  s.provenance = "inpaint";
  return s;
}

Sample self_blend(const RgbImage& image, Rng& rng) {
  validate_image(image);
  const int h = image.height(), w = image.width();
  Tensor mask = random_region(h, w, rng, 0.02, 0.25);

  Tensor transformed = image.pixels.clone();
  const long first = rng.uniform_int(0, 2);
  std::vector<long> ops = {first};
  if (rng.uniform() < 0.5) ops.push_back((first + 1 + rng.uniform_int(0, 1)) % 3);
  for (long which : ops) {
    if (which == 0) {  // mild color shift
      double shift[3];
      for (int c = 0; c < 3; ++c) shift[c] = rng.uniform(-0.08, 0.08);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c)
            transformed.at(y, x, c) = clip01(transformed.at(y, x, c) + shift[c]);
    } else if (which == 1) {  // mild blur
      const double sigma = rng.uniform(0.6, 1.5);
      for (int c = 0; c < 3; ++c) {
        Tensor plane({h, w});
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) plane.at(y, x) = transformed.at(y, x, c);
        plane = gaussian_blur(plane, sigma);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) transformed.at(y, x, c) = plane.at(y, x);
      }
    } else {  // recompression-style quantization
      const double levels = static_cast<double>((1 << rng.uniform_int(5, 6)) - 1);
      for (std::int64_t i = 0; i < transformed.size(); ++i)
        transformed[i] = std::round(transformed[i] * levels) / levels;
    }
  }

  Tensor alpha = gaussian_blur(mask, kFeatherSigma);
  Sample s;
  s.image.pixels = blend(image.pixels, transformed, alpha);
  s.mask = mask;
  s.label = 1;
  s.provenance = "selfblend";
  return s;
}

RgbImage perturb(const RgbImage& image, const PerturbationSpec& spec) {
  validate_image(image);
  if (spec.severity < 0 || spec.severity > 5)
    throw ConfigError("perturb: severity must be in 0..5");
  RgbImage out;
  out.pixels = image.pixels.clone();
  if (spec.severity == 0) return out;  // identity by contract

  const double sev = static_cast<double>(spec.severity);
  switch (spec.kind) {
    case PerturbationKind::kBrightness: {
      const double gain = 1.0 + 0.15 * sev;
      for (std::int64_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = clip01(out.pixels[i] * gain);
      break;
    }
    case PerturbationKind::kContrast: {
      const double mean = image.pixels.mean();
      const double gain = 1.0 + 0.2 * sev;
      for (std::int64_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = clip01((out.pixels[i] - mean) * gain + mean);
      break;
    }
    case PerturbationKind::kDarken: {
      const double gain = 1.0 - 0.12 * sev;
      for (std::int64_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = clip01(out.pixels[i] * gain);
      break;
    }
    case PerturbationKind::kDither: {
      floyd_steinberg(out.pixels, 8 - spec.severity);
      break;
    }
    case PerturbationKind::kJpeg2000: {
      out = jpeg2000_roundtrip(image, spec.severity);
      break;
    }
    case PerturbationKind::kPinkNoise: {
      Rng rng(Rng::mix(spec.seed, 0x1f00 + static_cast<std::uint64_t>(spec.severity)));
      Tensor field = pink_noise_field(image.height(), image.width(), rng);
      const double amp = 0.02 * sev;
      for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
          for (int c = 0; c < 3; ++c)
            out.pixels.at(y, x, c) = clip01(out.pixels.at(y, x, c) + amp * field.at(y, x));
      break;
    }
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  for (const ManifestEntry& e : entries) f << entry_to_json(e).dump() << "\n";
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest parse error at line " + std::to_string(lineno) + ": " +
                      e.what());
    }
    if (!j.contains("image_path") || !j.contains("label") || !j.contains("mask_path"))
      throw DataError("manifest missing keys at line " + std::to_string(lineno));
    ManifestEntry e;
    e.image_path = j["image_path"].get<std::string>();
    const std::string label = j["label"].get<std::string>();
    if (label == "authentic") {
      e.label = 0;
    } else if (label == "manipulated") {
      e.label = 1;
    } else {
      throw DataError("manifest bad label at line " + std::to_string(lineno) + ": " + label);
    }
    if (!j["mask_path"].is_null()) e.mask_path = j["mask_path"].get<std::string>();
    if ((e.label == 0) != e.mask_path.empty())
      throw DataError("manifest mask/label mismatch at line " + std::to_string(lineno));
    e.provenance = j.value("provenance", "");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_image_png(const std::string& path, const RgbImage& image) {
  validate_image(image);
  if (!cv::imwrite(path, to_mat8(image.pixels)))
    throw DataError("cannot write image: " + path);
}

RgbImage read_image_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw DataError("cannot read image: " + path);
  RgbImage img;
  img.pixels = from_mat8(m);
  validate_image(img);
  return img;
}

ManifestEntry save_sample(const Sample& sample, const std::string& dir,
                          const std::string& stem) {
  std::filesystem::create_directories(dir);
  ManifestEntry e;
  e.image_path = (std::filesystem::path(dir) / (stem + ".png")).string();
  write_image_png(e.image_path, sample.image);
  if (sample.label == 1) {
    e.mask_path = (std::filesystem::path(dir) / (stem + "_mask.png")).string();
    write_mask_png(e.mask_path, sample.mask);
  }
  e.label = sample.label;
  e.provenance = sample.provenance;
  return e;
}

Sample load_sample(const ManifestEntry& entry) {
  Sample s;
  s.image = read_image_png(entry.image_path);
  s.label = entry.label;
  s.provenance = entry.provenance;
  if (entry.mask_path.empty()) {
    s.mask = Tensor::zeros({s.image.height(), s.image.width()});
  } else {
    s.mask = read_mask_png(entry.mask_path);
    if (s.mask.dim(0) != s.image.height() || s.mask.dim(1) != s.image.width())
      throw DataError("mask dims differ from image: " + entry.mask_path);
    if (s.mask.abs_max() == 0.0)
      throw DataError("manipulated sample with empty mask: " + entry.mask_path);
  }
  return s;
}

}  // namespace prf
