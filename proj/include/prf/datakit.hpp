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
#include <vector>

#include "prf/filterbank.hpp"
#include "prf/rng.hpp"

namespace prf {

// One dataset item. Authentic samples carry an all-zero mask; manipulated
// samples have at least one positive mask pixel.
struct Sample {
  RgbImage image;
  Tensor mask;             // [H,W], 1.0 = manipulated pixel
  int label = 0;           // 0 authentic, 1 manipulated
  std::string provenance;  // generator name
};

enum class PerturbationKind { kBrightness, kContrast, kDarken, kDither, kJpeg2000, kPinkNoise };

// Name <-> kind mapping; unknown names are configuration errors.
PerturbationKind perturbation_from_name(const std::string& name);
std::string perturbation_name(PerturbationKind kind);
const std::vector<PerturbationKind>& all_perturbations();

// severity 0 is the identity for every kind.
struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::kBrightness;
  int severity = 0;  // 0..5
  std::uint64_t seed = 0;
};

// Procedurally generated scene: color gradients, soft blobs, mild texture.
RgbImage make_authentic(int height, int width, Rng& rng);

// Random soft polygon with area fraction inside [min_frac, max_frac];
// falls back to a centered rectangle when sampling keeps missing the band.
Tensor random_region(int height, int width, Rng& rng, double min_frac = 0.01,
                     double max_frac = 0.30);

// Binary Chebyshev dilation, used to bound feathered blend support.
Tensor dilate_mask(const Tensor& mask, int radius);

// Separable Gaussian blur of one [H,W] plane with reflected borders; the
// kernel is truncated at ceil(3*sigma) taps per side.
Tensor gaussian_blur(const Tensor& plane, double sigma);

// Donor region pasted into the host through a feathered mask edge.
Sample synth_splice(const RgbImage& host, const RgbImage& donor, Rng& rng);

struct CopyMoveOffset {
  int dy = 0;
  int dx = 0;
};

// Region duplicated at a non-overlapping offset within the same image.
// Throws after 100 failed placement attempts.
Sample synth_copy_move(const RgbImage& image, Rng& rng, CopyMoveOffset* offset = nullptr);

// Region replaced by diffusion fill of its surround plus faint noise.
Sample synth_inpaint(const RgbImage& image, Rng& rng);

// Region of the image itself mildly transformed and blended back; pixel
// statistics change without any semantic boundary.
Sample self_blend(const RgbImage& image, Rng& rng);

RgbImage perturb(const RgbImage& image, const PerturbationSpec& spec);

struct ManifestEntry {
  std::string image_path;
  std::string mask_path;  // empty iff authentic
  int label = 0;
  std::string provenance;
};

// JSON-lines manifest; parse failures name the offending line.
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);

void write_image_png(const std::string& path, const RgbImage& image);
RgbImage read_image_png(const std::string& path);

// Writes <dir>/<stem>.png (and <dir>/<stem>_mask.png when manipulated).
ManifestEntry save_sample(const Sample& sample, const std::string& dir,
                          const std::string& stem);
Sample load_sample(const ManifestEntry& entry);

}  // namespace prf
