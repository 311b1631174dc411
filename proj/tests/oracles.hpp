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

// Reference implementations used only by tests. Everything here is written
// as plain nested loops so it cannot share a bug with the library's
// GEMM-based fast paths.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "prf/rng.hpp"
#include "prf/tensor.hpp"

namespace prf::testing {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline int reflect_idx(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

// Direct cross-correlation with "same" padding; output ceil(h/stride).
inline Tensor conv2d_ref(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                         int dilation, bool reflect) {
  const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const int oh = (h + stride - 1) / stride;
  const int ow = (wd + stride - 1) / stride;
  const int pad_h = ((oh - 1) * stride + (kh - 1) * dilation + 1 - h) / 2;
  const int pad_w = ((ow - 1) * stride + (kw - 1) * dilation + 1 - wd) / 2;
  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        double acc = b[co];
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int iy = oy * stride + ky * dilation - pad_h;
            int ix = ox * stride + kx * dilation - pad_w;
            if (reflect) {
              iy = reflect_idx(iy, h);
              ix = reflect_idx(ix, wd);
            } else if (iy < 0 || iy >= h || ix < 0 || ix >= wd) {
              continue;
            }
            for (int ci = 0; ci < cin; ++ci)
              acc += x.at(iy, ix, ci) * w.at(ky, kx, ci, co);
          }
        out.at(oy, ox, co) = acc;
      }
  return out;
}

// Single-channel-in, single-channel-out convolution of one image plane with
// one kernel; used by the filter-bank equivalence check.
inline std::vector<double> plane_conv_ref(const std::vector<double>& plane, int h, int w,
                                          const std::vector<double>& kernel, int k) {
  const int pad = (k - 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int iy = reflect_idx(y + ky - pad, h);
          const int ix = reflect_idx(x + kx - pad, w);
          acc += plane[static_cast<std::size_t>(iy) * w + ix] *
                 kernel[static_cast<std::size_t>(ky) * k + kx];
        }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

inline Tensor conv_transpose2d_ref(const Tensor& x, const Tensor& w, const Tensor& b,
                                   int stride) {
  const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const int k = w.dim(0), cout = w.dim(3);
  const int oh = (h - 1) * stride + k, ow = (wd - 1) * stride + k;
  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) out.at(oy, ox, co) = b[co];
  for (int iy = 0; iy < h; ++iy)
    for (int ix = 0; ix < wd; ++ix)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
              out.at(iy * stride + ky, ix * stride + kx, co) +=
                  x.at(iy, ix, ci) * w.at(ky, kx, ci, co);
  return out;
}

// Central finite difference of f() with respect to the referenced scalar.
template <typename F>
double fd_scalar(F&& f, double& xi, double eps = 1e-6) {
  const double orig = xi;
  xi = orig + eps;
  const double fp = f();
  xi = orig - eps;
  const double fm = f();
  xi = orig;
  return (fp - fm) / (2.0 * eps);
}

// Directional derivative along v: (f(x + eps v) - f(x - eps v)) / (2 eps).
template <typename F>
double fd_directional(F&& f, Tensor& x, const Tensor& v, double eps = 1e-6) {
  Tensor saved = x.clone();
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = saved[i] + eps * v[i];
  const double fp = f();
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = saved[i] - eps * v[i];
  const double fm = f();
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = saved[i];
  return (fp - fm) / (2.0 * eps);
}

inline Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace prf::testing
