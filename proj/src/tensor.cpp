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

#include "prf/tensor.hpp"

#include <cmath>
#include <cstring>

namespace prf {

bool Tensor::all_finite() const {
  const double* p = data();
  for (std::int64_t i = 0; i < size_; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

double Tensor::abs_max() const {
  double m = 0.0;
  const double* p = data();
  for (std::int64_t i = 0; i < size_; ++i) m = std::max(m, std::fabs(p[i]));
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  const double* p = data();
  for (std::int64_t i = 0; i < size_; ++i) s += p[i];
  return s;
}

bool Tensor::equals_bitwise(const Tensor& o) const {
  if (shape_ != o.shape_) return false;
  return std::memcmp(data(), o.data(), static_cast<std::size_t>(size_) * sizeof(double)) == 0;
}

Tensor sinusoidal_position_encoding(int gh, int gw, int dim) {
  if (dim % 4 != 0) throw ContractError("position encoding dim must be divisible by 4");
  const int half = dim / 2;      // half for x, half for y
  const int quarter = dim / 4;   // sin/cos pairs within each half
  Tensor pe({gh * gw, dim});
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      double* row = pe.data() + static_cast<std::int64_t>(y * gw + x) * dim;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / half);
        row[2 * i] = std::sin(x * freq);
        row[2 * i + 1] = std::cos(x * freq);
        row[half + 2 * i] = std::sin(y * freq);
        row[half + 2 * i + 1] = std::cos(y * freq);
      }
    }
  }
  return pe;
}

}  // namespace prf
