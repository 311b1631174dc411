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
#include <vector>

#include "prf/autodiff.hpp"
#include "prf/rng.hpp"

namespace prf::nn {

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng);

struct Linear {
  Parameter w, b;

  Linear() = default;
  Linear(const std::string& name, int din, int dout, Rng& rng);

  ad::Var operator()(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

struct LayerNorm {
  Parameter gamma, beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim);

  ad::Var operator()(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

struct Conv2d {
  Parameter w, b;
  int stride = 1;
  int dilation = 1;
  ad::Padding pad = ad::Padding::kReflect;

  Conv2d() = default;
  Conv2d(const std::string& name, int kh, int kw, int cin, int cout, Rng& rng, int stride = 1,
         int dilation = 1, ad::Padding pad = ad::Padding::kReflect);

  ad::Var operator()(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

struct ConvTranspose2d {
  Parameter w, b;
  int stride = 2;

  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, int k, int cin, int cout, Rng& rng, int stride);

  ad::Var operator()(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

// Pre-projection multi-head attention over unbatched token matrices.
// q: [n_q, dim], kv: [n_kv, dim] -> [n_q, dim]. dim must divide by heads.
struct MultiheadAttention {
  int heads = 1;
  int dim = 0;
  Linear wq, wk, wv, wo;

  MultiheadAttention() = default;
  MultiheadAttention(const std::string& name, int dim, int heads, Rng& rng);

  ad::Var operator()(ad::Tape& t, ad::Var q, ad::Var kv);
  void collect(std::vector<Parameter*>& out);
};

// Two-layer GELU MLP, din -> hidden -> dout.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(const std::string& name, int din, int hidden, int dout, Rng& rng);

  ad::Var operator()(ad::Tape& t, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

}  // namespace prf::nn
