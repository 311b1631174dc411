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

#include "prf/nn.hpp"

#include <cmath>

#include "prf/errors.hpp"

namespace prf::nn {

Tensor xavier_uniform(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng) {
  Tensor t(shape);
  const double a = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

Linear::Linear(const std::string& name, int din, int dout, Rng& rng)
    : w(name + ".w", xavier_uniform({din, dout}, din, dout, rng)),
      b(name + ".b", Tensor::zeros({dout})) {}

ad::Var Linear::operator()(ad::Tape& t, ad::Var x) {
  return ad::linear(x, t.param(w), t.param(b));
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Tensor::full({dim}, 1.0)),
      beta(name + ".beta", Tensor::zeros({dim})) {}

ad::Var LayerNorm::operator()(ad::Tape& t, ad::Var x) {
  return ad::layer_norm(x, t.param(gamma), t.param(beta));
}

void LayerNorm::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Conv2d::Conv2d(const std::string& name, int kh, int kw, int cin, int cout, Rng& rng, int stride,
               int dilation, ad::Padding pad)
    : w(name + ".w", xavier_uniform({kh, kw, cin, cout}, kh * kw * cin, kh * kw * cout, rng)),
      b(name + ".b", Tensor::zeros({cout})),
      stride(stride),
      dilation(dilation),
      pad(pad) {}

ad::Var Conv2d::operator()(ad::Tape& t, ad::Var x) {
  return ad::conv2d(x, t.param(w), t.param(b), stride, dilation, pad);
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

ConvTranspose2d::ConvTranspose2d(const std::string& name, int k, int cin, int cout, Rng& rng,
                                 int stride)
    : w(name + ".w", xavier_uniform({k, k, cin, cout}, k * k * cin, k * k * cout, rng)),
      b(name + ".b", Tensor::zeros({cout})),
      stride(stride) {}

ad::Var ConvTranspose2d::operator()(ad::Tape& t, ad::Var x) {
  return ad::conv_transpose2d(x, t.param(w), t.param(b), stride);
}

void ConvTranspose2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

MultiheadAttention::MultiheadAttention(const std::string& name, int dim, int heads, Rng& rng)
    : heads(heads),
      dim(dim),
      wq(name + ".q", dim, dim, rng),
      wk(name + ".k", dim, dim, rng),
      wv(name + ".v", dim, dim, rng),
      wo(name + ".o", dim, dim, rng) {
  if (dim % heads != 0) throw ContractError("attention: dim not divisible by heads");
}

ad::Var MultiheadAttention::operator()(ad::Tape& t, ad::Var q, ad::Var kv) {
  if (q.val().dim(1) != dim || kv.val().dim(1) != dim)
    throw ContractError("attention: token width mismatch");
  const int nq = q.val().dim(0), nk = kv.val().dim(0);
  const int dh = dim / heads;
  ad::Var Q = wq(t, q), K = wk(t, kv), V = wv(t, kv);
  ad::Var qh = ad::permute3(ad::reshape(Q, {nq, heads, dh}), 1, 0, 2);  // [H,nq,dh]
  ad::Var kt = ad::permute3(ad::reshape(K, {nk, heads, dh}), 1, 2, 0);  // [H,dh,nk]
  ad::Var vh = ad::permute3(ad::reshape(V, {nk, heads, dh}), 1, 0, 2);  // [H,nk,dh]
  ad::Var attn = ad::softmax_lastdim(ad::mul_scalar(ad::bmm(qh, kt), 1.0 / std::sqrt(dh)));
  ad::Var ctx = ad::reshape(ad::permute3(ad::bmm(attn, vh), 1, 0, 2), {nq, dim});
  return wo(t, ctx);
}

void MultiheadAttention::collect(std::vector<Parameter*>& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

Mlp::Mlp(const std::string& name, int din, int hidden, int dout, Rng& rng)
    : fc1(name + ".fc1", din, hidden, rng), fc2(name + ".fc2", hidden, dout, rng) {}

ad::Var Mlp::operator()(ad::Tape& t, ad::Var x) { return fc2(t, ad::gelu(fc1(t, x))); }

void Mlp::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

}  // namespace prf::nn
