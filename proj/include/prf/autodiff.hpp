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

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "prf/tensor.hpp"

namespace prf {

// Named trainable array. Gradients accumulate across tape backward passes
// until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
};

namespace ad {

class Tape;

struct Node {
  Tensor val;
  Tensor grad;  // lazily allocated
  bool needs_grad = false;
  std::function<void(Node&)> back;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(val.shape());
    return grad;
  }
};

// Lightweight handle into a Tape-owned node.
struct Var {
  Node* node = nullptr;
  Tape* tape = nullptr;

  const Tensor& val() const { return node->val; }
  const Tensor& grad() const { return node->grad; }
  bool defined() const { return node != nullptr; }
};

// Define-by-run reverse-mode tape. Nodes are created in topological order;
// backward() walks them in reverse. Construct with grad_enabled=false for
// pure inference (no backward closures are recorded).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor v);
  Var leaf(Tensor v);            // input that wants a gradient (tests)
  Var param(Parameter& p);       // leaf bound to an external Parameter

  // Backward from a scalar root. Accumulates into bound Parameter::grad.
  void backward(Var root);

  Node* make_node(Tensor val, bool needs_grad);
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<std::pair<Parameter*, Node*>> bound_;
  std::unordered_map<Parameter*, Node*> bound_index_;
};

// ---- elementwise / scalar ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);
Var mul_const(Var a, const Tensor& t);  // elementwise by a constant tensor
Var sigmoid(Var a);
Var gelu(Var a);
Var log(Var a);
Var clip(Var a, double lo, double hi);

// ---- reductions ----
Var sum_all(Var a);   // -> [1]
Var mean_all(Var a);  // -> [1]
Var spatial_mean(Var a);  // [h,w,c] -> [c]

// ---- shape ----
Var reshape(Var a, std::vector<int> shape);
Var permute3(Var a, int p0, int p1, int p2);
Var stack_rows(const std::vector<Var>& rows);        // k vectors [d] -> [k,d]
Var slice_rows(Var a, int from, int to);             // [n,d] -> [to-from,d]
Var slice_lastdim(Var a, int from, int to);
Var concat_lastdim(const std::vector<Var>& parts);

// ---- linear algebra ----
Var matmul(Var a, Var b);                       // [m,k]x[k,n]
Var bmm(Var a, Var b);                          // [B,m,k]x[B,k,n]
Var linear(Var x, Var w, Var b);                // [n,din]x[din,dout]+[dout]
Var softmax_lastdim(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- convolution ----
enum class Padding { kReflect, kZero };

// Cross-correlation, "same"-style padding, output ceil(H/stride) x ceil(W/stride).
// x: [H,W,Cin], w: [kh,kw,Cin,Cout], b: [Cout].
Var conv2d(Var x, Var w, Var b, int stride, int dilation, Padding pad);

// x: [h,w,Cin], w: [k,k,Cin,Cout], b: [Cout]; output [(h-1)*s+k, (w-1)*s+k, Cout].
Var conv_transpose2d(Var x, Var w, Var b, int stride);

// Non-overlapping p x p patches, zero-padded at bottom/right to a full grid.
// [H,W,C] -> [ceil(H/p)*ceil(W/p), p*p*C].
Var extract_patches(Var x, int p);

// ---- broadcast multiplies ----
Var mul_channel(Var x, Var v);   // [h,w,c] * [c]
Var mul_spatial(Var x, Var m);   // [h,w,c] * [h,w,1]
Var add_scalar_param(Var x, Var s);  // x + s, s is a [1] tensor

// ---- losses ----
Var cross_entropy_logits(Var logits, int label);  // [C] -> [1]

}  // namespace ad
}  // namespace prf
