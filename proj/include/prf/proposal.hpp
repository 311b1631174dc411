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

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "prf/filterbank.hpp"
#include "prf/nn.hpp"

namespace prf {

struct PromptText {
  std::string text;
};

// Pair of analysis / localization query embeddings, both length d.
struct ProposalEmbeddings {
  Tensor e_anl;
  Tensor e_seg;

  int dim() const { return static_cast<int>(e_anl.size()); }
};

// How to construct a backend. "toy" is always available; "external" shells
// out to `command <image.png> <prompt>` and reads two d-vectors as a JSON
// array pair from its standard output.
struct BackendSpec {
  std::string name = "toy";
  std::uint64_t seed = 0;
  int d = 256;
  std::string command;  // external only
};

class ProposalBackend {
 public:
  virtual ~ProposalBackend() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;

  // Graph path: embeddings usable inside a training tape. Frozen backends
  // return constants.
  virtual std::pair<ad::Var, ad::Var> generate(ad::Tape& t, const RgbImage& image,
                                               const PromptText& prompt) = 0;

  virtual void collect(std::vector<Parameter*>& out) = 0;
};

// Eager wrapper over the graph path.
ProposalEmbeddings generate_proposal(ProposalBackend& backend, const RgbImage& image,
                                     const PromptText& prompt);

// Throws ConfigError for unknown names or an "external" spec without a
// command.
std::unique_ptr<ProposalBackend> load_backend(const BackendSpec& spec);

// Strided convolutional encoder to a token grid plus two learned queries
// reading the grid through one cross-attention layer. The prompt is
// accepted for interface parity and ignored.
class ToyBackend : public ProposalBackend {
 public:
  ToyBackend(std::uint64_t seed, int d);

  std::string name() const override { return "toy"; }
  int dim() const override { return d_; }
  std::pair<ad::Var, ad::Var> generate(ad::Tape& t, const RgbImage& image,
                                       const PromptText& prompt) override;
  void collect(std::vector<Parameter*>& out) override;

 private:
  int d_;
  nn::Conv2d enc1_, enc2_, enc3_, enc4_;
  Parameter q_anl_, q_seg_;
  Parameter w_q_, w_k_, w_v_;  // bias-free projections
  nn::Linear w_o_;
  nn::LayerNorm ln_;
};

class ExternalBackend : public ProposalBackend {
 public:
  ExternalBackend(std::string command, int d);

  std::string name() const override { return "external"; }
  int dim() const override { return d_; }
  std::pair<ad::Var, ad::Var> generate(ad::Tape& t, const RgbImage& image,
                                       const PromptText& prompt) override;
  void collect(std::vector<Parameter*>&) override {}  // frozen

 private:
  std::string command_;
  int d_;
};

}  // namespace prf
