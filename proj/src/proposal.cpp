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

#include "prf/proposal.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"
#include "prf/errors.hpp"

namespace prf {

namespace {

void validate_prompt(const PromptText& prompt) {
  if (prompt.text.size() > 4096) throw DataError("prompt longer than 4096 characters");
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += "'";
  return out;
}

// Runs a command, captures stdout, throws on nonzero exit.
std::string run_and_capture(const std::string& cmd) {
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw Error("backend command failed to start: " + cmd);
  std::string out;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
  const int status = pclose(pipe);
  if (status != 0)
    throw Error("backend command exited with status " + std::to_string(status) + ": " + cmd);
  return out;
}

}  // namespace

ProposalEmbeddings generate_proposal(ProposalBackend& backend, const RgbImage& image,
                                     const PromptText& prompt) {
  ad::Tape t(false);
  auto [anl, seg] = backend.generate(t, image, prompt);
  return ProposalEmbeddings{anl.val().clone(), seg.val().clone()};
}

std::unique_ptr<ProposalBackend> load_backend(const BackendSpec& spec) {
  if (spec.d <= 0) throw ConfigError("backend dimension must be positive");
  if (spec.name == "toy") return std::make_unique<ToyBackend>(spec.seed, spec.d);
  if (spec.name == "external") {
    if (spec.command.empty()) throw ConfigError("external backend requires a command");
    return std::make_unique<ExternalBackend>(spec.command, spec.d);
  }
  throw ConfigError("unknown proposal backend: " + spec.name);
}

ToyBackend::ToyBackend(std::uint64_t seed, int d) : d_(d) {
  if (d % 4 != 0) throw ConfigError("backend dimension must be divisible by 4");
  Rng rng(Rng::mix(seed, 0xb0f));
  const int c1 = std::min(16, d), c2 = std::min(32, d), c3 = std::min(64, d);
  enc1_ = nn::Conv2d("proposal.enc1", 3, 3, 3, c1, rng, 2);
  enc2_ = nn::Conv2d("proposal.enc2", 3, 3, c1, c2, rng, 2);
  enc3_ = nn::Conv2d("proposal.enc3", 3, 3, c2, c3, rng, 2);
  enc4_ = nn::Conv2d("proposal.enc4", 3, 3, c3, d, rng, 2);
  q_anl_ = Parameter("proposal.q_anl", nn::xavier_uniform({d}, d, d, rng));
  q_seg_ = Parameter("proposal.q_seg", nn::xavier_uniform({d}, d, d, rng));
  w_q_ = Parameter("proposal.w_q", nn::xavier_uniform({d, d}, d, d, rng));
  w_k_ = Parameter("proposal.w_k", nn::xavier_uniform({d, d}, d, d, rng));
  w_v_ = Parameter("proposal.w_v", nn::xavier_uniform({d, d}, d, d, rng));
  w_o_ = nn::Linear("proposal.w_o", d, d, rng);
  ln_ = nn::LayerNorm("proposal.ln", d);
}

std::pair<ad::Var, ad::Var> ToyBackend::generate(ad::Tape& t, const RgbImage& image,
                                                 const PromptText& prompt) {
  validate_image(image);
  validate_prompt(prompt);
  ad::Var h = ad::gelu(enc1_(t, t.constant(image.pixels)));
  h = ad::gelu(enc2_(t, h));
  h = ad::gelu(enc3_(t, h));
  h = enc4_(t, h);
  const int gh = h.val().dim(0), gw = h.val().dim(1);
  ad::Var tokens = ad::reshape(h, {gh * gw, d_});
  tokens = ad::add(tokens, t.constant(sinusoidal_position_encoding(gh, gw, d_)));

  ad::Var queries = ad::stack_rows({t.param(q_anl_), t.param(q_seg_)});  // [2,d]
  ad::Var q = ad::matmul(queries, t.param(w_q_));
  ad::Var k = ad::matmul(tokens, t.param(w_k_));
  ad::Var v = ad::matmul(tokens, t.param(w_v_));
  ad::Var scores = ad::mul_scalar(ad::matmul(q, ad::reshape(ad::permute3(
      ad::reshape(k, {gh * gw, d_, 1}), 1, 0, 2), {d_, gh * gw})), 1.0 / std::sqrt(d_));
  ad::Var ctx = ad::matmul(ad::softmax_lastdim(scores), v);
  ad::Var out = ln_(t, ad::add(queries, w_o_(t, ctx)));
  ad::Var anl = ad::reshape(ad::slice_rows(out, 0, 1), {d_});
  ad::Var seg = ad::reshape(ad::slice_rows(out, 1, 2), {d_});
  return {anl, seg};
}

void ToyBackend::collect(std::vector<Parameter*>& out) {
  enc1_.collect(out);
  enc2_.collect(out);
  enc3_.collect(out);
  enc4_.collect(out);
  out.push_back(&q_anl_);
  out.push_back(&q_seg_);
  out.push_back(&w_q_);
  out.push_back(&w_k_);
  out.push_back(&w_v_);
  w_o_.collect(out);
  ln_.collect(out);
}

ExternalBackend::ExternalBackend(std::string command, int d)
    : command_(std::move(command)), d_(d) {}

std::pair<ad::Var, ad::Var> ExternalBackend::generate(ad::Tape& t, const RgbImage& image,
                                                      const PromptText& prompt) {
  validate_image(image);
  validate_prompt(prompt);
  const int h = image.height(), w = image.width();
  cv::Mat mat(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // OpenCV stores BGR
      mat.at<cv::Vec3b>(y, x) = cv::Vec3b(
          static_cast<unsigned char>(std::lround(image.pixels.at(y, x, 2) * 255.0)),
          static_cast<unsigned char>(std::lround(image.pixels.at(y, x, 1) * 255.0)),
          static_cast<unsigned char>(std::lround(image.pixels.at(y, x, 0) * 255.0)));
    }
  const auto path = std::filesystem::temp_directory_path() /
                    ("proposal_" + std::to_string(::getpid()) + "_" +
                     std::to_string(reinterpret_cast<std::uintptr_t>(this)) + ".png");
  if (!cv::imwrite(path.string(), mat)) throw Error("backend: cannot write temp image");

  std::string out;
  try {
    out = run_and_capture(command_ + " " + shell_quote(path.string()) + " " +
                          shell_quote(prompt.text));
  } catch (...) {
    std::filesystem::remove(path);
    throw;
  }
  std::filesystem::remove(path);

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(out);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("backend produced invalid JSON: ") + e.what());
  }
  if (!j.is_array() || j.size() != 2 || !j[0].is_array() || !j[1].is_array())
    throw Error("backend output must be a pair of arrays");
  if (static_cast<int>(j[0].size()) != d_ || static_cast<int>(j[1].size()) != d_)
    throw ContractError("backend embedding width " + std::to_string(j[0].size()) +
                        " does not match configured " + std::to_string(d_));
  Tensor anl({d_}), seg({d_});
  for (int i = 0; i < d_; ++i) {
    anl[i] = j[0][static_cast<std::size_t>(i)].get<double>();
    seg[i] = j[1][static_cast<std::size_t>(i)].get<double>();
  }
  if (!anl.all_finite() || !seg.all_finite()) throw Error("backend returned non-finite values");
  return {t.constant(anl), t.constant(seg)};
}

}  // namespace prf
