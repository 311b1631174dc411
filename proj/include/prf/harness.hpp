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
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prf/datakit.hpp"
#include "prf/objectives.hpp"
#include "prf/pipeline.hpp"

namespace prf {

struct OptimizerConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
};

struct RunConfig {
  PipelineConfig pipeline;
  LossWeights loss;
  OptimizerConfig optimizer;
  int epochs = 20;
  int warmup_steps = 100;
  int validate_every = 2;  // epochs between validation passes
  int batch_size = 4;
  int max_steps = 0;  // 0 means no cap
  std::string train_manifest;
  std::string val_manifest;    // empty: validate on the training manifest
  std::string checkpoint_out;  // where the CLI writes the best checkpoint
};

// Throws ConfigError on non-positive epochs/batch/cadence, non-positive
// learning rate, betas outside [0,1), or negative decay/warmup/cap.
void validate_run_config(const RunConfig& cfg);

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);
RunConfig read_run_config(const std::string& path);

// Linear 0 -> 1 over warmup_steps, then constant 1. step is 1-based.
double warmup_scale(std::int64_t step, int warmup_steps);

// Decoupled weight decay Adam over an externally owned parameter list.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, const OptimizerConfig& cfg);

  // Applies one update using lr * lr_scale; gradients are left untouched.
  void step(double lr_scale = 1.0);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const std::vector<Parameter*>& params() const { return params_; }
  Tensor& first_moment(std::size_t i) { return m_[i]; }
  Tensor& second_moment(std::size_t i) { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  OptimizerConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Single-file training artifact: run config, every model parameter, and
// the optimizer state for the active parameters.
struct Checkpoint {
  std::uint32_t version = 1;
  RunConfig config;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::int64_t opt_steps = 0;
  std::vector<std::pair<std::string, Tensor>> opt_m;
  std::vector<std::pair<std::string, Tensor>> opt_v;
};

// Binary layout: magic, u32 version, u64 header length, JSON header, raw
// little-endian f64 payload, trailing crc32. Loads reject unknown versions
// and any content that fails the checksum.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot_checkpoint(Pipeline& pipeline, const RunConfig& cfg, AdamW* opt,
                               std::int64_t step);
// Shape or name mismatches raise DataError naming the offending array.
void restore_pipeline(Pipeline& pipeline, const Checkpoint& ckpt);
void restore_optimizer(AdamW& opt, const Checkpoint& ckpt);

// Builds a pipeline from the checkpoint's config snapshot and loads the
// saved parameters into it.
std::unique_ptr<Pipeline> pipeline_from_checkpoint(const Checkpoint& ckpt);

// Injectable per-sample prediction, used by evaluation and stub tests.
using PredictFn = std::function<PipelineOutput(const Sample&)>;

MetricsReport evaluate_entries(const std::vector<ManifestEntry>& entries, const PredictFn& fn,
                               bool include_authentic_pixels = false);
MetricsReport evaluate(Pipeline& pipeline, const std::vector<ManifestEntry>& entries,
                       bool include_authentic_pixels = false);

struct TrainResult {
  Checkpoint best;  // snapshot at the best validation score
  double best_score = 0.0;
  MetricsReport best_metrics;
  double final_loss = 0.0;
  std::int64_t steps = 0;
};

// Full optimization loop: shuffled batches, linear warmup, constraint
// re-projection after every step, periodic validation, best-checkpoint
// retention. Throws DivergenceError with the step number when the loss
// stops being finite.
TrainResult train(const RunConfig& cfg);

struct InferenceResult {
  int label = 0;
  double p_authentic = 0.0;
  double p_manipulated = 0.0;
  std::string verdict_path;
  std::string mask_path;
  std::string probability_path;
};

// Writes <stem>.verdict.json, <stem>.mask.png, <stem>.prob.bin under out_dir.
InferenceResult infer(Pipeline& pipeline, const std::string& image_path,
                      const std::string& out_dir);

struct SweepRow {
  PerturbationKind kind = PerturbationKind::kBrightness;
  int severity = 0;
  double auc = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // kinds-major, severities in given order
};

// Evaluates pixel AUC under every (kind, severity) pair. Perturbation seeds
// derive from (seed, kind, severity, sample index) so results never depend
// on sweep order. Unavailable codecs fail before any evaluation starts.
SweepResult robustness_sweep(Pipeline& pipeline, const std::vector<ManifestEntry>& entries,
                             const std::vector<PerturbationKind>& kinds,
                             const std::vector<int>& severities, std::uint64_t seed);

void write_sweep_csv(const SweepResult& result, const std::string& path);
// Line chart of AUC against severity for one kind.
void render_sweep_chart(const SweepResult& result, PerturbationKind kind,
                        const std::string& path);

}  // namespace prf
