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

#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "prf/errors.hpp"
#include "prf/harness.hpp"

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void run_synth(const std::string& kind, int n, std::uint64_t seed, const std::string& out_dir,
               int size) {
  if (n <= 0) throw prf::ConfigError("--n must be positive");
  if (size < 16) throw prf::ConfigError("--size must be at least 16");
  std::uint64_t kind_id = 0;
  if (kind == "splice") {
    kind_id = 1;
  } else if (kind == "copymove") {
    kind_id = 2;
  } else if (kind == "inpaint") {
    kind_id = 3;
  } else if (kind == "selfblend") {
    kind_id = 4;
  } else {
    throw prf::ConfigError("unknown synth kind: " + kind +
                           " (expected splice, copymove, inpaint, or selfblend)");
  }

  std::filesystem::create_directories(out_dir);
  const std::string manifest_path =
      (std::filesystem::path(out_dir) / "manifest.jsonl").string();
  // Appending lets sequential invocations build a mixed dataset.
  std::vector<prf::ManifestEntry> entries;
  if (std::filesystem::exists(manifest_path)) entries = prf::read_manifest(manifest_path);
  const std::size_t start = entries.size();

  for (int i = 0; i < n; ++i) {
    prf::Rng rng(prf::Rng::mix(prf::Rng::mix(seed, kind_id),
                               static_cast<std::uint64_t>(start) +
                                   static_cast<std::uint64_t>(i)));
    const prf::RgbImage base = prf::make_authentic(size, size, rng);
    prf::Sample sample;
    switch (kind_id) {
      case 1:
        sample = prf::synth_splice(base, prf::make_authentic(size, size, rng), rng);
        break;
      case 2: sample = prf::synth_copy_move(base, rng); break;
      case 3: sample = prf::synth_inpaint(base, rng); break;
      default: sample = prf::self_blend(base, rng); break;
    }
    const std::string stem = kind + std::to_string(start + static_cast<std::size_t>(i));
    entries.push_back(prf::save_sample(sample, out_dir, stem));
  }
  prf::write_manifest(entries, manifest_path);
  std::cout << "wrote " << n << " " << kind << " sample(s); manifest " << manifest_path
            << " now lists " << entries.size() << " entries\n";
}

void run_train(const std::string& config_path) {
  const prf::RunConfig cfg = prf::read_run_config(config_path);
  if (cfg.checkpoint_out.empty())
    throw prf::ConfigError("config data.checkpoint_out is required for the train command");
  const prf::TrainResult result = prf::train(cfg);
  prf::save_checkpoint(result.best, cfg.checkpoint_out);

  nlohmann::json summary;
  summary["steps"] = result.steps;
  summary["final_loss"] = result.final_loss;
  summary["best_validation_score"] = result.best_score;
  summary["checkpoint"] = cfg.checkpoint_out;
  std::cout << summary.dump(2) << "\n";
}

void run_eval(const std::string& ckpt_path, const std::string& manifest_path,
              bool include_authentic_pixels, const std::string& out_path) {
  const prf::Checkpoint ckpt = prf::load_checkpoint(ckpt_path);
  std::unique_ptr<prf::Pipeline> pipeline = prf::pipeline_from_checkpoint(ckpt);
  const std::vector<prf::ManifestEntry> entries = prf::read_manifest(manifest_path);
  if (entries.empty()) throw prf::ConfigError("manifest is empty: " + manifest_path);
  const prf::MetricsReport report =
      prf::evaluate(*pipeline, entries, include_authentic_pixels);
  const std::string json = prf::metrics_to_json(report);
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw prf::DataError("cannot write metrics: " + out_path);
    f << json;
  }
  std::cout << json;
}

void run_infer(const std::string& ckpt_path, const std::string& image_path,
               const std::string& out_dir) {
  const prf::Checkpoint ckpt = prf::load_checkpoint(ckpt_path);
  std::unique_ptr<prf::Pipeline> pipeline = prf::pipeline_from_checkpoint(ckpt);
  const prf::InferenceResult result = prf::infer(*pipeline, image_path, out_dir);
  nlohmann::json j;
  j["label"] = result.label == 1 ? "manipulated" : "authentic";
  j["probabilities"] = {{"authentic", result.p_authentic},
                        {"manipulated", result.p_manipulated}};
  j["verdict"] = result.verdict_path;
  j["mask"] = result.mask_path;
  j["probability_map"] = result.probability_path;
  std::cout << j.dump(2) << "\n";
}

void run_sweep(const std::string& ckpt_path, const std::string& manifest_path,
               const std::string& kinds_arg, const std::string& severities_arg,
               const std::string& out_dir, std::uint64_t seed) {
  const prf::Checkpoint ckpt = prf::load_checkpoint(ckpt_path);
  std::unique_ptr<prf::Pipeline> pipeline = prf::pipeline_from_checkpoint(ckpt);
  const std::vector<prf::ManifestEntry> entries = prf::read_manifest(manifest_path);
  if (entries.empty()) throw prf::ConfigError("manifest is empty: " + manifest_path);

  std::vector<prf::PerturbationKind> kinds;
  if (kinds_arg == "all") {
    kinds = prf::all_perturbations();
  } else {
    for (const std::string& name : split_list(kinds_arg))
      kinds.push_back(prf::perturbation_from_name(name));
  }
  std::vector<int> severities;
  for (const std::string& item : split_list(severities_arg)) {
    try {
      severities.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw prf::ConfigError("--severities must be a comma-separated list of integers");
    }
  }

  const prf::SweepResult sweep =
      prf::robustness_sweep(*pipeline, entries, kinds, severities, seed);
  std::filesystem::create_directories(out_dir);
  const std::string csv_path = (std::filesystem::path(out_dir) / "sweep.csv").string();
  prf::write_sweep_csv(sweep, csv_path);
  for (prf::PerturbationKind kind : kinds) {
    const std::string chart_path =
        (std::filesystem::path(out_dir) / (prf::perturbation_name(kind) + ".png")).string();
    prf::render_sweep_chart(sweep, kind, chart_path);
  }
  std::cout << "wrote " << csv_path << " and " << kinds.size() << " chart(s) under "
            << out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"image manipulation detection and localization pipeline"};
  app.require_subcommand(1);

  std::string synth_kind, synth_out;
  int synth_n = 1, synth_size = 64;
  std::uint64_t synth_seed = 0;
  CLI::App* synth = app.add_subcommand("synth", "generate synthetic training samples");
  synth->add_option("--kind", synth_kind, "splice, copymove, inpaint, or selfblend")
      ->required();
  synth->add_option("--n", synth_n, "number of samples")->required();
  synth->add_option("--seed", synth_seed, "generation seed");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--size", synth_size, "square image size (default 64)");

  std::string train_config;
  CLI::App* train = app.add_subcommand("train", "train from a JSON run config");
  train->add_option("--config", train_config, "run config JSON file")->required();

  std::string eval_ckpt, eval_manifest, eval_out;
  bool eval_include_authentic = false;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "JSONL manifest")->required();
  eval->add_flag("--include-authentic-pixels", eval_include_authentic,
                 "average pixel metrics over authentic samples too");
  eval->add_option("--out", eval_out, "also write the metrics JSON here");

  std::string infer_ckpt, infer_image, infer_out;
  CLI::App* infer = app.add_subcommand("infer", "run one image through a checkpoint");
  infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--image", infer_image, "input image (PNG)")->required();
  infer->add_option("--out", infer_out, "output directory")->required();

  std::string sweep_ckpt, sweep_manifest, sweep_kinds, sweep_out = "sweep";
  std::string sweep_severities = "0,1,2,3,4,5";
  std::uint64_t sweep_seed = 0;
  CLI::App* sweep =
      app.add_subcommand("perturb-sweep", "evaluate robustness under perturbations");
  sweep->add_option("--ckpt", sweep_ckpt, "checkpoint file")->required();
  sweep->add_option("--manifest", sweep_manifest, "JSONL manifest")->required();
  sweep->add_option("--kinds", sweep_kinds, "comma-separated kinds, or 'all'")->required();
  sweep->add_option("--severities", sweep_severities,
                    "comma-separated severities (default 0,1,2,3,4,5)");
  sweep->add_option("--out", sweep_out, "output directory (default sweep)");
  sweep->add_option("--seed", sweep_seed, "perturbation seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) run_synth(synth_kind, synth_n, synth_seed, synth_out, synth_size);
    if (train->parsed()) run_train(train_config);
    if (eval->parsed())
      run_eval(eval_ckpt, eval_manifest, eval_include_authentic, eval_out);
    if (infer->parsed()) run_infer(infer_ckpt, infer_image, infer_out);
    if (sweep->parsed())
      run_sweep(sweep_ckpt, sweep_manifest, sweep_kinds, sweep_severities, sweep_out,
                sweep_seed);
    return 0;
  } catch (const prf::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const prf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const prf::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
