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

#include "prf/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "prf/errors.hpp"

namespace {

using prf::AblationToggles;
using prf::AdamW;
using prf::Checkpoint;
using prf::ManifestEntry;
using prf::OptimizerConfig;
using prf::Parameter;
using prf::PerturbationKind;
using prf::Pipeline;
using prf::PipelineConfig;
using prf::PipelineOutput;
using prf::RgbImage;
using prf::Rng;
using prf::RunConfig;
using prf::Sample;
using prf::Tensor;

std::string temp_dir(const std::string& name) {
  const std::string dir = (std::filesystem::temp_directory_path() / name).string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

PipelineConfig small_pipeline_config(std::uint64_t seed) {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.c = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  cfg.seed = seed;
  return cfg;
}

// Writes a manifest of synthetic samples; kinds cycle over the four
// generators for manipulated entries.
std::string make_dataset(const std::string& dir, int manipulated, int authentic, int size,
                         std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < manipulated; ++i) {
    const RgbImage base = prf::make_authentic(size, size, rng);
    Sample s;
    switch (i % 4) {
      case 0: s = prf::synth_splice(base, prf::make_authentic(size, size, rng), rng); break;
      case 1: s = prf::synth_copy_move(base, rng); break;
      case 2: s = prf::synth_inpaint(base, rng); break;
      default: s = prf::self_blend(base, rng); break;
    }
    entries.push_back(prf::save_sample(s, dir, "manip" + std::to_string(i)));
  }
  for (int i = 0; i < authentic; ++i) {
    Sample s;
    s.image = prf::make_authentic(size, size, rng);
    s.mask = Tensor::zeros({size, size});
    s.label = 0;
    s.provenance = "authentic";
    entries.push_back(prf::save_sample(s, dir, "auth" + std::to_string(i)));
  }
  const std::string manifest = (std::filesystem::path(dir) / "manifest.jsonl").string();
  prf::write_manifest(entries, manifest);
  return manifest;
}

TEST_SUITE("harness") {

TEST_CASE("run config parses with defaults and validates") {
  RunConfig defaults = prf::run_config_from_json("{}");
  CHECK(defaults.optimizer.lr == 5e-5);
  CHECK(defaults.optimizer.beta1 == 0.9);
  CHECK(defaults.optimizer.beta2 == 0.95);
  CHECK(defaults.epochs == 20);
  CHECK(defaults.warmup_steps == 100);
  CHECK(defaults.validate_every == 2);
  CHECK(defaults.batch_size == 4);
  CHECK(defaults.pipeline.d == 256);
  CHECK(defaults.pipeline.toggles.use_frm);

  RunConfig cfg;
  cfg.pipeline = small_pipeline_config(7);
  cfg.pipeline.toggles.use_esm = false;
  cfg.optimizer.lr = 2e-3;
  cfg.epochs = 3;
  cfg.max_steps = 11;
  cfg.train_manifest = "train.jsonl";
  cfg.checkpoint_out = "model.ckpt";
  RunConfig back = prf::run_config_from_json(prf::run_config_to_json(cfg));
  CHECK(back.pipeline.d == 8);
  CHECK(back.pipeline.seed == 7);
  CHECK(!back.pipeline.toggles.use_esm);
  CHECK(back.pipeline.toggles.use_fg);
  CHECK(back.optimizer.lr == 2e-3);
  CHECK(back.max_steps == 11);
  CHECK(back.train_manifest == "train.jsonl");
  CHECK(back.checkpoint_out == "model.ckpt");
  CHECK(prf::run_config_to_json(back) == prf::run_config_to_json(cfg));

  CHECK_THROWS_AS(prf::run_config_from_json("{"), prf::ConfigError);
  CHECK_THROWS_AS(prf::run_config_from_json(R"({"epochs": 0})"), prf::ConfigError);
  CHECK_THROWS_AS(prf::run_config_from_json(R"({"optimizer": {"lr": -1.0}})"),
                  prf::ConfigError);
  CHECK_THROWS_AS(prf::run_config_from_json(R"({"optimizer": {"beta1": 1.0}})"),
                  prf::ConfigError);
  CHECK_THROWS_AS(prf::run_config_from_json(R"({"model": {"scales": [[3,1]]}})"),
                  prf::ConfigError);
  CHECK_THROWS_AS(prf::read_run_config("/nonexistent/config.json"), prf::ConfigError);
}

TEST_CASE("warmup is linear then constant") {
  CHECK(prf::warmup_scale(1, 100) == 0.01);
  CHECK(prf::warmup_scale(50, 100) == 0.5);
  CHECK(prf::warmup_scale(100, 100) == 1.0);
  CHECK(prf::warmup_scale(5000, 100) == 1.0);
  CHECK(prf::warmup_scale(1, 0) == 1.0);
}

TEST_CASE("optimizer follows the moment recurrences") {
  Parameter p("p", Tensor({3}));
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  p.value[2] = 0.5;
  OptimizerConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.95;
  cfg.weight_decay = 0.01;
  AdamW opt({&p}, cfg);

  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};
  double want[3] = {1.0, -2.0, 0.5};
  const double grads[2][3] = {{0.3, -1.0, 0.0}, {-0.2, 0.4, 2.0}};
  for (int step = 1; step <= 2; ++step) {
    for (int k = 0; k < 3; ++k) p.grad[k] = grads[step - 1][k];
    const double scale = step == 1 ? 0.5 : 1.0;
    opt.step(scale);
    const double c1 = 1.0 - std::pow(cfg.beta1, step);
    const double c2 = 1.0 - std::pow(cfg.beta2, step);
    for (int k = 0; k < 3; ++k) {
      const double g = grads[step - 1][k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
      want[k] -= cfg.lr * scale * (update + cfg.weight_decay * want[k]);
      CHECK(std::abs(p.value[k] - want[k]) < 1e-15);
    }
  }
  CHECK(opt.steps() == 2);

  // Decay without gradient shrinks the weight and nothing else explodes.
  Parameter q("q", Tensor({1}));
  q.value[0] = 4.0;
  AdamW opt2({&q}, cfg);
  q.zero_grad();
  opt2.step(1.0);
  CHECK(std::abs(q.value[0] - 4.0 * (1.0 - cfg.lr * cfg.weight_decay)) < 1e-15);
}

TEST_CASE("checkpoints round-trip bitwise and reject corruption") {
  const std::string dir = temp_dir("prf_harness_ckpt");
  RunConfig cfg;
  cfg.pipeline = small_pipeline_config(3);
  Pipeline pipeline(cfg.pipeline);
  AdamW opt(pipeline.active_parameters(), cfg.optimizer);

  // Some optimizer history so moments are nonzero.
  Rng grad_rng(5);
  for (Parameter* p : opt.params())
    for (std::int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] = 0.01 * grad_rng.gaussian();
  opt.step(1.0);
  pipeline.filter_bank().project_constraints();

  Rng img_rng(9);
  const RgbImage probe = prf::make_authentic(32, 32, img_rng);
  const PipelineOutput before = pipeline.predict(probe);

  Checkpoint ckpt = prf::snapshot_checkpoint(pipeline, cfg, &opt, 17);
  const std::string path = dir + "/model.ckpt";
  prf::save_checkpoint(ckpt, path);
  Checkpoint loaded = prf::load_checkpoint(path);
  CHECK(loaded.version == 1);
  CHECK(loaded.step == 17);
  CHECK(loaded.opt_steps == 1);
  CHECK(loaded.config.pipeline.d == 8);
  REQUIRE(loaded.params.size() == ckpt.params.size());
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    CHECK(loaded.params[i].first == ckpt.params[i].first);
    CHECK(bitwise_equal(loaded.params[i].second, ckpt.params[i].second));
  }
  REQUIRE(loaded.opt_m.size() == ckpt.opt_m.size());
  for (std::size_t i = 0; i < ckpt.opt_m.size(); ++i) {
    CHECK(bitwise_equal(loaded.opt_m[i].second, ckpt.opt_m[i].second));
    CHECK(bitwise_equal(loaded.opt_v[i].second, ckpt.opt_v[i].second));
  }

  // Restoring into a differently seeded twin reproduces the forward pass.
  PipelineConfig twin_cfg = cfg.pipeline;
  twin_cfg.seed = 4;
  Pipeline twin(twin_cfg);
  CHECK(!bitwise_equal(twin.predict(probe).probabilities, before.probabilities));
  prf::restore_pipeline(twin, loaded);
  const PipelineOutput after = twin.predict(probe);
  CHECK(bitwise_equal(after.logits, before.logits));
  CHECK(bitwise_equal(after.probabilities, before.probabilities));

  auto rebuilt = prf::pipeline_from_checkpoint(loaded);
  CHECK(bitwise_equal(rebuilt->predict(probe).probabilities, before.probabilities));

  AdamW opt2(twin.active_parameters(), cfg.optimizer);
  prf::restore_optimizer(opt2, loaded);
  CHECK(opt2.steps() == 1);
  CHECK(bitwise_equal(opt2.first_moment(0), opt.first_moment(0)));

  // Flip a payload byte: checksum must catch it.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char b;
    f.seekg(200);
    f.get(b);
    f.seekp(200);
    b = static_cast<char>(b ^ 0x40);
    f.put(b);
  }
  CHECK_THROWS_AS(prf::load_checkpoint(path), prf::DataError);

  // Truncation is an integrity failure, never partial state.
  prf::save_checkpoint(ckpt, path);
  {
    std::error_code ec;
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2, ec);
    REQUIRE(!ec);
  }
  CHECK_THROWS_AS(prf::load_checkpoint(path), prf::DataError);

  // Version 0 is rejected with a message naming the version.
  Checkpoint old = prf::snapshot_checkpoint(pipeline, cfg, &opt, 0);
  old.version = 0;
  prf::save_checkpoint(old, path);
  try {
    prf::load_checkpoint(path);
    CHECK(false);
  } catch (const prf::DataError& e) {
    CHECK(std::string(e.what()).find("version 0") != std::string::npos);
  }

  // Restoring into an incompatible model names the offending array.
  PipelineConfig other_cfg = small_pipeline_config(3);
  other_cfg.c = 4;
  Pipeline other(other_cfg);
  prf::save_checkpoint(ckpt, path);
  try {
    prf::restore_pipeline(other, prf::load_checkpoint(path));
    CHECK(false);
  } catch (const prf::DataError& e) {
    CHECK(std::string(e.what()).find("segmenter.") != std::string::npos);
  }
  CHECK_THROWS_AS(prf::load_checkpoint(dir + "/missing.ckpt"), prf::DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation aggregates stub predictors") {
  const std::string dir = temp_dir("prf_harness_eval");
  const std::string manifest = make_dataset(dir, 3, 1, 32, 21);
  const std::vector<ManifestEntry> entries = prf::read_manifest(manifest);
  REQUIRE(entries.size() == 4);

  // Perfect oracle: reads the label and ground truth off the sample.
  const prf::PredictFn oracle = [](const Sample& s) {
    Tensor logits({2});
    logits[s.label] = 10.0;
    return PipelineOutput{logits, s.mask.clone()};
  };
  prf::MetricsReport perfect = prf::evaluate_entries(entries, oracle);
  CHECK(perfect.pixel_f1 == 1.0);
  CHECK(perfect.pixel_iou == 1.0);
  CHECK(perfect.pixel_auc == 1.0);
  CHECK(perfect.image_acc == 1.0);
  CHECK(perfect.image_f1 == 1.0);
  CHECK(perfect.samples.size() == 4);

  // Constant-authentic stub: zero image F1, accuracy only on authentic.
  const prf::PredictFn constant = [](const Sample& s) {
    Tensor logits({2});
    logits[0] = 5.0;
    return PipelineOutput{logits, Tensor::zeros({s.image.height(), s.image.width()})};
  };
  prf::MetricsReport silent = prf::evaluate_entries(entries, constant);
  CHECK(silent.image_f1 == 0.0);
  CHECK(silent.image_acc == doctest::Approx(0.25));
  CHECK(silent.pixel_f1 == 0.0);

  CHECK(prf::metrics_to_json(prf::evaluate_entries(entries, oracle)) ==
        prf::metrics_to_json(perfect));
  std::filesystem::remove_all(dir);
}

TEST_CASE("training runs deterministically and honours toggles") {
  const std::string dir = temp_dir("prf_harness_train");
  const std::string manifest = make_dataset(dir, 2, 0, 32, 33);

  RunConfig cfg;
  cfg.pipeline = small_pipeline_config(11);
  cfg.optimizer.lr = 1e-3;
  cfg.optimizer.weight_decay = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.warmup_steps = 4;
  cfg.validate_every = 1;
  cfg.train_manifest = manifest;

  prf::TrainResult a = prf::train(cfg);
  CHECK(a.steps == 2);
  CHECK(std::isfinite(a.final_loss));
  CHECK(a.best.params.size() > 0);
  CHECK(a.best.opt_m.size() == a.best.opt_v.size());

  prf::TrainResult b = prf::train(cfg);
  CHECK(a.final_loss == b.final_loss);
  CHECK(prf::metrics_to_json(a.best_metrics) == prf::metrics_to_json(b.best_metrics));
  REQUIRE(a.best.params.size() == b.best.params.size());
  for (std::size_t i = 0; i < a.best.params.size(); ++i)
    CHECK(bitwise_equal(a.best.params[i].second, b.best.params[i].second));

  // Disabled modules keep their initialization bitwise.
  RunConfig ablated = cfg;
  ablated.pipeline.toggles.use_pg = false;
  ablated.pipeline.toggles.use_fg = false;
  Pipeline reference(ablated.pipeline);
  prf::TrainResult c = prf::train(ablated);
  std::vector<Parameter*> ref_params = reference.parameters();
  REQUIRE(ref_params.size() == c.best.params.size());
  int frozen = 0, moved = 0;
  for (std::size_t i = 0; i < ref_params.size(); ++i) {
    const std::string& name = c.best.params[i].first;
    REQUIRE(name == ref_params[i]->name);
    const bool disabled = name.rfind("proposal.", 0) == 0 ||
                          name.rfind("rectifier.pe_gate", 0) == 0 ||
                          name.rfind("rectifier.gate_mca", 0) == 0 ||
                          name.rfind("rectifier.phi", 0) == 0;
    if (disabled) {
      CHECK(bitwise_equal(c.best.params[i].second, ref_params[i]->value));
      ++frozen;
    } else if (!bitwise_equal(c.best.params[i].second, ref_params[i]->value)) {
      ++moved;
    }
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);

  // Empty manifest is a configuration error.
  const std::string empty_manifest = dir + "/empty.jsonl";
  std::ofstream(empty_manifest).close();
  RunConfig bad = cfg;
  bad.train_manifest = empty_manifest;
  CHECK_THROWS_AS(prf::train(bad), prf::ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("exploding learning rate raises divergence with a step") {
  const std::string dir = temp_dir("prf_harness_diverge");
  const std::string manifest = make_dataset(dir, 2, 0, 32, 43);
  RunConfig cfg;
  cfg.pipeline = small_pipeline_config(13);
  cfg.optimizer.lr = 1e300;
  cfg.optimizer.weight_decay = 0.0;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  cfg.warmup_steps = 0;
  cfg.validate_every = 4;
  cfg.train_manifest = manifest;
  try {
    prf::train(cfg);
    CHECK(false);
  } catch (const prf::DivergenceError& e) {
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("inference artifacts are deterministic and dimensioned") {
  const std::string dir = temp_dir("prf_harness_infer");
  Rng rng(55);
  const RgbImage image = prf::make_authentic(24, 40, rng);  // forces pad/crop
  const std::string image_path = dir + "/input.png";
  prf::write_image_png(image_path, image);

  Pipeline pipeline(small_pipeline_config(17));
  prf::InferenceResult r1 = prf::infer(pipeline, image_path, dir + "/out1");
  prf::InferenceResult r2 = prf::infer(pipeline, image_path, dir + "/out2");
  CHECK(std::abs(r1.p_authentic + r1.p_manipulated - 1.0) < 1e-12);
  CHECK(r1.label == (r1.p_manipulated > r1.p_authentic ? 1 : 0));

  std::ifstream v1(r1.verdict_path), v2(r2.verdict_path);
  std::stringstream s1, s2;
  s1 << v1.rdbuf();
  s2 << v2.rdbuf();
  CHECK(s1.str() == s2.str());
  nlohmann::json verdict = nlohmann::json::parse(s1.str());
  CHECK(verdict.contains("label"));
  CHECK(verdict["probabilities"].contains("authentic"));
  CHECK(verdict["probabilities"].contains("manipulated"));

  const Tensor p1 = prf::read_probability_map(r1.probability_path);
  const Tensor p2 = prf::read_probability_map(r2.probability_path);
  CHECK(p1.dim(0) == 24);
  CHECK(p1.dim(1) == 40);
  CHECK(bitwise_equal(p1, p2));
  const Tensor m1 = prf::read_mask_png(r1.mask_path);
  CHECK(m1.dim(0) == 24);
  CHECK(m1.dim(1) == 40);

  CHECK_THROWS_AS(prf::infer(pipeline, dir + "/missing.png", dir + "/out3"),
                  prf::DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("padding reflects rows and columns") {
  Rng rng(65);
  const RgbImage img = prf::make_authentic(17, 33, rng);
  const RgbImage padded = prf::pad_to_16(img);
  CHECK(padded.height() == 32);
  CHECK(padded.width() == 48);
  for (int c = 0; c < 3; ++c) {
    CHECK(padded.pixels.at(17, 5, c) == img.pixels.at(15, 5, c));
    CHECK(padded.pixels.at(31, 5, c) == img.pixels.at(1, 5, c));
    CHECK(padded.pixels.at(4, 33, c) == img.pixels.at(4, 31, c));
    CHECK(padded.pixels.at(4, 47, c) == img.pixels.at(4, 17, c));
  }
  Pipeline pipeline(small_pipeline_config(19));
  const PipelineOutput out = pipeline.predict(img);
  CHECK(out.probabilities.dim(0) == 17);
  CHECK(out.probabilities.dim(1) == 33);

  const RgbImage aligned = prf::pad_to_16(prf::make_authentic(32, 48, rng));
  CHECK(aligned.height() == 32);
  CHECK(aligned.width() == 48);
}

TEST_CASE("parameter activity tracks the toggles") {
  PipelineConfig cfg = small_pipeline_config(23);
  Pipeline all_on(cfg);
  const std::size_t total = all_on.parameters().size();
  CHECK(all_on.active_parameters().size() == total - 2);  // constants idle

  cfg.toggles.use_pg = false;
  Pipeline no_pg(cfg);
  CHECK(no_pg.parameters().size() == total);
  for (Parameter* p : no_pg.active_parameters())
    CHECK(p->name.rfind("proposal.", 0) != 0);

  cfg.toggles = AblationToggles{};
  cfg.toggles.use_esm = false;
  Pipeline no_esm(cfg);
  for (Parameter* p : no_esm.active_parameters()) {
    CHECK(p->name.rfind("segmenter.al", 0) != 0);
    CHECK(p->name.rfind("segmenter.disc", 0) != 0);
    CHECK(p->name.rfind("segmenter.gate", 0) != 0);
  }

  cfg.toggles = AblationToggles{};
  cfg.toggles.use_frm = false;
  Pipeline no_frm(cfg);
  for (Parameter* p : no_frm.active_parameters())
    CHECK(p->name.rfind("rectifier.scale", 0) != 0);

  // Every ablation keeps the archive layout.
  CHECK(no_pg.parameters().size() == no_esm.parameters().size());
  CHECK(no_frm.parameters().size() == total);
}

TEST_CASE("robustness sweep matches the unperturbed column at severity zero") {
  const std::string dir = temp_dir("prf_harness_sweep");
  const std::string manifest = make_dataset(dir, 2, 0, 32, 77);
  const std::vector<ManifestEntry> entries = prf::read_manifest(manifest);
  Pipeline pipeline(small_pipeline_config(29));

  const std::vector<PerturbationKind> kinds = {PerturbationKind::kBrightness,
                                               PerturbationKind::kPinkNoise};
  prf::SweepResult sweep = prf::robustness_sweep(pipeline, entries, kinds, {0, 2}, 99);
  REQUIRE(sweep.rows.size() == 4);
  const prf::MetricsReport plain = prf::evaluate(pipeline, entries);
  for (const prf::SweepRow& row : sweep.rows) {
    if (row.severity == 0) CHECK(std::abs(row.auc - plain.pixel_auc) < 1e-9);
    CHECK(row.auc >= 0.0);
    CHECK(row.auc <= 1.0);
  }

  prf::SweepResult again = prf::robustness_sweep(pipeline, entries, kinds, {0, 2}, 99);
  for (std::size_t i = 0; i < sweep.rows.size(); ++i)
    CHECK(sweep.rows[i].auc == again.rows[i].auc);

  const std::string csv_path = dir + "/sweep.csv";
  prf::write_sweep_csv(sweep, csv_path);
  std::ifstream csv(csv_path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "kind,severity,auc");
  CHECK(lines[1].rfind("brightness,0,", 0) == 0);
  CHECK(lines[4].rfind("pink_noise,2,", 0) == 0);

  const std::string chart_path = dir + "/brightness.png";
  prf::render_sweep_chart(sweep, PerturbationKind::kBrightness, chart_path);
  CHECK(std::filesystem::exists(chart_path));
  CHECK(std::filesystem::file_size(chart_path) > 0);

  CHECK_THROWS_AS(prf::robustness_sweep(pipeline, entries, kinds, {7}, 99),
                  prf::ConfigError);
  CHECK_THROWS_AS(prf::robustness_sweep(pipeline, entries, {}, {0}, 99), prf::ConfigError);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE

}  // namespace
