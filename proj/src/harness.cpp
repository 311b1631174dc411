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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <zlib.h>

#include "json.hpp"
#include "prf/errors.hpp"

namespace prf {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr double kAdamEps = 1e-8;

nlohmann::json config_to_json_obj(const RunConfig& cfg) {
  nlohmann::json model;
  model["d"] = cfg.pipeline.d;
  model["d_conv"] = cfg.pipeline.d_conv;
  model["c"] = cfg.pipeline.c;
  model["heads"] = cfg.pipeline.heads;
  model["patch"] = cfg.pipeline.patch;
  model["residual_norm"] = cfg.pipeline.residual_norm;
  model["backend"] = cfg.pipeline.backend;
  model["backend_command"] = cfg.pipeline.backend_command;
  model["prompt"] = cfg.pipeline.prompt;
  nlohmann::json scales = nlohmann::json::array();
  for (const ScaleConfig& s : cfg.pipeline.scales)
    scales.push_back({s.kernel_size, s.dilation});
  model["scales"] = scales;

  nlohmann::json j;
  j["seed"] = cfg.pipeline.seed;
  j["model"] = model;
  j["toggles"] = {{"use_frm", cfg.pipeline.toggles.use_frm},
                  {"use_fg", cfg.pipeline.toggles.use_fg},
                  {"use_esm", cfg.pipeline.toggles.use_esm},
                  {"use_pg", cfg.pipeline.toggles.use_pg}};
  j["loss"] = {{"lambda_bce", cfg.loss.lambda_bce}, {"lambda_dice", cfg.loss.lambda_dice}};
  j["optimizer"] = {{"lr", cfg.optimizer.lr},
                    {"beta1", cfg.optimizer.beta1},
                    {"beta2", cfg.optimizer.beta2},
                    {"weight_decay", cfg.optimizer.weight_decay}};
  j["epochs"] = cfg.epochs;
  j["warmup_steps"] = cfg.warmup_steps;
  j["validate_every"] = cfg.validate_every;
  j["batch_size"] = cfg.batch_size;
  j["max_steps"] = cfg.max_steps;
  j["data"] = {{"train_manifest", cfg.train_manifest},
               {"val_manifest", cfg.val_manifest},
               {"checkpoint_out", cfg.checkpoint_out}};
  return j;
}

RunConfig config_from_json_obj(const nlohmann::json& j) {
  RunConfig cfg;
  try {
    cfg.pipeline.seed = j.value("seed", cfg.pipeline.seed);
    if (j.contains("model")) {
      const nlohmann::json& m = j.at("model");
      cfg.pipeline.d = m.value("d", cfg.pipeline.d);
      cfg.pipeline.d_conv = m.value("d_conv", cfg.pipeline.d_conv);
      cfg.pipeline.c = m.value("c", cfg.pipeline.c);
      cfg.pipeline.heads = m.value("heads", cfg.pipeline.heads);
      cfg.pipeline.patch = m.value("patch", cfg.pipeline.patch);
      cfg.pipeline.residual_norm = m.value("residual_norm", cfg.pipeline.residual_norm);
      cfg.pipeline.backend = m.value("backend", cfg.pipeline.backend);
      cfg.pipeline.backend_command =
          m.value("backend_command", cfg.pipeline.backend_command);
      cfg.pipeline.prompt = m.value("prompt", cfg.pipeline.prompt);
      if (m.contains("scales")) {
        const nlohmann::json& scales = m.at("scales");
        if (!scales.is_array() || scales.size() != 3)
          throw ConfigError("config model.scales must list exactly 3 [kernel, dilation] pairs");
        for (std::size_t k = 0; k < 3; ++k) {
          if (!scales[k].is_array() || scales[k].size() != 2)
            throw ConfigError("config model.scales entries must be [kernel, dilation]");
          cfg.pipeline.scales[k].kernel_size = scales[k][0].get<int>();
          cfg.pipeline.scales[k].dilation = scales[k][1].get<int>();
          cfg.pipeline.scales[k].scale_index = static_cast<int>(k) + 1;
        }
      }
    }
    if (j.contains("toggles")) {
      const nlohmann::json& t = j.at("toggles");
      cfg.pipeline.toggles.use_frm = t.value("use_frm", true);
      cfg.pipeline.toggles.use_fg = t.value("use_fg", true);
      cfg.pipeline.toggles.use_esm = t.value("use_esm", true);
      cfg.pipeline.toggles.use_pg = t.value("use_pg", true);
    }
    if (j.contains("loss")) {
      cfg.loss.lambda_bce = j.at("loss").value("lambda_bce", cfg.loss.lambda_bce);
      cfg.loss.lambda_dice = j.at("loss").value("lambda_dice", cfg.loss.lambda_dice);
    }
    if (j.contains("optimizer")) {
      const nlohmann::json& o = j.at("optimizer");
      cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
      cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
      cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
      cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
    }
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.validate_every = j.value("validate_every", cfg.validate_every);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    if (j.contains("data")) {
      const nlohmann::json& d = j.at("data");
      cfg.train_manifest = d.value("train_manifest", cfg.train_manifest);
      cfg.val_manifest = d.value("val_manifest", cfg.val_manifest);
      cfg.checkpoint_out = d.value("checkpoint_out", cfg.checkpoint_out);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  validate_run_config(cfg);
  return cfg;
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)]))
         << (8 * i);
  return v;
}

std::uint64_t read_u64(const std::string& buf, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)]))
         << (8 * i);
  return v;
}

void append_tensor(std::string& out, const Tensor& t) {
  const char* bytes = reinterpret_cast<const char*>(t.data());
  out.append(bytes, static_cast<std::size_t>(t.size()) * sizeof(double));
}

Tensor read_tensor(const std::string& buf, std::size_t& off, const std::vector<int>& shape) {
  Tensor t(shape);
  const std::size_t bytes = static_cast<std::size_t>(t.size()) * sizeof(double);
  if (off + bytes > buf.size()) throw DataError("checkpoint payload is truncated");
  std::memcpy(t.data(), buf.data() + off, bytes);
  off += bytes;
  return t;
}

nlohmann::json array_index(const std::vector<std::pair<std::string, Tensor>>& arrays) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [name, value] : arrays)
    out.push_back({{"name", name}, {"shape", value.shape()}});
  return out;
}

std::vector<std::pair<std::string, std::vector<int>>> parse_array_index(
    const nlohmann::json& j) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  for (const nlohmann::json& row : j)
    out.emplace_back(row.at("name").get<std::string>(),
                     row.at("shape").get<std::vector<int>>());
  return out;
}

std::uint64_t sweep_stream(PerturbationKind kind, int severity) {
  return (static_cast<std::uint64_t>(kind) << 8) | static_cast<std::uint64_t>(severity);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void validate_run_config(const RunConfig& cfg) {
  if (cfg.epochs <= 0) throw ConfigError("epochs must be positive");
  if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (cfg.validate_every <= 0) throw ConfigError("validate_every must be positive");
  if (cfg.warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (cfg.max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (!(cfg.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (cfg.optimizer.beta1 < 0.0 || cfg.optimizer.beta1 >= 1.0)
    throw ConfigError("optimizer.beta1 must be in [0, 1)");
  if (cfg.optimizer.beta2 < 0.0 || cfg.optimizer.beta2 >= 1.0)
    throw ConfigError("optimizer.beta2 must be in [0, 1)");
  if (cfg.optimizer.weight_decay < 0.0)
    throw ConfigError("optimizer.weight_decay must be non-negative");
  if (cfg.loss.lambda_bce < 0.0 || cfg.loss.lambda_dice < 0.0)
    throw ConfigError("loss weights must be non-negative");
  if (cfg.pipeline.d <= 0 || cfg.pipeline.c <= 0 || cfg.pipeline.heads <= 0 ||
      cfg.pipeline.patch <= 0)
    throw ConfigError("model dimensions must be positive");
  if (cfg.pipeline.d_conv < 0) throw ConfigError("model d_conv must be non-negative");
}

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  return config_from_json_obj(j);
}

std::string run_config_to_json(const RunConfig& cfg) {
  return config_to_json_obj(cfg).dump(2) + "\n";
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read run config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from_json(ss.str());
}

double warmup_scale(std::int64_t step, int warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(warmup_steps);
}

AdamW::AdamW(std::vector<Parameter*> params, const OptimizerConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double lr = cfg_.lr * lr_scale;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    for (std::int64_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * g;
      v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * g * g;
      const double update = (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + kAdamEps);
      p.value[k] -= lr * (update + cfg_.weight_decay * p.value[k]);
    }
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header;
  header["config"] = config_to_json_obj(ckpt.config);
  header["step"] = ckpt.step;
  header["opt_steps"] = ckpt.opt_steps;
  header["params"] = array_index(ckpt.params);
  header["opt"] = array_index(ckpt.opt_m);

  std::string bytes(kMagic, sizeof(kMagic));
  append_u32(bytes, ckpt.version);
  const std::string header_text = header.dump();
  append_u64(bytes, header_text.size());
  bytes += header_text;
  for (const auto& [name, value] : ckpt.params) append_tensor(bytes, value);
  for (const auto& [name, value] : ckpt.opt_m) append_tensor(bytes, value);
  for (const auto& [name, value] : ckpt.opt_v) append_tensor(bytes, value);

  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(bytes.data()),
            static_cast<uInt>(bytes.size())));
  append_u32(bytes, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();

  if (bytes.size() < sizeof(kMagic) + 4 + 8 + 4)
    throw DataError("checkpoint integrity failure: file too short");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("not a checkpoint file: " + path);
  const std::uint32_t stored_crc = read_u32(bytes, bytes.size() - 4);
  const std::uint32_t actual_crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(bytes.data()),
            static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc)
    throw DataError("checkpoint integrity failure: checksum mismatch");

  Checkpoint ckpt;
  std::size_t off = sizeof(kMagic);
  ckpt.version = read_u32(bytes, off);
  off += 4;
  if (ckpt.version != 1)
    throw DataError("checkpoint version " + std::to_string(ckpt.version) +
                    " is unsupported; this build reads version 1 and has no migration path");
  const std::uint64_t header_len = read_u64(bytes, off);
  off += 8;
  if (off + header_len + 4 > bytes.size())
    throw DataError("checkpoint integrity failure: header overruns file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(off, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  off += header_len;

  try {
    ckpt.config = config_from_json_obj(header.at("config"));
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.opt_steps = header.at("opt_steps").get<std::int64_t>();
    for (const auto& [name, shape] : parse_array_index(header.at("params")))
      ckpt.params.emplace_back(name, read_tensor(bytes, off, shape));
    const auto opt_index = parse_array_index(header.at("opt"));
    for (const auto& [name, shape] : opt_index)
      ckpt.opt_m.emplace_back(name, read_tensor(bytes, off, shape));
    for (const auto& [name, shape] : opt_index)
      ckpt.opt_v.emplace_back(name, read_tensor(bytes, off, shape));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is malformed: ") + e.what());
  }
  if (off != bytes.size() - 4)
    throw DataError("checkpoint integrity failure: payload size mismatch");
  return ckpt;
}

Checkpoint snapshot_checkpoint(Pipeline& pipeline, const RunConfig& cfg, AdamW* opt,
                               std::int64_t step) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.step = step;
  for (Parameter* p : pipeline.parameters()) ckpt.params.emplace_back(p->name, p->value.clone());
  if (opt != nullptr) {
    ckpt.opt_steps = opt->steps();
    for (std::size_t i = 0; i < opt->params().size(); ++i) {
      ckpt.opt_m.emplace_back(opt->params()[i]->name, opt->first_moment(i).clone());
      ckpt.opt_v.emplace_back(opt->params()[i]->name, opt->second_moment(i).clone());
    }
  }
  return ckpt;
}

void restore_pipeline(Pipeline& pipeline, const Checkpoint& ckpt) {
  std::vector<Parameter*> params = pipeline.parameters();
  if (ckpt.params.size() != params.size())
    throw DataError("checkpoint parameter count " + std::to_string(ckpt.params.size()) +
                    " does not match the model's " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = ckpt.params[i];
    if (name != params[i]->name)
      throw DataError("checkpoint array " + name + " does not match model array " +
                      params[i]->name);
    if (value.shape() != params[i]->value.shape())
      throw DataError("checkpoint array " + name + " has an incompatible shape");
    params[i]->value = value.clone();
    params[i]->zero_grad();
  }
}

void restore_optimizer(AdamW& opt, const Checkpoint& ckpt) {
  if (ckpt.opt_m.size() != opt.params().size() || ckpt.opt_v.size() != opt.params().size())
    throw DataError("checkpoint optimizer state does not cover the active parameters");
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    if (ckpt.opt_m[i].first != opt.params()[i]->name)
      throw DataError("checkpoint optimizer array " + ckpt.opt_m[i].first +
                      " does not match active parameter " + opt.params()[i]->name);
    if (ckpt.opt_m[i].second.shape() != opt.params()[i]->value.shape())
      throw DataError("checkpoint optimizer array " + ckpt.opt_m[i].first +
                      " has an incompatible shape");
    opt.first_moment(i) = ckpt.opt_m[i].second.clone();
    opt.second_moment(i) = ckpt.opt_v[i].second.clone();
  }
  opt.set_steps(ckpt.opt_steps);
}

std::unique_ptr<Pipeline> pipeline_from_checkpoint(const Checkpoint& ckpt) {
  auto pipeline = std::make_unique<Pipeline>(ckpt.config.pipeline);
  restore_pipeline(*pipeline, ckpt);
  return pipeline;
}

MetricsReport evaluate_entries(const std::vector<ManifestEntry>& entries, const PredictFn& fn,
                               bool include_authentic_pixels) {
  std::vector<SampleMetrics> rows;
  rows.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    Sample s = load_sample(e);
    PipelineOutput out = fn(s);
    SampleMetrics m;
    m.id = e.image_path;
    m.label = s.label;
    m.predicted = out.logits[1] > out.logits[0] ? 1 : 0;
    const Tensor bin = binarize_mask(out.probabilities, 0.5);
    m.pixel_f1 = pixel_f1(bin, s.mask);
    m.pixel_iou = mask_iou(bin, s.mask);
    if (auto auc = pixel_auc(out.probabilities, s.mask)) {
      m.pixel_auc = *auc;
      m.auc_defined = true;
    }
    rows.push_back(std::move(m));
  }
  return summarize_metrics(std::move(rows), include_authentic_pixels);
}

MetricsReport evaluate(Pipeline& pipeline, const std::vector<ManifestEntry>& entries,
                       bool include_authentic_pixels) {
  return evaluate_entries(
      entries, [&](const Sample& s) { return pipeline.predict(s.image); },
      include_authentic_pixels);
}

TrainResult train(const RunConfig& cfg) {
  validate_run_config(cfg);
  const std::vector<ManifestEntry> train_entries = read_manifest(cfg.train_manifest);
  if (train_entries.empty())
    throw ConfigError("training manifest is empty: " + cfg.train_manifest);
  const std::vector<ManifestEntry> val_entries =
      cfg.val_manifest.empty() ? train_entries : read_manifest(cfg.val_manifest);
  if (val_entries.empty())
    throw ConfigError("validation manifest is empty: " + cfg.val_manifest);

  std::vector<Sample> samples;
  samples.reserve(train_entries.size());
  for (const ManifestEntry& e : train_entries) samples.push_back(load_sample(e));

  Pipeline pipeline(cfg.pipeline);
  AdamW opt(pipeline.active_parameters(), cfg.optimizer);
  Rng order(Rng::mix(cfg.pipeline.seed, 0x0deb));

  TrainResult result;
  bool have_best = false;
  std::int64_t step = 0;
  double last_loss = 0.0;
  bool stop = false;

  const auto run_validation = [&] {
    const MetricsReport report = evaluate(pipeline, val_entries, false);
    const double score = 0.5 * (report.pixel_f1 + report.image_acc);
    if (!have_best || score > result.best_score) {
      have_best = true;
      result.best_score = score;
      result.best_metrics = report;
      result.best = snapshot_checkpoint(pipeline, cfg, &opt, step);
    }
  };

  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<std::size_t>(
                    order.uniform_int(0, static_cast<long>(i) - 1))]);
    for (std::size_t start = 0; start < idx.size() && !stop;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = samples[idx[i]];
        ad::Tape t(true);
        PipelineVars out = pipeline.forward(t, s.image);
        ad::Var loss = ad::cross_entropy_logits(out.logits, s.label);
        if (s.label == 1) {
          loss = ad::add(loss,
                         ad::mul_scalar(mask_bce_loss(out.probs, s.mask), cfg.loss.lambda_bce));
          loss = ad::add(loss, ad::mul_scalar(mask_dice_loss(out.probs, s.mask),
                                              cfg.loss.lambda_dice));
        }
        t.backward(ad::mul_scalar(loss, inv));
        batch_loss += loss.val()[0] * inv;
      }
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training loss is not finite", static_cast<long>(step + 1));
      ++step;
      opt.step(warmup_scale(step, cfg.warmup_steps));
      pipeline.filter_bank().project_constraints();
      last_loss = batch_loss;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }
    if (epoch % cfg.validate_every == 0 || epoch == cfg.epochs || stop) run_validation();
  }
  if (!have_best) run_validation();
  result.final_loss = last_loss;
  result.steps = step;
  return result;
}

InferenceResult infer(Pipeline& pipeline, const std::string& image_path,
                      const std::string& out_dir) {
  const RgbImage image = read_image_png(image_path);
  const PipelineOutput out = pipeline.predict(image);

  const double m = std::max(out.logits[0], out.logits[1]);
  double p0 = std::exp(out.logits[0] - m), p1 = std::exp(out.logits[1] - m);
  const double z = p0 + p1;
  p0 /= z;
  p1 /= z;

  std::filesystem::create_directories(out_dir);
  const std::string stem = std::filesystem::path(image_path).stem().string();
  InferenceResult result;
  result.label = p1 > p0 ? 1 : 0;
  result.p_authentic = p0;
  result.p_manipulated = p1;
  result.verdict_path =
      (std::filesystem::path(out_dir) / (stem + ".verdict.json")).string();
  result.mask_path = (std::filesystem::path(out_dir) / (stem + ".mask.png")).string();
  result.probability_path =
      (std::filesystem::path(out_dir) / (stem + ".prob.bin")).string();

  nlohmann::json verdict;
  verdict["label"] = result.label == 1 ? "manipulated" : "authentic";
  verdict["probabilities"] = {{"authentic", p0}, {"manipulated", p1}};
  std::ofstream f(result.verdict_path);
  if (!f) throw DataError("cannot write verdict: " + result.verdict_path);
  f << verdict.dump(2) << "\n";

  write_mask_png(result.mask_path, out.probabilities, 0.5);
  write_probability_map(result.probability_path, out.probabilities);
  return result;
}

SweepResult robustness_sweep(Pipeline& pipeline, const std::vector<ManifestEntry>& entries,
                             const std::vector<PerturbationKind>& kinds,
                             const std::vector<int>& severities, std::uint64_t seed) {
  if (kinds.empty() || severities.empty())
    throw ConfigError("sweep needs at least one kind and one severity");
  for (int s : severities)
    if (s < 0 || s > 5) throw ConfigError("sweep severity must be in 0..5");

  // Probe codecs up front so unsupported kinds fail before any evaluation.
  std::vector<std::string> unsupported;
  for (PerturbationKind kind : kinds) {
    if (kind != PerturbationKind::kJpeg2000) continue;
    RgbImage probe;
    probe.pixels = Tensor({16, 16, 3});
    probe.pixels.fill(0.5);
    PerturbationSpec spec;
    spec.kind = kind;
    spec.severity = 1;
    try {
      perturb(probe, spec);
    } catch (const Error&) {
      unsupported.push_back(perturbation_name(kind));
    }
  }
  if (!unsupported.empty()) {
    std::string joined;
    for (const std::string& name : unsupported)
      joined += (joined.empty() ? "" : ", ") + name;
    throw Error("unsupported perturbation kinds: " + joined);
  }

  SweepResult result;
  for (PerturbationKind kind : kinds) {
    for (int severity : severities) {
      const std::uint64_t stream = Rng::mix(seed, sweep_stream(kind, severity));
      std::uint64_t index = 0;
      const PredictFn fn = [&](const Sample& s) {
        PerturbationSpec spec;
        spec.kind = kind;
        spec.severity = severity;
        spec.seed = Rng::mix(stream, index++);
        return pipeline.predict(perturb(s.image, spec));
      };
      const MetricsReport report = evaluate_entries(entries, fn, false);
      result.rows.push_back({kind, severity, report.pixel_auc});
    }
  }
  return result;
}

void write_sweep_csv(const SweepResult& result, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write sweep csv: " + path);
  f << "kind,severity,auc\n";
  for (const SweepRow& row : result.rows)
    f << perturbation_name(row.kind) << "," << row.severity << "," << format_double(row.auc)
      << "\n";
}

void render_sweep_chart(const SweepResult& result, PerturbationKind kind,
                        const std::string& path) {
  std::vector<SweepRow> rows;
  for (const SweepRow& row : result.rows)
    if (row.kind == kind) rows.push_back(row);
  if (rows.empty()) throw ContractError("no sweep rows for the requested kind");
  std::sort(rows.begin(), rows.end(),
            [](const SweepRow& a, const SweepRow& b) { return a.severity < b.severity; });

  const int width = 640, height = 480, margin = 60;
  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Scalar axis_color(40, 40, 40), grid_color(210, 210, 210), line_color(160, 80, 0);

  const auto to_x = [&](double severity) {
    const double lo = rows.front().severity, hi = rows.back().severity;
    const double t = hi > lo ? (severity - lo) / (hi - lo) : 0.5;
    return margin + static_cast<int>(std::lround(t * (width - 2 * margin)));
  };
  const auto to_y = [&](double auc) {
    return height - margin - static_cast<int>(std::lround(auc * (height - 2 * margin)));
  };

  for (int g = 0; g <= 4; ++g) {
    const double level = 0.25 * g;
    cv::line(canvas, {margin, to_y(level)}, {width - margin, to_y(level)}, grid_color, 1);
    cv::putText(canvas, format_double(level).substr(0, 4), {8, to_y(level) + 4},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, axis_color, 1);
  }
  cv::line(canvas, {margin, margin}, {margin, height - margin}, axis_color, 2);
  cv::line(canvas, {margin, height - margin}, {width - margin, height - margin}, axis_color,
           2);

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const cv::Point pt(to_x(rows[i].severity), to_y(rows[i].auc));
    if (i > 0)
      cv::line(canvas, {to_x(rows[i - 1].severity), to_y(rows[i - 1].auc)}, pt, line_color,
               2);
    cv::circle(canvas, pt, 4, line_color, cv::FILLED);
    cv::putText(canvas, std::to_string(rows[i].severity),
                {pt.x - 4, height - margin + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis_color,
                1);
  }
  cv::putText(canvas, "pixel AUC vs severity: " + perturbation_name(kind),
              {margin, margin - 18}, cv::FONT_HERSHEY_SIMPLEX, 0.6, axis_color, 1);
  if (!cv::imwrite(path, canvas)) throw DataError("cannot write sweep chart: " + path);
}

}  // namespace prf
