// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "cllmfs/checkpoint.hpp"
#include "cllmfs/error.hpp"

namespace cllmfs {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error(ErrorKind::config, "lr must be positive");
  if (steps == 0) throw Error(ErrorKind::config, "steps must be at least 1");
  if (batch_size == 0) throw Error(ErrorKind::config, "batch_size must be at least 1");
  if (!(lambda >= 0.0)) throw Error(ErrorKind::config, "lambda must be non-negative");
  if (!(grad_clip >= 0.0)) throw Error(ErrorKind::config, "grad_clip must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorKind::config, "betas must lie in [0, 1)");
  }
  if (!(noise.sigma >= 0.0)) throw Error(ErrorKind::config, "sigma must be non-negative");
  contrastive.validate();
}

const char* to_string(LrDecay decay) {
  switch (decay) {
    case LrDecay::constant: return "constant";
    case LrDecay::linear: return "linear";
    case LrDecay::cosine: return "cosine";
  }
  return "?";
}

LrDecay parse_lr_decay(std::string_view text) {
  if (text == "constant") return LrDecay::constant;
  if (text == "linear") return LrDecay::linear;
  if (text == "cosine") return LrDecay::cosine;
  throw Error(ErrorKind::config, "unknown lr_decay '" + std::string(text) + "' (constant, linear, cosine)");
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step == 0) step = 1;
  if (step <= cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (cfg.lr_decay == LrDecay::constant || cfg.steps <= cfg.warmup_steps) return cfg.lr;
  const double span = static_cast<double>(cfg.steps - cfg.warmup_steps);
  const double p = std::min(1.0, static_cast<double>(step - cfg.warmup_steps - 1) / span);
  if (cfg.lr_decay == LrDecay::linear) return cfg.lr * (1.0 - p);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

json to_json(const TrainConfig& c) {
  json j = {{"lr", c.lr},
            {"warmup_steps", c.warmup_steps},
            {"lr_decay", to_string(c.lr_decay)},
            {"betas", {c.beta1, c.beta2}},
            {"eps", c.eps},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"lambda", c.lambda},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"tau", c.contrastive.tau},
            {"neighbor_window", c.contrastive.neighbor_window},
            {"verbatim_denominator", c.contrastive.verbatim_denominator},
            {"sigma", c.noise.sigma},
            {"noise", c.noise.enabled},
            {"noise_seed", c.noise.seed},
            {"noise_kind", to_string(c.noise.kind)},
            {"noise_mode", to_string(c.noise.mode)}};
  j["tap_layer"] = c.contrastive.tap_layer ? json(*c.contrastive.tap_layer) : json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> kKeys = {
      "lr",         "warmup_steps", "lr_decay", "betas",      "eps",        "steps",      "batch_size",           "lambda",
      "grad_clip",  "seed",       "checkpoint_every", "tau", "neighbor_window", "verbatim_denominator",
      "sigma",      "noise",      "noise_seed", "noise_kind", "noise_mode",           "tap_layer"};
  if (!j.is_object()) throw Error(ErrorKind::config, "train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw Error(ErrorKind::config, "unknown train config key '" + key + "'");
  }
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("lr_decay")) c.lr_decay = parse_lr_decay(j.at("lr_decay").get<std::string>());
    if (j.contains("betas")) {
      c.beta1 = j.at("betas").at(0).get<double>();
      c.beta2 = j.at("betas").at(1).get<double>();
    }
    c.eps = j.value("eps", c.eps);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda = j.value("lambda", c.lambda);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.contrastive.tau = j.value("tau", c.contrastive.tau);
    c.contrastive.neighbor_window = j.value("neighbor_window", c.contrastive.neighbor_window);
    c.contrastive.verbatim_denominator = j.value("verbatim_denominator", c.contrastive.verbatim_denominator);
    if (j.contains("tap_layer") && !j.at("tap_layer").is_null()) c.contrastive.tap_layer = j.at("tap_layer").get<std::size_t>();
    c.noise.sigma = j.value("sigma", c.noise.sigma);
    c.noise.enabled = j.value("noise", c.noise.enabled);
    c.noise.seed = j.value("noise_seed", c.noise.seed);
    if (j.contains("noise_kind")) c.noise.kind = parse_noise_kind(j.at("noise_kind").get<std::string>());
    if (j.contains("noise_mode")) c.noise.mode = parse_noise_mode(j.at("noise_mode").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

PreparedRecord prepare_record(const SftRecord& record, const Vocab& vocab, const ContrastiveConfig& cfg,
                              std::size_t max_seq) {
  PreparedRecord p;
  p.id = record.id;
  p.layout = layout_record(record, vocab);
  if (p.layout.tokens.size() > max_seq) {
    throw Error(ErrorKind::length, "record " + record.id + " has " + std::to_string(p.layout.tokens.size()) +
                                       " tokens, max_seq is " + std::to_string(max_seq));
  }
  if (p.layout.output.start == 0 || p.layout.output.size() == 0) {
    throw Error(ErrorKind::data, "record " + record.id + " has an empty prompt or output");
  }
  p.spans = locate_spans(record, p.layout, vocab, cfg.neighbor_window);
  return p;
}

Tensor sft_token_loss(Tape& tape, const Tensor& logits, const RecordLayout& layout) {
  if (layout.output.start == 0 || layout.output.size() == 0) {
    throw Error(ErrorKind::contract, "cross-entropy needs a nonempty prompt and output");
  }
  std::vector<std::size_t> positions, targets;
  for (std::size_t i = layout.output.start; i < layout.output.end; ++i) {
    positions.push_back(i - 1);
    targets.push_back(layout.tokens[i]);
  }
  return ad::softmax_cross_entropy(tape, ad::gather_rows(tape, logits, positions), targets);
}

Tensor sft_token_loss(Tape& tape, const AdaptedModel& model, const PreparedRecord& record) {
  const auto out = forward(tape, model, record.layout.tokens);
  return sft_token_loss(tape, out.logits, record.layout);
}

json StepMetrics::to_json() const {
  return {{"step", step}, {"loss", loss}, {"ce", ce}, {"cl", cl}, {"grad_norm", grad_norm}, {"lr", lr}};
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Trainer::Trainer(AdaptedModel model, Vocab vocab, std::vector<SftRecord> records, TrainConfig cfg)
    : model_(std::move(model)), vocab_(std::move(vocab)), records_(std::move(records)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (records_.empty()) throw Error(ErrorKind::data, "no training records");
  if (vocab_.size() != model_.base.config.vocab_size) {
    throw Error(ErrorKind::config, "vocabulary has " + std::to_string(vocab_.size()) + " entries, model expects " +
                                       std::to_string(model_.base.config.vocab_size));
  }
  tap_ = cfg_.contrastive.tap_layer.value_or(contrastive_tap_layer(model_.base.config));
  if (tap_ < 1 || tap_ > model_.base.config.n_layers) {
    throw Error(ErrorKind::config, "tap_layer must lie in [1, n_layers]");
  }
  prepared_.reserve(records_.size());
  for (const auto& r : records_) prepared_.push_back(prepare_record(r, vocab_, cfg_.contrastive, model_.base.config.max_seq));
  trainable_ = model_.lora.named_tensors();
  for (const auto& [_, t] : trainable_) {
    adam_m_.emplace_back(t.numel(), 0.0);
    adam_v_.emplace_back(t.numel(), 0.0);
  }
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = records_.size();
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::size_t cached_epoch = SIZE_MAX;
  for (std::size_t k = 0; k < cfg_.batch_size; ++k) {
    const std::size_t pos = step * cfg_.batch_size + k;
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix(cfg_.seed ^ mix(epoch)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

StepMetrics Trainer::step() { return train_step(batch_indices(step_)); }

StepMetrics Trainer::train_step(std::span<const std::size_t> batch) {
  if (batch.empty()) throw Error(ErrorKind::contract, "empty batch");
  Tape tape;
  std::vector<Tensor> ces;
  PairSet pairs;
  for (std::size_t idx : batch) {
    const auto& rec = prepared_.at(idx);
    const auto out = forward(tape, model_, rec.layout.tokens);
    ces.push_back(sft_token_loss(tape, out.logits, rec.layout));
    auto p = build_pairs(tape, out.hidden_states[tap_], rec.spans, cfg_.noise, noise_calls_);
    for (auto& pos : p.positives) pairs.positives.push_back(std::move(pos));
  }
  const Tensor ce = ad::mean(tape, ad::stack(tape, ces));
  const Tensor cl = pairs.positives.empty() ? Tensor::scalar(0.0) : infonce_loss(tape, pairs, cfg_.contrastive);
  const Tensor loss = combined_loss(tape, ce, cl, cfg_.lambda);
  if (!std::isfinite(loss.item())) {
    std::string ids;
    for (std::size_t idx : batch) ids += (ids.empty() ? "" : ", ") + prepared_[idx].id;
    throw Error(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step_) + " on records " + ids);
  }
  for (const auto& [_, t] : trainable_) t.zero_grad();
  tape.backward(loss);

  double sq = 0.0;
  for (const auto& [_, t] : trainable_)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  ++step_;
  const double lr = learning_rate(cfg_, step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < trainable_.size(); ++i) {
    Tensor t = trainable_[i].second;
    auto w = t.data();
    auto g = t.grad();
    auto& m = adam_m_[i];
    auto& v = adam_v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
    t.drop_grad();
  }
  return {step_, loss.item(), ce.item(), cl.item(), norm, lr};
}

void Trainer::run(const std::function<void(const StepMetrics&)>& on_step,
                  const std::optional<std::filesystem::path>& checkpoint_dir) {
  while (step_ < cfg_.steps) {
    const auto m = step();
    if (on_step) on_step(m);
    if (checkpoint_dir && cfg_.checkpoint_every && step_ % cfg_.checkpoint_every == 0 && step_ < cfg_.steps) {
      save(*checkpoint_dir);
    }
  }
  if (checkpoint_dir) save(*checkpoint_dir);
}

void Trainer::save(const std::filesystem::path& dir) const {
  TensorBundle bundle;
  bundle.metadata["model_config"] = to_json(model_.base.config);
  bundle.metadata["lora_spec"] = to_json(model_.spec);
  bundle.metadata["train_config"] = to_json(cfg_);
  bundle.metadata["step"] = step_;
  bundle.metadata["rng_state"] = {{"seed", cfg_.seed}, {"noise_calls", noise_calls_}};
  bundle.metadata["vocab"] = vocab_.tokens();
  bundle.tensors = model_.base.named_tensors();
  for (const auto& nt : trainable_) bundle.tensors.push_back(nt);
  for (std::size_t i = 0; i < trainable_.size(); ++i) {
    const auto& [name, t] = trainable_[i];
    bundle.tensors.emplace_back("adam.m." + name, Tensor::from(t.shape(), adam_m_[i]));
    bundle.tensors.emplace_back("adam.v." + name, Tensor::from(t.shape(), adam_v_[i]));
  }
  save_bundle(dir, bundle);
}

namespace {

std::pair<AdaptedModel, Vocab> model_from_bundle(const TensorBundle& bundle) {
  try {
    const ModelConfig mc = model_config_from_json(bundle.metadata.at("model_config"));
    const LoraSpec spec = lora_spec_from_json(bundle.metadata.at("lora_spec"));
    Vocab vocab = Vocab::from_tokens(bundle.metadata.at("vocab").get<std::vector<std::string>>());
    ModelParams base = init_params(mc);
    restore_tensors(bundle, base.named_tensors());
    AdaptedModel model = attach(std::move(base), spec, 0);
    restore_tensors(bundle, model.lora.named_tensors());
    return {std::move(model), std::move(vocab)};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, std::string("checkpoint manifest: ") + e.what());
  }
}

}  // namespace

std::pair<AdaptedModel, Vocab> load_model(const std::filesystem::path& dir) {
  return model_from_bundle(load_bundle(dir));
}

Trainer Trainer::load(const std::filesystem::path& dir, std::vector<SftRecord> records) {
  const TensorBundle bundle = load_bundle(dir);
  auto [model, vocab] = model_from_bundle(bundle);
  TrainConfig cfg = train_config_from_json(bundle.metadata.at("train_config"));
  Trainer t(std::move(model), std::move(vocab), std::move(records), std::move(cfg));
  try {
    t.step_ = bundle.metadata.at("step").get<std::size_t>();
    t.noise_calls_ = bundle.metadata.at("rng_state").at("noise_calls").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::data, std::string("checkpoint manifest: ") + e.what());
  }
  for (std::size_t i = 0; i < t.trainable_.size(); ++i) {
    const auto& name = t.trainable_[i].first;
    const auto m = bundle.at("adam.m." + name).data();
    const auto v = bundle.at("adam.v." + name).data();
    if (m.size() != t.adam_m_[i].size() || v.size() != t.adam_v_[i].size()) {
      throw Error(ErrorKind::data, "optimizer state for '" + name + "' has the wrong size");
    }
    t.adam_m_[i].assign(m.begin(), m.end());
    t.adam_v_[i].assign(v.begin(), v.end());
  }
  return t;
}

}  // namespace cllmfs
