// SPDX-License-Identifier: Apache-2.0
//
// LoRA fine-tuning on SFT records with loss ce + λ·cl. Cross-entropy covers
// only the output segment. Updates are Adam with global-norm clipping, applied
// to adapter tensors alone.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "cllmfs/contrastive.hpp"
#include "cllmfs/lora.hpp"
#include "cllmfs/sft.hpp"

namespace cllmfs {

// Learning-rate shape after warmup: flat, or decaying to zero at `steps`.
enum class LrDecay { constant, linear, cosine };
const char* to_string(LrDecay decay);
LrDecay parse_lr_decay(std::string_view text);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t warmup_steps = 0;  // linear ramp from lr/warmup_steps
  LrDecay lr_decay = LrDecay::constant;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 100;
  std::size_t batch_size = 4;
  double lambda = 0.001;
  double grad_clip = 1.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only at the end of run()
  ContrastiveConfig contrastive;
  NoiseConfig noise;

  void validate() const;
};

// Rate used by optimizer step `step` (1-based).
double learning_rate(const TrainConfig& cfg, std::size_t step);

nlohmann::json to_json(const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys are config errors.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Tokenized record with contrastive spans resolved once up front.
struct PreparedRecord {
  std::string id;
  RecordLayout layout;
  SpanLocator spans;
};

PreparedRecord prepare_record(const SftRecord& record, const Vocab& vocab, const ContrastiveConfig& cfg,
                              std::size_t max_seq);

// Mean next-token cross-entropy over the output segment, given full-sequence
// logits [seq×V]. Position i predicts token i+1.
Tensor sft_token_loss(Tape& tape, const Tensor& logits, const RecordLayout& layout);
Tensor sft_token_loss(Tape& tape, const AdaptedModel& model, const PreparedRecord& record);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double cl = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const;
};

class Trainer {
 public:
  Trainer(AdaptedModel model, Vocab vocab, std::vector<SftRecord> records, TrainConfig cfg);

  // Next batch in the seeded data order.
  StepMetrics step();
  StepMetrics train_step(std::span<const std::size_t> batch);

  // Runs until cfg.steps, writing a checkpoint every cfg.checkpoint_every
  // steps and at the end when `checkpoint_dir` is given.
  void run(const std::function<void(const StepMetrics&)>& on_step = {},
           const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

  void save(const std::filesystem::path& dir) const;
  // Rebuilds a trainer from a checkpoint; `records` must be the same data.
  static Trainer load(const std::filesystem::path& dir, std::vector<SftRecord> records);

  std::vector<std::size_t> batch_indices(std::size_t step) const;

  const AdaptedModel& model() const { return model_; }
  const Vocab& vocab() const { return vocab_; }
  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  std::size_t steps_done() const { return step_; }
  std::size_t tap_layer() const { return tap_; }

 private:
  AdaptedModel model_;
  Vocab vocab_;
  std::vector<SftRecord> records_;
  std::vector<PreparedRecord> prepared_;
  TrainConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> trainable_;
  std::vector<std::vector<double>> adam_m_, adam_v_;
  std::size_t step_ = 0;
  std::uint64_t noise_calls_ = 0;
  std::size_t tap_ = 0;
};

// Loads the adapted model and vocabulary from a checkpoint without records.
std::pair<AdaptedModel, Vocab> load_model(const std::filesystem::path& dir);

}  // namespace cllmfs
