// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters: W₀ + ΔW = W₀ + B·A with W₀ frozen, A ~ N(0, σ²) and
// B = 0 at attach time so the adapted model starts identical to the base.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cllmfs/model.hpp"

namespace cllmfs {

enum class LoraTarget { q, k, v, o, in, out, wte };

inline constexpr std::array<LoraTarget, 7> kAllLoraTargets = {LoraTarget::q,  LoraTarget::k,   LoraTarget::v,
                                                              LoraTarget::o,  LoraTarget::in,  LoraTarget::out,
                                                              LoraTarget::wte};

const char* to_string(LoraTarget target);
LoraTarget parse_lora_target(const std::string& name);
// "q,k,v,in" <-> set
std::set<LoraTarget> parse_lora_targets(const std::string& csv);
std::string format_lora_targets(const std::set<LoraTarget>& targets);

struct LoraSpec {
  std::size_t rank = 8;
  double scale = 1.0;
  double init_std = 0.02;
  std::set<LoraTarget> targets = {LoraTarget::q, LoraTarget::k, LoraTarget::v, LoraTarget::in};
};

struct LoraPair {
  Tensor a;     // [r×k], trainable
  Tensor b;     // [d×r], trainable, zero at init
  Tensor base;  // W₀ [d×k], frozen
  double scale = 1.0;
  bool embedding = false;  // base is a [V×d] lookup table, the delta for id t is B·A[:, t]

  std::size_t trainable_count() const { return a.numel() + b.numel(); }
};

// x·W₀ᵀ + scale·(x·Aᵀ)·Bᵀ, without forming W₀ + BA.
Tensor adapted_matmul(Tape& tape, const Tensor& x, const LoraPair& pair);

// W₀ + scale·B·A as a fresh dense tensor.
Tensor merge(const LoraPair& pair);

struct LayerAdapters {
  std::optional<LoraPair> q, k, v, o, in_gate, in_up, out;
};

class LoraSet {
 public:
  std::vector<LayerAdapters> layers;
  std::optional<LoraPair> wte;  // base is the [V×d] embedding table, A is [r×V], B is [d×r]

  // `lora.<layer>.<family>.{A,B}`; wte is `lora.global.wte.{A,B}`.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> trainable() const;
  std::size_t pair_count() const;
  LoraSet clone_with_base(const ModelParams& base) const;
};

struct AdaptedModel {
  ModelParams base;
  LoraSpec spec;
  LoraSet lora;
};

// Freezes the base and attaches one pair per (layer, targeted family). Throws
// ErrorKind::config when the rank is not below min(d, k) of a target.
AdaptedModel attach(ModelParams base, const LoraSpec& spec, std::uint64_t seed);

ForwardOutput forward(Tape& tape, const AdaptedModel& model, std::span<const std::size_t> tokens);

// Base parameters with every pair folded in.
ModelParams merged_params(const AdaptedModel& model);

struct ParameterReport {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t pairs = 0;
  double ratio() const { return frozen ? static_cast<double>(trainable) / static_cast<double>(frozen) : 0.0; }
};

ParameterReport trainable_parameter_report(const AdaptedModel& model);

}  // namespace cllmfs
