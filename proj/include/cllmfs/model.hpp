// SPDX-License-Identifier: Apache-2.0
//
// Miniature decoder-only transformer in the LLaMA-2 layout: token embedding,
// blocks of {RMSNorm → GQA attention with RoPE → residual → RMSNorm → SwiGLU
// MLP → residual}, final RMSNorm and an untied output head.
//
// Weights are stored [out×in]; a projection is x·Wᵀ.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cllmfs/tensor.hpp"

namespace cllmfs {

using ad::Tape;
using ad::Tensor;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_groups = 2;
  std::size_t d_ff = 0;  // 0 selects default_d_ff(d_model)
  std::size_t vocab_size = 0;
  std::size_t max_seq = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return n_kv_groups * head_dim(); }
  std::size_t ff_dim() const;

  // Throws ErrorKind::config naming the violated constraint.
  void validate() const;
};

// ⌈⌊8/3·d⌋ / 8⌉·8
std::size_t default_d_ff(std::size_t d_model);

// Closed-form parameter count for a config.
std::size_t parameter_count(const ModelConfig& cfg);

struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor wq;         // [d×d]
  Tensor wk;         // [kv×d]
  Tensor wv;         // [kv×d]
  Tensor wo;         // [d×d]
  Tensor mlp_norm;   // [d]
  Tensor w_gate;     // [f×d]
  Tensor w_up;       // [f×d]
  Tensor w_down;     // [d×f]
};

struct ModelParams {
  ModelConfig config;
  Tensor wte;  // [V×d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor head;        // [V×d], untied from wte

  // Stable names used by the checkpoint format.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t count() const;
  ModelParams clone() const;
  void set_requires_grad(bool value);
};

// N(0, init_std²) weights, unit norm gains; deterministic in cfg.seed.
ModelParams init_params(const ModelConfig& cfg);

class LoraSet;
struct LayerAdapters;

struct ForwardOutput {
  Tensor logits;                     // [seq×V]
  std::vector<Tensor> hidden_states; // n_layers+1 entries of [seq×d]; 0 is the embedding output
};

// Attention sub-block including the output projection W_o.
Tensor gqa_attention(Tape& tape, const Tensor& x, const LayerParams& layer, const ModelConfig& cfg,
                     std::span<const double> positions, const LayerAdapters* adapters = nullptr);

ForwardOutput forward(Tape& tape, const ModelParams& params, std::span<const std::size_t> tokens,
                      const LoraSet* lora = nullptr);

// round(26/32 · n_layers) clamped to [1, n_layers].
std::size_t contrastive_tap_layer(const ModelConfig& cfg);

}  // namespace cllmfs
