// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/model.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "cllmfs/error.hpp"
#include "cllmfs/lora.hpp"

namespace cllmfs {

std::size_t default_d_ff(std::size_t d_model) {
  const std::size_t raw = (8 * d_model) / 3;
  return (raw + 7) / 8 * 8;
}

std::size_t ModelConfig::ff_dim() const { return d_ff ? d_ff : default_d_ff(d_model); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
  if (n_layers == 0) fail("n_layers must be at least 1");
  if (d_model == 0 || n_heads == 0 || n_kv_groups == 0) fail("d_model, n_heads and n_kv_groups must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (n_heads % n_kv_groups != 0) {
    fail("n_heads (" + std::to_string(n_heads) + ") must be divisible by n_kv_groups (" +
         std::to_string(n_kv_groups) + ")");
  }
  if (head_dim() % 2 != 0) fail("head dimension " + std::to_string(head_dim()) + " must be even for RoPE");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_seq == 0) fail("max_seq must be positive");
  if (!(rope_base > 0.0)) fail("rope_base must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.ff_dim(), kv = cfg.kv_dim();
  const std::size_t per_layer = 2 * d + d * d + 2 * kv * d + d * d + 3 * f * d;
  return 2 * v * d + d + cfg.n_layers * per_layer;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("wte", wte);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.emplace_back(p + "attn_norm", l.attn_norm);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "mlp_norm", l.mlp_norm);
    out.emplace_back(p + "w_gate", l.w_gate);
    out.emplace_back(p + "w_up", l.w_up);
    out.emplace_back(p + "w_down", l.w_down);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("head", head);
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams p = *this;
  p.wte = wte.clone();
  p.final_norm = final_norm.clone();
  p.head = head.clone();
  for (auto& l : p.layers) {
    for (Tensor* t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down}) {
      *t = t->clone();
    }
  }
  return p;
}

void ModelParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named_tensors()) {
    Tensor handle = t;
    handle.set_requires_grad(value);
  }
}

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  auto gaussian = [&](ad::Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = normal(rng);
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor::from({n}, std::vector<double>(n, 1.0)); };

  const std::size_t d = cfg.d_model, f = cfg.ff_dim(), kv = cfg.kv_dim(), v = cfg.vocab_size;
  ModelParams p;
  p.config = cfg;
  p.wte = gaussian({v, d});
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerParams l;
    l.attn_norm = ones(d);
    l.wq = gaussian({d, d});
    l.wk = gaussian({kv, d});
    l.wv = gaussian({kv, d});
    l.wo = gaussian({d, d});
    l.mlp_norm = ones(d);
    l.w_gate = gaussian({f, d});
    l.w_up = gaussian({f, d});
    l.w_down = gaussian({d, f});
    p.layers.push_back(std::move(l));
  }
  p.final_norm = ones(d);
  p.head = gaussian({v, d});

  if (p.count() != parameter_count(cfg)) {
    throw Error(ErrorKind::contract, "parameter count " + std::to_string(p.count()) +
                                         " disagrees with closed form " + std::to_string(parameter_count(cfg)));
  }
  return p;
}

namespace {

Tensor project(Tape& tape, const Tensor& x, const Tensor& weight, const std::optional<LoraPair>* pair) {
  if (pair && pair->has_value()) return adapted_matmul(tape, x, **pair);
  return ad::matmul_nt(tape, x, weight);
}

const std::optional<LoraPair>* slot(const LayerAdapters* a, std::optional<LoraPair> LayerAdapters::*member) {
  return a ? &(a->*member) : nullptr;
}

}  // namespace

Tensor gqa_attention(Tape& tape, const Tensor& x, const LayerParams& layer, const ModelConfig& cfg,
                     std::span<const double> positions, const LayerAdapters* adapters) {
  const std::size_t seq = x.dim(0);
  if (seq > cfg.max_seq) {
    throw Error(ErrorKind::length, "sequence of " + std::to_string(seq) + " exceeds max_seq " +
                                       std::to_string(cfg.max_seq));
  }
  const std::size_t hd = cfg.head_dim();
  Tensor q = project(tape, x, layer.wq, slot(adapters, &LayerAdapters::q));
  Tensor k = project(tape, x, layer.wk, slot(adapters, &LayerAdapters::k));
  Tensor v = project(tape, x, layer.wv, slot(adapters, &LayerAdapters::v));
  q = ad::reshape(tape, ad::rope_rotate(tape, ad::reshape(tape, q, {seq, cfg.n_heads, hd}), positions, cfg.rope_base),
                  {seq, cfg.d_model});
  k = ad::reshape(tape,
                  ad::rope_rotate(tape, ad::reshape(tape, k, {seq, cfg.n_kv_groups, hd}), positions, cfg.rope_base),
                  {seq, cfg.kv_dim()});
  Tensor attn = ad::causal_attention(tape, q, k, v, cfg.n_heads, cfg.n_kv_groups);
  return project(tape, attn, layer.wo, slot(adapters, &LayerAdapters::o));
}

ForwardOutput forward(Tape& tape, const ModelParams& params, std::span<const std::size_t> tokens,
                      const LoraSet* lora) {
  const auto& cfg = params.config;
  if (tokens.empty()) throw Error(ErrorKind::contract, "forward on an empty token list");
  if (tokens.size() > cfg.max_seq) {
    throw Error(ErrorKind::length, "sequence of " + std::to_string(tokens.size()) + " exceeds max_seq " +
                                       std::to_string(cfg.max_seq));
  }
  for (auto t : tokens) {
    if (t >= cfg.vocab_size) {
      throw Error(ErrorKind::index, "token id " + std::to_string(t) + " outside vocabulary of " +
                                        std::to_string(cfg.vocab_size));
    }
  }
  std::vector<double> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0.0);

  ForwardOutput out;
  Tensor x = ad::gather_rows(tape, params.wte, tokens);
  if (lora && lora->wte) {
    const auto& pair = *lora->wte;
    Tensor delta = ad::matmul_nt(tape, ad::gather_cols(tape, pair.a, tokens), pair.b);
    x = ad::add(tape, x, ad::scale(tape, delta, pair.scale));
  }
  out.hidden_states.push_back(x);

  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const auto& layer = params.layers[i];
    const LayerAdapters* adapters = lora && i < lora->layers.size() ? &lora->layers[i] : nullptr;
    Tensor h = ad::rms_norm(tape, x, layer.attn_norm, cfg.norm_eps);
    x = ad::add(tape, x, gqa_attention(tape, h, layer, cfg, positions, adapters));
    Tensor h2 = ad::rms_norm(tape, x, layer.mlp_norm, cfg.norm_eps);
    Tensor gate = project(tape, h2, layer.w_gate, slot(adapters, &LayerAdapters::in_gate));
    Tensor up = project(tape, h2, layer.w_up, slot(adapters, &LayerAdapters::in_up));
    Tensor mlp = project(tape, ad::silu_mul(tape, gate, up), layer.w_down, slot(adapters, &LayerAdapters::out));
    x = ad::add(tape, x, mlp);
    out.hidden_states.push_back(x);
  }
  Tensor normed = ad::rms_norm(tape, x, params.final_norm, cfg.norm_eps);
  out.logits = ad::matmul_nt(tape, normed, params.head);
  return out;
}

std::size_t contrastive_tap_layer(const ModelConfig& cfg) {
  const auto n = static_cast<double>(cfg.n_layers);
  const auto layer = static_cast<long>(std::lround(26.0 / 32.0 * n));
  return static_cast<std::size_t>(std::clamp<long>(layer, 1, static_cast<long>(std::max<std::size_t>(cfg.n_layers, 1))));
}

}  // namespace cllmfs
