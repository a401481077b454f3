// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/lora.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "cllmfs/error.hpp"

namespace cllmfs {

const char* to_string(LoraTarget target) {
  switch (target) {
    case LoraTarget::q: return "q";
    case LoraTarget::k: return "k";
    case LoraTarget::v: return "v";
    case LoraTarget::o: return "o";
    case LoraTarget::in: return "in";
    case LoraTarget::out: return "out";
    case LoraTarget::wte: return "wte";
  }
  return "?";
}

LoraTarget parse_lora_target(const std::string& name) {
  for (auto t : kAllLoraTargets) {
    if (name == to_string(t)) return t;
  }
  throw Error(ErrorKind::config, "unknown LoRA target '" + name + "' (expected one of q,k,v,o,in,out,wte)");
}

std::set<LoraTarget> parse_lora_targets(const std::string& csv) {
  std::set<LoraTarget> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (!item.empty()) out.insert(parse_lora_target(item));
  }
  return out;
}

std::string format_lora_targets(const std::set<LoraTarget>& targets) {
  std::string out;
  for (auto t : targets) {
    if (!out.empty()) out += ',';
    out += to_string(t);
  }
  return out;
}

Tensor adapted_matmul(Tape& tape, const Tensor& x, const LoraPair& pair) {
  Tensor base = ad::matmul_nt(tape, x, pair.base);
  Tensor low = ad::matmul_nt(tape, ad::matmul_nt(tape, x, pair.a), pair.b);
  return ad::add(tape, base, ad::scale(tape, low, pair.scale));
}

Tensor merge(const LoraPair& pair) {
  const std::size_t d = pair.b.dim(0), r = pair.a.dim(0), k = pair.a.dim(1);
  Tensor merged = pair.base.clone();
  merged.set_requires_grad(false);
  auto m = merged.data();
  auto a = pair.a.data();
  auto b = pair.b.data();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < r; ++t) acc += b[i * r + t] * a[t * k + j];
      if (pair.embedding) {
        m[j * d + i] += pair.scale * acc;
      } else {
        m[i * k + j] += pair.scale * acc;
      }
    }
  }
  return merged;
}

std::vector<std::pair<std::string, Tensor>> LoraSet::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto emit = [&](const std::string& prefix, const std::optional<LoraPair>& pair) {
    if (!pair) return;
    out.emplace_back(prefix + ".A", pair->a);
    out.emplace_back(prefix + ".B", pair->b);
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = "lora." + std::to_string(i) + ".";
    const auto& l = layers[i];
    emit(p + "q", l.q);
    emit(p + "k", l.k);
    emit(p + "v", l.v);
    emit(p + "o", l.o);
    emit(p + "in_gate", l.in_gate);
    emit(p + "in_up", l.in_up);
    emit(p + "out", l.out);
  }
  emit("lora.global.wte", wte);
  return out;
}

std::vector<Tensor> LoraSet::trainable() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::size_t LoraSet::pair_count() const { return named_tensors().size() / 2; }

LoraSet LoraSet::clone_with_base(const ModelParams& base) const {
  LoraSet out = *this;
  auto copy = [](std::optional<LoraPair>& pair, const Tensor& w) {
    if (!pair) return;
    pair->a = pair->a.clone();
    pair->b = pair->b.clone();
    pair->base = w;
  };
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    auto& l = out.layers[i];
    const auto& b = base.layers[i];
    copy(l.q, b.wq);
    copy(l.k, b.wk);
    copy(l.v, b.wv);
    copy(l.o, b.wo);
    copy(l.in_gate, b.w_gate);
    copy(l.in_up, b.w_up);
    copy(l.out, b.w_down);
  }
  copy(out.wte, base.wte);
  return out;
}

AdaptedModel attach(ModelParams base, const LoraSpec& spec, std::uint64_t seed) {
  if (spec.targets.empty()) throw Error(ErrorKind::config, "LoRA spec needs at least one target");
  if (spec.rank == 0) throw Error(ErrorKind::config, "LoRA rank must be at least 1");
  if (!(spec.init_std > 0.0)) throw Error(ErrorKind::config, "LoRA init_std must be positive");
  base.set_requires_grad(false);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, spec.init_std);

  // d_out × d_in of the conceptual linear map
  auto make = [&](const Tensor& w, std::size_t d_out, std::size_t d_in, const std::string& what) {
    if (spec.rank >= std::min(d_out, d_in)) {
      throw Error(ErrorKind::config, "LoRA rank " + std::to_string(spec.rank) + " must be below min(" +
                                         std::to_string(d_out) + ", " + std::to_string(d_in) + ") for " + what);
    }
    LoraPair pair;
    pair.a = Tensor::zeros({spec.rank, d_in}, true);
    for (auto& v : pair.a.data()) v = normal(rng);
    pair.b = Tensor::zeros({d_out, spec.rank}, true);
    pair.base = w;
    pair.scale = spec.scale;
    return pair;
  };
  auto has = [&](LoraTarget t) { return spec.targets.count(t) > 0; };

  AdaptedModel model;
  model.spec = spec;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const auto& l = base.layers[i];
    const auto tag = "layer " + std::to_string(i) + " ";
    LayerAdapters a;
    auto fit = [&](const Tensor& w, const char* name) { return make(w, w.dim(0), w.dim(1), tag + name); };
    if (has(LoraTarget::q)) a.q = fit(l.wq, "W_q");
    if (has(LoraTarget::k)) a.k = fit(l.wk, "W_k");
    if (has(LoraTarget::v)) a.v = fit(l.wv, "W_v");
    if (has(LoraTarget::o)) a.o = fit(l.wo, "W_o");
    if (has(LoraTarget::in)) {
      a.in_gate = fit(l.w_gate, "W_in gate");
      a.in_up = fit(l.w_up, "W_in up");
    }
    if (has(LoraTarget::out)) a.out = fit(l.w_down, "W_out");
    model.lora.layers.push_back(std::move(a));
  }
  if (has(LoraTarget::wte)) {
    model.lora.wte = make(base.wte, base.wte.dim(1), base.wte.dim(0), "W_wte");
    model.lora.wte->embedding = true;
  }
  model.base = std::move(base);
  return model;
}

ForwardOutput forward(Tape& tape, const AdaptedModel& model, std::span<const std::size_t> tokens) {
  return forward(tape, model.base, tokens, &model.lora);
}

ModelParams merged_params(const AdaptedModel& model) {
  ModelParams p = model.base.clone();
  auto fold = [](Tensor& w, const std::optional<LoraPair>& pair) {
    if (pair) w = merge(*pair);
  };
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const auto& a = model.lora.layers[i];
    fold(l.wq, a.q);
    fold(l.wk, a.k);
    fold(l.wv, a.v);
    fold(l.wo, a.o);
    fold(l.w_gate, a.in_gate);
    fold(l.w_up, a.in_up);
    fold(l.w_down, a.out);
  }
  fold(p.wte, model.lora.wte);
  return p;
}

ParameterReport trainable_parameter_report(const AdaptedModel& model) {
  ParameterReport r;
  r.frozen = model.base.count();
  for (const auto& t : model.lora.trainable()) r.trainable += t.numel();
  r.pairs = model.lora.pair_count();
  return r;
}

}  // namespace cllmfs
