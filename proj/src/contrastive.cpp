// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cllmfs/error.hpp"

namespace cllmfs {

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorKind::config, "tau must be positive");
  if (neighbor_window == 0) throw Error(ErrorKind::config, "neighbor_window must be at least 1");
}

const char* to_string(NoiseKind kind) { return kind == NoiseKind::gaussian ? "gaussian" : "uniform"; }
const char* to_string(NoiseMode mode) { return mode == NoiseMode::replace ? "replace" : "accompany"; }

NoiseKind parse_noise_kind(std::string_view text) {
  if (text == "gaussian") return NoiseKind::gaussian;
  if (text == "uniform") return NoiseKind::uniform;
  throw Error(ErrorKind::config, "unknown noise kind '" + std::string(text) + "'");
}

NoiseMode parse_noise_mode(std::string_view text) {
  if (text == "replace") return NoiseMode::replace;
  if (text == "accompany") return NoiseMode::accompany;
  throw Error(ErrorKind::config, "unknown noise mode '" + std::string(text) + "'");
}

std::vector<Span> neighbor_windows(Span entity, const std::vector<Span>& gold, std::size_t input_len,
                                   std::size_t per_side) {
  const std::size_t len = entity.size();
  auto gold_at = [&](std::size_t pos) -> const Span* {
    for (const auto& g : gold)
      if (pos >= g.start && pos < g.end) return &g;
    return nullptr;
  };
  std::vector<Span> out;

  // Right side.
  {
    std::vector<Span> side;
    std::size_t pos = entity.end, run_start = pos;
    while (side.size() < per_side && pos < input_len) {
      if (const Span* g = gold_at(pos)) {
        if (pos > run_start) side.push_back({run_start, pos});
        pos = run_start = g->end;
        continue;
      }
      ++pos;
      if (pos - run_start == len) {
        side.push_back({run_start, pos});
        run_start = pos;
      }
    }
    if (side.size() < per_side && pos > run_start) side.push_back({run_start, pos});
    out.insert(out.end(), side.begin(), side.end());
  }
  // Left side, mirrored: run_end is exclusive, pos walks downward.
  {
    std::vector<Span> side;
    std::size_t pos = entity.start, run_end = pos;
    while (side.size() < per_side && pos > 0) {
      if (const Span* g = gold_at(pos - 1)) {
        if (pos < run_end) side.push_back({pos, run_end});
        pos = run_end = g->start;
        continue;
      }
      --pos;
      if (run_end - pos == len) {
        side.push_back({pos, run_end});
        run_end = pos;
      }
    }
    if (side.size() < per_side && pos < run_end) side.push_back({pos, run_end});
    out.insert(out.begin(), side.begin(), side.end());
  }
  return out;
}

SpanLocator locate_spans(const SftRecord& record, const RecordLayout& layout, const Vocab& vocab,
                         std::size_t neighbor_window) {
  SpanLocator loc;
  const auto name = tokenize(record.entity_type.name, vocab, false);
  const auto instr = std::span(layout.tokens).subspan(layout.instruction.start, layout.instruction.size());
  auto hit = name.empty() ? instr.end() : std::search(instr.begin(), instr.end(), name.begin(), name.end());
  if (hit == instr.end()) {
    throw Error(ErrorKind::data, "record " + record.id + ": type name '" + record.entity_type.name +
                                     "' not found in instruction");
  }
  const std::size_t at = layout.instruction.start + static_cast<std::size_t>(hit - instr.begin());
  loc.instr_type_span = {at, at + name.size()};

  const std::size_t n = layout.input.size();
  const std::size_t off = layout.input.start;
  for (const auto& g : record.gold_spans) {
    if (g.start >= g.end || g.end > n) {
      throw Error(ErrorKind::data, "record " + record.id + ": entity span outside input");
    }
    loc.entity_spans.push_back({off + g.start, off + g.end});
    std::vector<Span> nb;
    for (const auto& w : neighbor_windows(g, record.gold_spans, n, neighbor_window)) nb.push_back({off + w.start, off + w.end});
    loc.neighbor_spans.push_back(std::move(nb));
  }
  return loc;
}

Tensor pool_span(Tape& tape, const Tensor& hidden, Span span) {
  return ad::mean_rows(tape, hidden, span.start, span.end);
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::vector<double> noise_vector(std::size_t dim, const NoiseConfig& cfg, std::uint64_t call_index) {
  if (!(cfg.sigma >= 0.0)) throw Error(ErrorKind::config, "noise sigma must be non-negative");
  std::vector<double> delta(dim, 0.0);
  if (cfg.sigma == 0.0) return delta;
  std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(call_index)));
  if (cfg.kind == NoiseKind::gaussian) {
    std::normal_distribution<double> dist(0.0, cfg.sigma);
    for (auto& v : delta) v = dist(rng);
  } else {
    const double half = cfg.sigma * std::sqrt(3.0);
    std::uniform_real_distribution<double> dist(-half, half);
    for (auto& v : delta) v = dist(rng);
  }
  return delta;
}

Tensor add_noise(Tape& tape, const Tensor& z, const NoiseConfig& cfg, std::uint64_t call_index) {
  if (cfg.sigma == 0.0) return z;
  return ad::add(tape, z, Tensor::from(z.shape(), noise_vector(z.numel(), cfg, call_index)));
}

std::size_t PairSet::dim() const {
  return positives.empty() ? 0 : positives.front().type_embedding.numel();
}

PairSet build_pairs(Tape& tape, const Tensor& hidden, const SpanLocator& spans, const NoiseConfig& noise,
                    std::uint64_t& noise_calls) {
  PairSet pairs;
  const Tensor t = pool_span(tape, hidden, spans.instr_type_span);
  for (std::size_t i = 0; i < spans.entity_spans.size(); ++i) {
    if (spans.neighbor_spans[i].empty()) continue;
    std::vector<Tensor> negatives;
    for (const auto& n : spans.neighbor_spans[i]) negatives.push_back(pool_span(tape, hidden, n));
    const Tensor e = pool_span(tape, hidden, spans.entity_spans[i]);
    if (!noise.enabled) {
      pairs.positives.push_back({t, e, std::move(negatives)});
      continue;
    }
    const Tensor noisy = add_noise(tape, e, noise, noise_calls++);
    if (noise.mode == NoiseMode::accompany) pairs.positives.push_back({t, e, negatives});
    pairs.positives.push_back({t, noisy, std::move(negatives)});
  }
  return pairs;
}

Tensor infonce_loss(Tape& tape, const PairSet& pairs, const ContrastiveConfig& cfg) {
  cfg.validate();
  if (pairs.positives.empty()) throw Error(ErrorKind::contract, "InfoNCE needs at least one positive pair");
  const double inv_tau = 1.0 / cfg.tau;
  std::vector<Tensor> terms;
  for (const auto& p : pairs.positives) {
    if (p.negatives.empty() && cfg.verbatim_denominator) {
      throw Error(ErrorKind::contract, "negatives-only denominator with no negatives");
    }
    const Tensor pos = ad::scale(tape, ad::cosine_similarity(tape, p.type_embedding, p.entity_embedding), inv_tau);
    std::vector<Tensor> logits;
    if (!cfg.verbatim_denominator) logits.push_back(pos);
    for (const auto& n : p.negatives) {
      logits.push_back(ad::scale(tape, ad::cosine_similarity(tape, p.type_embedding, n), inv_tau));
    }
    terms.push_back(ad::sub(tape, ad::logsumexp(tape, ad::stack(tape, logits)), pos));
  }
  return ad::sum(tape, ad::stack(tape, terms));
}

double infonce_from_similarities(const std::vector<double>& positive, const std::vector<std::vector<double>>& negative,
                                 double tau, bool verbatim_denominator) {
  if (positive.size() != negative.size()) throw Error(ErrorKind::length, "one negative list per positive expected");
  double total = 0.0;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    std::vector<double> logits;
    if (!verbatim_denominator) logits.push_back(positive[i] / tau);
    for (double s : negative[i]) logits.push_back(s / tau);
    if (logits.empty()) throw Error(ErrorKind::contract, "negatives-only denominator with no negatives");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += mx + std::log(z) - positive[i] / tau;
  }
  return total;
}

Tensor combined_loss(Tape& tape, const Tensor& ce, const Tensor& cl, double lambda) {
  if (!std::isfinite(ce.item()) || !std::isfinite(cl.item())) {
    throw Error(ErrorKind::numeric, "combined loss of non-finite terms");
  }
  if (lambda == 0.0) return ce;
  return ad::add(tape, ce, ad::scale(tape, cl, lambda));
}

}  // namespace cllmfs
