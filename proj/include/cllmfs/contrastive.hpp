// SPDX-License-Identifier: Apache-2.0
//
// Contrastive objective on a tapped hidden layer. The embedding of the entity
// type name in the instruction is pulled toward the embedding of each gold
// entity in the input and pushed away from same-length windows next to it.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cllmfs/model.hpp"
#include "cllmfs/sft.hpp"

namespace cllmfs {

struct ContrastiveConfig {
  double tau = 0.07;
  std::optional<std::size_t> tap_layer;  // empty: contrastive_tap_layer(cfg)
  std::size_t neighbor_window = 2;       // windows per side
  // Denominator over negatives only, without the positive term.
  bool verbatim_denominator = false;

  void validate() const;
};

enum class NoiseKind { gaussian, uniform };
// replace: the noisy entity embedding stands in for the clean one.
// accompany: both enter the loss as separate positives.
enum class NoiseMode { replace, accompany };

struct NoiseConfig {
  double sigma = 0.01;
  bool enabled = false;
  std::uint64_t seed = 0;
  NoiseKind kind = NoiseKind::gaussian;
  NoiseMode mode = NoiseMode::replace;
};

const char* to_string(NoiseKind kind);
const char* to_string(NoiseMode mode);
NoiseKind parse_noise_kind(std::string_view text);
NoiseMode parse_noise_mode(std::string_view text);

// All spans are positions in the full instruction ‖ input ‖ output sequence.
struct SpanLocator {
  Span instr_type_span;
  std::vector<Span> entity_spans;
  std::vector<std::vector<Span>> neighbor_spans;  // per entity, nearest first, left then right

  bool operator==(const SpanLocator&) const = default;
};

// Windows of entity.size() non-gold tokens walking away from `entity`, up to
// `per_side` on each side. A gold entity or the input edge closes the current
// window early. Spans are relative to the input.
std::vector<Span> neighbor_windows(Span entity, const std::vector<Span>& gold, std::size_t input_len,
                                   std::size_t per_side);

SpanLocator locate_spans(const SftRecord& record, const RecordLayout& layout, const Vocab& vocab,
                         std::size_t neighbor_window);

// Mean of hidden rows in span, [d].
Tensor pool_span(Tape& tape, const Tensor& hidden, Span span);

// z + δ with δ fixed by (seed, call_index); the gradient to z is the identity.
Tensor add_noise(Tape& tape, const Tensor& z, const NoiseConfig& cfg, std::uint64_t call_index);
std::vector<double> noise_vector(std::size_t dim, const NoiseConfig& cfg, std::uint64_t call_index);

struct PositivePair {
  Tensor type_embedding;    // z_instr^t
  Tensor entity_embedding;  // z_in^e
  std::vector<Tensor> negatives;  // z_in^n
};

struct PairSet {
  std::vector<PositivePair> positives;
  std::size_t dim() const;
};

// Pools the pairs for one record out of hidden[seq×d]. `noise_calls` is the
// running call index for add_noise and advances once per noised positive.
// Entities without any negative window are dropped.
PairSet build_pairs(Tape& tape, const Tensor& hidden, const SpanLocator& spans, const NoiseConfig& noise,
                    std::uint64_t& noise_calls);

// Σ_pos [log D − s(t,e)/τ], s = cosine similarity.
Tensor infonce_loss(Tape& tape, const PairSet& pairs, const ContrastiveConfig& cfg);

// Same objective on precomputed similarities; no tape.
double infonce_from_similarities(const std::vector<double>& positive, const std::vector<std::vector<double>>& negative,
                                 double tau, bool verbatim_denominator);

// ce + λ·cl
Tensor combined_loss(Tape& tape, const Tensor& ce, const Tensor& cl, double lambda);

}  // namespace cllmfs
