// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive decoding with temperature, top-k and top-p filtering. Between
// <<< and >>> the sampler may only emit tokens that continue some contiguous
// run of the input, so every extracted entity is an input subspan.

#pragma once

#include <functional>
#include <random>
#include <vector>

#include "cllmfs/lora.hpp"
#include "cllmfs/sft.hpp"

namespace cllmfs {

struct DecodeConfig {
  double temperature = 0.01;
  std::size_t top_k = 10;
  double top_p = 0.9;
  std::size_t max_new_tokens = 64;
  std::size_t stop_token = Vocab::kImEndId;
  std::size_t open_token = Vocab::kOpenId;
  std::size_t close_token = Vocab::kCloseId;
  bool constrained = true;
  std::uint64_t seed = 0;

  void validate() const;
};

class ConstraintState {
 public:
  ConstraintState(std::span<const std::size_t> input, std::size_t open_token, std::size_t close_token);

  bool inside() const { return inside_; }
  std::size_t length() const { return len_; }
  const std::vector<std::size_t>& cursors() const { return starts_; }

  // Tokens allowed next inside an entity: continuations of any cursor, plus
  // the close marker once at least one token was emitted. Empty in free mode.
  std::vector<std::size_t> legal_tokens() const;
  void advance(std::size_t token);

 private:
  std::vector<std::size_t> input_;
  std::size_t open_;
  std::size_t close_;
  bool inside_ = false;
  std::size_t len_ = 0;
  std::vector<std::size_t> starts_;  // input positions whose run matches the tokens since <<<
};

// Identity in free mode; inside an entity every illegal logit becomes -inf.
// Returns false when nothing is legal, in which case the caller must close.
bool constrained_filter(std::span<double> logits, const ConstraintState& state);

// Temperature, softmax, top-k, smallest top-p prefix, renormalize, draw.
std::size_t sample(std::span<const double> logits, const DecodeConfig& cfg, std::mt19937_64& rng);

// Filtered distribution `sample` draws from (zero outside the kept set).
std::vector<double> sampling_distribution(std::span<const double> logits, const DecodeConfig& cfg);

struct Generation {
  std::vector<std::size_t> tokens;  // generated suffix, stop token excluded
  std::size_t steps = 0;
  std::size_t forced_closures = 0;
  bool stopped = false;  // stop token emitted before max_new_tokens
};

// Next-token logits for a full token sequence.
using LogitsFn = std::function<std::vector<double>(std::span<const std::size_t>)>;

Generation generate(const LogitsFn& next_logits, std::span<const std::size_t> prompt,
                    std::span<const std::size_t> input, const DecodeConfig& cfg, std::mt19937_64& rng);

Generation generate(const AdaptedModel& model, std::span<const std::size_t> prompt,
                    std::span<const std::size_t> input, const DecodeConfig& cfg);

}  // namespace cllmfs
