// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cllmfs/error.hpp"

namespace cllmfs {

void DecodeConfig::validate() const {
  if (!(temperature > 0.0)) throw Error(ErrorKind::config, "temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(ErrorKind::config, "top_p must lie in (0, 1]");
  if (top_k == 0) throw Error(ErrorKind::config, "top_k must be at least 1");
}

ConstraintState::ConstraintState(std::span<const std::size_t> input, std::size_t open_token, std::size_t close_token)
    : input_(input.begin(), input.end()), open_(open_token), close_(close_token) {}

std::vector<std::size_t> ConstraintState::legal_tokens() const {
  std::vector<std::size_t> out;
  if (!inside_) return out;
  for (std::size_t s : starts_)
    if (s + len_ < input_.size()) out.push_back(input_[s + len_]);
  if (len_ >= 1) out.push_back(close_);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void ConstraintState::advance(std::size_t token) {
  if (!inside_) {
    if (token == open_) {
      inside_ = true;
      len_ = 0;
      starts_.resize(input_.size());
      std::iota(starts_.begin(), starts_.end(), 0);
    }
    return;
  }
  if (token == close_) {
    inside_ = false;
    starts_.clear();
    len_ = 0;
    return;
  }
  std::erase_if(starts_, [&](std::size_t s) { return s + len_ >= input_.size() || input_[s + len_] != token; });
  ++len_;
}

bool constrained_filter(std::span<double> logits, const ConstraintState& state) {
  if (!state.inside()) return true;
  const auto legal = state.legal_tokens();
  std::vector<bool> keep(logits.size(), false);
  for (std::size_t t : legal)
    if (t < keep.size()) keep[t] = true;
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!keep[i]) logits[i] = -INFINITY;
    any = any || std::isfinite(logits[i]);
  }
  return any;
}

std::vector<double> sampling_distribution(std::span<const double> logits, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
  const auto probs = ad::softmax_values(scaled);

  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  const std::size_t k = std::min(cfg.top_k, order.size());
  std::vector<double> out(probs.size(), 0.0);
  double cum = 0.0, kept = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t i = order[r];
    if (probs[i] <= 0.0 && r > 0) break;
    out[i] = probs[i];
    kept += probs[i];
    cum += probs[i];
    if (cum >= cfg.top_p) break;
  }
  for (auto& p : out) p /= kept;
  return out;
}

std::size_t sample(std::span<const double> logits, const DecodeConfig& cfg, std::mt19937_64& rng) {
  const auto dist = sampling_distribution(logits, cfg);
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::size_t last = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last = i;
    if (u < dist[i]) return i;
    u -= dist[i];
  }
  return last;
}

Generation generate(const LogitsFn& next_logits, std::span<const std::size_t> prompt,
                    std::span<const std::size_t> input, const DecodeConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Generation g;
  std::vector<std::size_t> seq(prompt.begin(), prompt.end());
  ConstraintState state(input, cfg.open_token, cfg.close_token);
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const std::size_t remaining = cfg.max_new_tokens - step;
    std::size_t token;
    if (cfg.constrained && state.inside() && remaining == 1) {
      // Last step inside an entity: close it so the output stays balanced.
      token = cfg.close_token;
      ++g.forced_closures;
    } else {
      auto logits = next_logits(seq);
      bool ok = true;
      if (cfg.constrained) {
        ok = constrained_filter(logits, state);
        if (!state.inside()) {
          // Markers must pair up and an entity needs room for open, one token, close.
          if (cfg.close_token < logits.size()) logits[cfg.close_token] = -INFINITY;
          if (remaining < 3 && cfg.open_token < logits.size()) logits[cfg.open_token] = -INFINITY;
          ok = std::any_of(logits.begin(), logits.end(), [](double v) { return std::isfinite(v); });
        }
      }
      if (!ok && state.inside()) {
        token = cfg.close_token;
        ++g.forced_closures;
      } else {
        token = sample(logits, cfg, rng);
      }
    }
    ++g.steps;
    if (token == cfg.stop_token) {
      g.stopped = true;
      break;
    }
    g.tokens.push_back(token);
    seq.push_back(token);
    if (cfg.constrained) state.advance(token);
  }
  return g;
}

Generation generate(const AdaptedModel& model, std::span<const std::size_t> prompt,
                    std::span<const std::size_t> input, const DecodeConfig& cfg) {
  const auto& mc = model.base.config;
  if (prompt.empty()) throw Error(ErrorKind::length, "empty prompt");
  if (prompt.size() + cfg.max_new_tokens > mc.max_seq) {
    throw Error(ErrorKind::length, "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                       std::to_string(cfg.max_new_tokens) + " new exceeds max_seq " +
                                       std::to_string(mc.max_seq));
  }
  auto next = [&](std::span<const std::size_t> seq) {
    Tape tape(false);
    const auto out = forward(tape, model, seq);
    const std::size_t v = mc.vocab_size;
    const auto data = out.logits.data();
    return std::vector<double>(data.end() - static_cast<std::ptrdiff_t>(v), data.end());
  };
  std::mt19937_64 rng(cfg.seed);
  return generate(next, prompt, input, cfg, rng);
}

}  // namespace cllmfs
