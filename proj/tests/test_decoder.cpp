// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "cllmfs/decoder.hpp"
#include "cllmfs/error.hpp"

using namespace cllmfs;

namespace {

constexpr std::size_t kOpenTok = 4, kCloseTok = 5, kStopTok = 3;

// Every token sequence t such that prefix ‖ t is a run of input starting somewhere.
std::set<std::size_t> brute_legal(const std::vector<std::size_t>& input, const std::vector<std::size_t>& prefix) {
  std::set<std::size_t> out;
  for (std::size_t s = 0; s < input.size(); ++s) {
    if (s + prefix.size() >= input.size()) continue;
    if (std::equal(prefix.begin(), prefix.end(), input.begin() + static_cast<std::ptrdiff_t>(s)))
      out.insert(input[s + prefix.size()]);
  }
  if (!prefix.empty()) out.insert(kCloseTok);
  return out;
}

bool is_subspan(const std::vector<std::size_t>& input, const std::vector<std::size_t>& piece) {
  if (piece.empty()) return false;
  return std::search(input.begin(), input.end(), piece.begin(), piece.end()) != input.end();
}

// Entity token runs between markers; an unterminated run is returned too.
std::vector<std::vector<std::size_t>> entity_runs(const std::vector<std::size_t>& tokens, bool& balanced) {
  std::vector<std::vector<std::size_t>> runs;
  bool inside = false;
  balanced = true;
  for (auto t : tokens) {
    if (t == kOpenTok) {
      if (inside) balanced = false;
      inside = true;
      runs.emplace_back();
    } else if (t == kCloseTok) {
      if (!inside) balanced = false;
      inside = false;
    } else if (inside) {
      runs.back().push_back(t);
    }
  }
  if (inside) balanced = false;
  return runs;
}

}  // namespace

TEST_CASE("legal continuations for a b c") {
  // a=10 b=11 c=12
  const std::vector<std::size_t> input = {10, 11, 12};
  ConstraintState st(input, kOpenTok, kCloseTok);
  CHECK(st.legal_tokens().empty());
  st.advance(kOpenTok);
  CHECK(st.legal_tokens() == std::vector<std::size_t>{10, 11, 12});
  st.advance(11);
  CHECK(st.legal_tokens() == std::vector<std::size_t>{kCloseTok, 12});
  st.advance(12);
  CHECK(st.legal_tokens() == std::vector<std::size_t>{kCloseTok});
  st.advance(kCloseTok);
  CHECK_FALSE(st.inside());
}

TEST_CASE("legal sets match a brute-force enumeration") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::size_t> input(1 + rng() % 12);
    for (auto& t : input) t = 10 + rng() % 4;  // small alphabet forces repeats
    ConstraintState st(input, kOpenTok, kCloseTok);
    st.advance(kOpenTok);
    std::vector<std::size_t> prefix;
    for (int k = 0; k < 6; ++k) {
      const auto legal = st.legal_tokens();
      const auto want = brute_legal(input, prefix);
      REQUIRE(std::set<std::size_t>(legal.begin(), legal.end()) == want);
      std::vector<std::size_t> content;
      for (auto t : legal)
        if (t != kCloseTok) content.push_back(t);
      if (content.empty()) break;
      const auto t = content[rng() % content.size()];
      st.advance(t);
      prefix.push_back(t);
    }
  }
}

TEST_CASE("filter is the identity outside entities") {
  const std::vector<std::size_t> input = {10, 11};
  ConstraintState st(input, kOpenTok, kCloseTok);
  std::vector<double> logits = {0.1, -2.0, 3.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.5, 4.0, 4.5, 5.0, 5.5};
  const auto before = logits;
  CHECK(constrained_filter(logits, st));
  CHECK(logits == before);

  st.advance(kOpenTok);
  CHECK(constrained_filter(logits, st));
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(std::isfinite(logits[i]) == (i == 10 || i == 11));
}

TEST_CASE("temperature sharpens a logit gap of five") {
  DecodeConfig cfg;
  cfg.top_k = 10;
  cfg.top_p = 1.0;
  const std::vector<double> logits = {5.0, 0.0, 0.0};
  const auto p = sampling_distribution(logits, cfg);
  CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-12));
  cfg.temperature = 1.0;
  const auto q = sampling_distribution(logits, cfg);
  const double z = std::exp(5.0) + 2.0;
  CHECK(q[0] == doctest::Approx(std::exp(5.0) / z));
  CHECK(q[1] == doctest::Approx(1.0 / z));
}

TEST_CASE("top-k and top-p truncation") {
  DecodeConfig cfg;
  cfg.temperature = 1.0;
  cfg.top_p = 1.0;
  cfg.top_k = 1;
  const std::vector<double> logits = {0.0, 2.0, 1.0, 1.9};
  auto p = sampling_distribution(logits, cfg);
  CHECK(p == std::vector<double>{0.0, 1.0, 0.0, 0.0});
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample(logits, cfg, rng) == 1);

  // probabilities 0.5, 0.3, 0.2: top_p 0.6 keeps the first two
  cfg.top_k = 10;
  cfg.top_p = 0.6;
  const std::vector<double> l2 = {std::log(0.5), std::log(0.3), std::log(0.2)};
  p = sampling_distribution(l2, cfg);
  CHECK(p[0] == doctest::Approx(0.625));
  CHECK(p[1] == doctest::Approx(0.375));
  CHECK(p[2] == 0.0);
}

TEST_CASE("sampling from equal logits is uniform") {
  DecodeConfig cfg;
  cfg.temperature = 1.0;
  cfg.top_p = 1.0;
  cfg.top_k = 4;
  const std::vector<double> logits(4, 0.3);
  std::mt19937_64 rng(99);
  std::vector<double> counts(4, 0.0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) counts[sample(logits, cfg, rng)] += 1.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
  CHECK(chi2 < 16.27);  // χ²(3) at p = 0.001
}

TEST_CASE("invalid decode settings") {
  DecodeConfig cfg;
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.top_p = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.top_k = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("zero token budget yields nothing") {
  DecodeConfig cfg;
  cfg.max_new_tokens = 0;
  std::mt19937_64 rng(0);
  const std::vector<std::size_t> prompt = {2, 10}, input = {10};
  const auto g = generate([](std::span<const std::size_t>) { return std::vector<double>(16, 0.0); }, prompt, input,
                          cfg, rng);
  CHECK(g.tokens.empty());
  CHECK(g.steps == 0);
  CHECK_FALSE(g.stopped);
}

TEST_CASE("stop token ends generation") {
  DecodeConfig cfg;
  std::mt19937_64 rng(0);
  const std::vector<std::size_t> prompt = {2}, input = {10};
  const auto g = generate(
      [](std::span<const std::size_t>) {
        std::vector<double> l(16, 0.0);
        l[kStopTok] = 50.0;
        return l;
      },
      prompt, input, cfg, rng);
  CHECK(g.stopped);
  CHECK(g.steps == 1);
  CHECK(g.tokens.empty());
}

TEST_CASE("an entity still open on the last step is closed") {
  DecodeConfig cfg;
  cfg.max_new_tokens = 4;
  std::mt19937_64 rng(0);
  const std::vector<std::size_t> input = {10, 11, 12, 13, 14};
  const std::vector<std::size_t> prompt = {2};
  // Prefers <<< first, then keeps extending.
  const auto g = generate(
      [](std::span<const std::size_t> seq) {
        std::vector<double> l(16, 0.0);
        if (seq.size() == 1) l[kOpenTok] = 20.0;
        for (std::size_t t = 10; t < 15; ++t) l[t] = 3.0 - 0.1 * static_cast<double>(t);
        return l;
      },
      prompt, input, cfg, rng);
  REQUIRE(g.tokens.size() == 4);
  CHECK(g.tokens.front() == kOpenTok);
  CHECK(g.tokens.back() == kCloseTok);
  CHECK(g.forced_closures == 1);
}

TEST_CASE("fuzzed generations only extract input subspans") {
  std::mt19937_64 rng(2024);
  const std::size_t vocab = 24;
  std::size_t entities = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<std::size_t> input(1 + rng() % 10);
    for (auto& t : input) t = 6 + rng() % (vocab - 6);
    DecodeConfig cfg;
    cfg.max_new_tokens = rng() % 20;
    cfg.temperature = std::vector<double>{0.01, 0.5, 1.0, 3.0}[rng() % 4];
    cfg.top_k = 1 + rng() % 12;
    cfg.top_p = 0.3 + 0.7 * std::uniform_real_distribution<double>()(rng);
    const std::uint64_t stream = rng();
    auto logits_fn = [&, stream](std::span<const std::size_t> seq) {
      std::mt19937_64 r(stream ^ (seq.size() * 0x9E3779B97F4A7C15ULL));
      std::normal_distribution<double> nd(0.0, 3.0);
      std::vector<double> l(vocab);
      for (auto& v : l) v = nd(r);
      l[kOpenTok] += 2.0;
      return l;
    };
    const std::vector<std::size_t> prompt = {2, 7};
    const auto g = generate(logits_fn, prompt, input, cfg, rng);
    REQUIRE(g.steps <= cfg.max_new_tokens);
    REQUIRE(g.tokens.size() <= cfg.max_new_tokens);
    bool balanced = false;
    const auto runs = entity_runs(g.tokens, balanced);
    REQUIRE(balanced);
    for (const auto& run : runs) {
      ++entities;
      REQUIRE(is_subspan(input, run));
    }
  }
  CHECK(entities > 1000);
}

TEST_CASE("free mode leaves the model unconstrained inside entities") {
  DecodeConfig cfg;
  cfg.constrained = false;
  cfg.max_new_tokens = 3;
  std::mt19937_64 rng(0);
  const std::vector<std::size_t> input = {10};
  const std::vector<std::size_t> prompt = {2};
  const auto g = generate(
      [](std::span<const std::size_t> seq) {
        std::vector<double> l(16, 0.0);
        l[seq.size() == 1 ? kOpenTok : 15] = 30.0;
        return l;
      },
      prompt, input, cfg, rng);
  CHECK(g.tokens == std::vector<std::size_t>{kOpenTok, 15, 15});
  CHECK(g.forced_closures == 0);
}
