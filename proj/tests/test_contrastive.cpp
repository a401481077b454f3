// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cllmfs/contrastive.hpp"
#include "cllmfs/error.hpp"
#include "cllmfs/gradcheck.hpp"

using namespace cllmfs;
using ad::Tensor;

namespace {

const char* kExampleInput =
    "True , but I imagine it would be a lot lower and as I pointed out to Andrew Little would be cheaper than [ "
    "eliminating fees .";

NerExample worked_example() {
  NerExample ex;
  std::istringstream is(kExampleInput);
  for (std::string w; is >> w;) {
    ex.tokens.push_back(w);
    ex.tags.push_back("O");
  }
  ex.tags[17] = "B-Person";
  ex.tags[18] = "I-Person";
  ex.source_id = "example";
  return ex;
}

std::string span_text(const RecordLayout& layout, const Vocab& vocab, Span s) {
  return detokenize(std::span(layout.tokens).subspan(s.start, s.size()), vocab);
}

// Maximal runs of non-gold tokens on one side, nearest first, each chunked
// into len-sized pieces starting from the edge that faces the entity.
std::vector<Span> oracle_side(Span entity, const std::vector<Span>& gold, std::size_t n, std::size_t per_side,
                              bool right) {
  std::vector<bool> free(n, true);
  for (const auto& g : gold)
    for (std::size_t i = g.start; i < g.end; ++i) free[i] = false;
  std::vector<Span> runs;
  if (right) {
    for (std::size_t i = entity.end; i < n;) {
      if (!free[i]) { ++i; continue; }
      std::size_t j = i;
      while (j < n && free[j]) ++j;
      runs.push_back({i, j});
      i = j;
    }
  } else {
    for (std::size_t j = entity.start; j > 0;) {
      if (!free[j - 1]) { --j; continue; }
      std::size_t i = j;
      while (i > 0 && free[i - 1]) --i;
      runs.push_back({i, j});
      j = i;
    }
  }
  std::vector<Span> out;
  const std::size_t len = entity.size();
  for (const auto& r : runs) {
    if (right) {
      for (std::size_t s = r.start; s < r.end; s += len) out.push_back({s, std::min(s + len, r.end)});
    } else {
      for (std::size_t e = r.end; e > r.start; e -= std::min(len, e - r.start))
        out.push_back({e - std::min(len, e - r.start), e});
    }
  }
  if (out.size() > per_side) out.resize(per_side);
  return out;
}

Tensor random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> nd;
  std::vector<double> v(d);
  for (auto& x : v) x = nd(rng);
  return Tensor::from({d}, std::move(v));
}

}  // namespace

TEST_CASE("neighbor windows of the reference record cover 'out to' and 'would be'") {
  const auto ex = worked_example();
  const EntityTypeDef person{"Person", "the entity that represents the identity or role of a specific person"};
  const auto record = build_records(ex, {person}, kDefaultInstructionTemplate)[0];
  const Vocab vocab = build_vocab({ex}, {person});
  const auto layout = layout_record(record, vocab);
  const auto loc = locate_spans(record, layout, vocab, 2);

  CHECK(span_text(layout, vocab, loc.instr_type_span) == "Person");
  REQUIRE(loc.entity_spans.size() == 1);
  CHECK(span_text(layout, vocab, loc.entity_spans[0]) == "Andrew Little");
  std::vector<std::string> texts;
  for (const auto& s : loc.neighbor_spans[0]) texts.push_back(span_text(layout, vocab, s));
  CHECK(texts == std::vector<std::string>{"out to", "I pointed", "would be", "cheaper than"});
  CHECK(locate_spans(record, layout, vocab, 2) == loc);
}

TEST_CASE("entity at the input start has right neighbors only") {
  const auto w = neighbor_windows({0, 2}, {{0, 2}}, 7, 2);
  CHECK(w == std::vector<Span>{{2, 4}, {4, 6}});
  // Clipped at the end of input.
  CHECK(neighbor_windows({0, 2}, {{0, 2}}, 5, 3) == std::vector<Span>{{2, 4}, {4, 5}});
}

TEST_CASE("neighbor windows skip other gold entities, checked against a run-chunking oracle") {
  CHECK(neighbor_windows({2, 3}, {{2, 3}, {3, 4}}, 6, 2) == std::vector<Span>{{1, 2}, {0, 1}, {4, 5}, {5, 6}});

  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 14;
    std::vector<Span> gold;
    for (std::size_t i = 0; i < n;) {
      if (rng() % 3 == 0) {
        const std::size_t len = 1 + rng() % 3;
        const std::size_t end = std::min(n, i + len);
        gold.push_back({i, end});
        i = end;
      } else {
        ++i;
      }
    }
    const std::size_t per_side = 1 + rng() % 3;
    for (const auto& g : gold) {
      auto left = oracle_side(g, gold, n, per_side, false);
      const auto right = oracle_side(g, gold, n, per_side, true);
      left.insert(left.end(), right.begin(), right.end());
      const auto got = neighbor_windows(g, gold, n, per_side);
      REQUIRE(got == left);
      for (const auto& w : got) {
        CHECK(w.size() >= 1);
        CHECK(w.size() <= g.size());
        for (const auto& other : gold) CHECK((w.end <= other.start || w.start >= other.end));
      }
    }
  }
}

TEST_CASE("span outside input is a data error") {
  const auto ex = worked_example();
  const EntityTypeDef person{"Person", "x"};
  auto record = build_records(ex, {person}, kDefaultInstructionTemplate)[0];
  const Vocab vocab = build_vocab({ex}, {person});
  const auto layout = layout_record(record, vocab);
  record.gold_spans.push_back({30, 40});
  try {
    locate_spans(record, layout, vocab, 2);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
}

TEST_CASE("pool_span") {
  ad::Tape tape;
  const auto h = Tensor::from({3, 2}, {1, 0, 0, 1, 0, 1});
  const auto row = pool_span(tape, h, {0, 1});
  CHECK(row.data()[0] == 1.0);
  CHECK(row.data()[1] == 0.0);
  const auto m = pool_span(tape, h, {0, 2});
  CHECK(m.data()[0] == 0.5);
  CHECK(m.data()[1] == 0.5);
  const auto same = pool_span(tape, h, {1, 3});
  CHECK(same.data()[0] == 0.0);
  CHECK(same.data()[1] == 1.0);
  CHECK_THROWS_AS(pool_span(tape, h, {1, 1}), Error);
}

TEST_CASE("add_noise statistics and reproducibility") {
  NoiseConfig cfg;
  cfg.sigma = 0.01;
  cfg.seed = 7;
  ad::Tape tape;
  const auto z = Tensor::from({4}, {1, 2, 3, 4});
  NoiseConfig off = cfg;
  off.sigma = 0.0;
  CHECK(add_noise(tape, z, off, 0).data()[2] == 3.0);

  for (auto kind : {NoiseKind::gaussian, NoiseKind::uniform}) {
    cfg.kind = kind;
    const std::size_t n = 100000;
    const auto d = noise_vector(n, cfg, 3);
    double mean = 0.0, sq = 0.0;
    for (double v : d) mean += v;
    mean /= n;
    for (double v : d) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / (n - 1));
    CHECK(std::abs(mean) < 3.0 * cfg.sigma / std::sqrt(double(n)));
    CHECK(std::abs(sd - cfg.sigma) / cfg.sigma < 0.02);
    CHECK(noise_vector(8, cfg, 3) == noise_vector(8, cfg, 3));
    CHECK(noise_vector(8, cfg, 3) != noise_vector(8, cfg, 4));
  }
  cfg.kind = NoiseKind::uniform;
  for (double v : noise_vector(1000, cfg, 1)) CHECK(std::abs(v) <= cfg.sigma * std::sqrt(3.0));

  // Gradient passes through unchanged.
  const auto x = Tensor::from({3}, {0.3, -0.2, 0.5}, true);
  ad::Tape t2;
  auto y = ad::sum(t2, add_noise(t2, x, cfg, 0));
  t2.backward(y);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("InfoNCE hand values") {
  CHECK(infonce_from_similarities({0.4}, {{0.4}}, 0.07, false) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(infonce_from_similarities({1.0}, {{0.0}}, 1.0, false) ==
        doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));
  CHECK(infonce_from_similarities({1.0}, {{0.0}}, 1.0, false) == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(infonce_from_similarities({1.0}, {{0.0}}, 1.0, true) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(infonce_from_similarities({1.0}, {{}}, 1.0, true), Error);

  // Tensor path, symmetric case: identical negative and positive.
  ad::Tape tape;
  const auto t = Tensor::from({3}, {1, 2, 3});
  const auto e = Tensor::from({3}, {2, 1, 0});
  PairSet pairs;
  pairs.positives.push_back({t, e, {e}});
  CHECK(infonce_loss(tape, pairs, {}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  ContrastiveConfig verbatim;
  verbatim.verbatim_denominator = true;
  pairs.positives[0].negatives.clear();
  CHECK_THROWS_AS(infonce_loss(tape, pairs, verbatim), Error);
}

TEST_CASE("InfoNCE matches a direct summation on random pair sets, both modes") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 2 + rng() % 6;
    const std::size_t n_pos = 1 + rng() % 3;
    const double tau = 0.05 + 0.95 * std::uniform_real_distribution<double>()(rng);
    PairSet pairs;
    std::vector<double> expected_def(n_pos), expected_verb(n_pos);
    for (std::size_t p = 0; p < n_pos; ++p) {
      auto t = random_vec(rng, d), e = random_vec(rng, d);
      std::vector<Tensor> negs;
      for (std::size_t k = 0, nk = 1 + rng() % 4; k < nk; ++k) negs.push_back(random_vec(rng, d));
      auto cos = [&](const Tensor& a, const Tensor& b) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t i = 0; i < d; ++i) {
          ab += a.data()[i] * b.data()[i];
          aa += a.data()[i] * a.data()[i];
          bb += b.data()[i] * b.data()[i];
        }
        return ab / std::sqrt(aa * bb);
      };
      double neg_sum = 0.0;
      for (const auto& n : negs) neg_sum += std::exp(cos(t, n) / tau);
      const double pos = std::exp(cos(t, e) / tau);
      expected_def[p] = -std::log(pos / (pos + neg_sum));
      expected_verb[p] = -std::log(pos / neg_sum);
      // Closed form of the default-mode term.
      double alt = 0.0;
      for (const auto& n : negs) alt += std::exp((cos(t, n) - cos(t, e)) / tau);
      CHECK(std::abs(std::log1p(alt) - expected_def[p]) < 1e-10);
      pairs.positives.push_back({t, e, negs});
    }
    ad::Tape tape;
    ContrastiveConfig cfg;
    cfg.tau = tau;
    double sum_def = 0, sum_verb = 0;
    for (std::size_t p = 0; p < n_pos; ++p) {
      sum_def += expected_def[p];
      sum_verb += expected_verb[p];
      CHECK(expected_def[p] > 0.0);
    }
    CHECK(std::abs(infonce_loss(tape, pairs, cfg).item() - sum_def) < 1e-10);
    cfg.verbatim_denominator = true;
    CHECK(std::abs(infonce_loss(tape, pairs, cfg).item() - sum_verb) < 1e-10);
  }
}

TEST_CASE("InfoNCE temperature scaling equals pre-divided similarities at tau 1") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double tau : {0.01, 0.07, 0.5, 2.0}) {
    for (bool verbatim : {false, true}) {
      std::vector<double> pos(3), pos_scaled(3);
      std::vector<std::vector<double>> neg(3), neg_scaled(3);
      for (std::size_t i = 0; i < 3; ++i) {
        pos[i] = u(rng);
        pos_scaled[i] = pos[i] / tau;
        for (int k = 0; k < 3; ++k) {
          neg[i].push_back(u(rng));
          neg_scaled[i].push_back(neg[i].back() / tau);
        }
      }
      const double a = infonce_from_similarities(pos, neg, tau, verbatim);
      const double b = infonce_from_similarities(pos_scaled, neg_scaled, 1.0, verbatim);
      CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)));
    }
  }
}

TEST_CASE("InfoNCE strictly decreases as the positive similarity rises") {
  for (bool verbatim : {false, true}) {
    double prev = INFINITY;
    for (double s = -1.0; s <= 1.0; s += 0.05) {
      const double l = infonce_from_similarities({s}, {{0.2, -0.3}}, 0.07, verbatim);
      CHECK(l < prev);
      prev = l;
    }
  }
}

TEST_CASE("InfoNCE gradient agrees with finite differences") {
  std::mt19937_64 rng(17);
  const std::size_t d = 5;
  const auto t = random_vec(rng, d), n1 = random_vec(rng, d), n2 = random_vec(rng, d);
  for (bool verbatim : {false, true}) {
    ContrastiveConfig cfg;
    cfg.tau = 0.3;
    cfg.verbatim_denominator = verbatim;
    auto f = [&](ad::Tape& tape, const Tensor& e) {
      PairSet p;
      p.positives.push_back({t, e, {n1, n2}});
      return infonce_loss(tape, p, cfg);
    };
    const auto r = ad::finite_diff_check(f, random_vec(rng, d), 1e-5);
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("combined loss") {
  ad::Tape tape;
  const auto ce = Tensor::scalar(1.0), cl = Tensor::scalar(2.0);
  CHECK(combined_loss(tape, ce, cl, 0.0).item() == 1.0);
  CHECK(combined_loss(tape, ce, cl, 0.001).item() == doctest::Approx(1.002).epsilon(1e-15));
  CHECK_THROWS_AS(combined_loss(tape, Tensor::scalar(NAN), cl, 0.1), Error);

  // grad(ce + λ·cl) == grad(ce) + λ·grad(cl) on a shared parameter.
  const auto w = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  const double lambda = 0.37;
  auto grads = [&](int which) {
    w.zero_grad();
    ad::Tape t;
    auto c = ad::sum(t, ad::mul(t, w, w));
    auto l = ad::sum(t, ad::scale(t, w, 3.0));
    t.backward(which == 0 ? combined_loss(t, c, l, lambda) : which == 1 ? c : l);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  const auto g = grads(0), gc = grads(1), gl = grads(2);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(g[i] - (gc[i] + lambda * gl[i])) < 1e-12);
}

TEST_CASE("build_pairs drops lone entities and honors noise modes") {
  ad::Tape tape;
  std::mt19937_64 rng(1);
  std::vector<double> hv(10 * 4);
  std::normal_distribution<double> nd;
  for (auto& v : hv) v = nd(rng);
  const auto hidden = Tensor::from({10, 4}, hv, true);
  SpanLocator loc;
  loc.instr_type_span = {0, 1};
  loc.entity_spans = {{3, 5}, {7, 8}};
  loc.neighbor_spans = {{{5, 7}}, {}};
  std::uint64_t calls = 0;
  NoiseConfig noise;
  CHECK(build_pairs(tape, hidden, loc, noise, calls).positives.size() == 1);
  CHECK(calls == 0);
  noise.enabled = true;
  CHECK(build_pairs(tape, hidden, loc, noise, calls).positives.size() == 1);
  CHECK(calls == 1);
  noise.mode = NoiseMode::accompany;
  const auto both = build_pairs(tape, hidden, loc, noise, calls);
  CHECK(both.positives.size() == 2);
  CHECK(both.dim() == 4);
  CHECK(calls == 2);
}
