// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "cllmfs/error.hpp"

namespace cllmfs::ad {

GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h,
                                  std::span<const std::size_t> indices) {
  if (!(h > 0.0)) throw Error(ErrorKind::contract, "finite-difference step must be positive");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);

  Tape tape;
  Tensor loss = f(tape, probe);
  if (!std::isfinite(loss.item())) throw Error(ErrorKind::oracle, "function is not finite at the probe point");
  tape.backward(loss);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  std::vector<std::size_t> coords(indices.begin(), indices.end());
  if (coords.empty()) {
    coords.resize(probe.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }

  auto eval = [&]() {
    Tape quiet(false);
    const double v = f(quiet, probe).item();
    if (!std::isfinite(v)) throw Error(ErrorKind::oracle, "function is not finite near the probe point");
    return v;
  };

  GradCheckResult result;
  auto data = probe.data();
  for (std::size_t i : coords) {
    if (i >= data.size()) throw Error(ErrorKind::index, "gradient-check coordinate out of range");
    const double saved = data[i];
    data[i] = saved + h;
    const double up = eval();
    data[i] = saved - h;
    const double down = eval();
    data[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > result.max_rel_error || (i == coords.front() && result.max_rel_error == 0.0)) {
      result = {rel, i, analytic[i], numeric};
    }
  }
  return result;
}

namespace {

struct Probe {
  Tensor x;
  ScalarFn f;
};

using CaseFn = std::function<std::vector<Probe>(std::mt19937_64&)>;

Tensor randn(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor weighted(Tape& t, const Tensor& y, const Tensor& w) { return sum(t, mul(t, y, w)); }

// Binary op where both arguments get probed.
std::vector<Probe> both(const Tensor& a, const Tensor& b, const Tensor& w,
                        std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op) {
  return {{a, [=](Tape& t, const Tensor& x) { return weighted(t, op(t, x, b), w); }},
          {b, [=](Tape& t, const Tensor& x) { return weighted(t, op(t, a, x), w); }}};
}

const std::map<std::string, CaseFn>& cases() {
  static const std::map<std::string, CaseFn> kCases = {
      {"matmul",
       [](std::mt19937_64& r) {
         const auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
         return both(randn({m, k}, r), randn({k, n}, r), randn({m, n}, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return matmul(t, a, b); });
       }},
      {"matmul_nt",
       [](std::mt19937_64& r) {
         const auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
         return both(randn({m, k}, r), randn({n, k}, r), randn({m, n}, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return matmul_nt(t, a, b); });
       }},
      {"add",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 4), pick(r, 1, 4)};
         return both(randn(s, r), randn(s, r), randn(s, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return add(t, a, b); });
       }},
      {"sub",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 4), pick(r, 1, 4)};
         return both(randn(s, r), randn(s, r), randn(s, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return sub(t, a, b); });
       }},
      {"mul",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 4), pick(r, 1, 4)};
         return both(randn(s, r), randn(s, r), randn(s, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return mul(t, a, b); });
       }},
      {"scale",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 5)};
         const double c = std::normal_distribution<double>()(r);
         const Tensor w = randn(s, r);
         return std::vector<Probe>{{randn(s, r), [=](Tape& t, const Tensor& x) { return weighted(t, scale(t, x, c), w); }}};
       }},
      {"sum",
       [](std::mt19937_64& r) {
         return std::vector<Probe>{
             {randn({pick(r, 1, 4), pick(r, 1, 4)}, r), [](Tape& t, const Tensor& x) { return sum(t, mul(t, x, x)); }}};
       }},
      {"mean",
       [](std::mt19937_64& r) {
         return std::vector<Probe>{
             {randn({pick(r, 1, 4), pick(r, 1, 4)}, r), [](Tape& t, const Tensor& x) { return mean(t, mul(t, x, x)); }}};
       }},
      {"reshape",
       [](std::mt19937_64& r) {
         const auto a = pick(r, 1, 3), b = pick(r, 1, 3), c = pick(r, 1, 3);
         const Tensor w = randn({a * b, c}, r);
         return std::vector<Probe>{
             {randn({a, b, c}, r), [=](Tape& t, const Tensor& x) { return weighted(t, reshape(t, x, {a * b, c}), w); }}};
       }},
      {"rms_norm",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 4), pick(r, 2, 6)};
         Tensor g = randn({s[1]}, r);
         return both(randn(s, r), g, randn(s, r),
                     [](Tape& t, const Tensor& x, const Tensor& gain) { return rms_norm(t, x, gain, 1e-5); });
       }},
      {"silu_mul",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 4), pick(r, 1, 4)};
         return both(randn(s, r), randn(s, r), randn(s, r),
                     [](Tape& t, const Tensor& a, const Tensor& b) { return silu_mul(t, a, b); });
       }},
      {"swiglu",
       [](std::mt19937_64& r) {
         const auto m = pick(r, 1, 3), d = pick(r, 1, 4), f = pick(r, 1, 4);
         const Tensor x = randn({m, d}, r), wg = randn({d, f}, r), wu = randn({d, f}, r), w = randn({m, f}, r);
         return std::vector<Probe>{
             {x, [=](Tape& t, const Tensor& v) { return weighted(t, swiglu(t, v, wg, wu), w); }},
             {wg, [=](Tape& t, const Tensor& v) { return weighted(t, swiglu(t, x, v, wu), w); }},
             {wu, [=](Tape& t, const Tensor& v) { return weighted(t, swiglu(t, x, wg, v), w); }}};
       }},
      {"rope_rotate",
       [](std::mt19937_64& r) {
         const auto seq = pick(r, 1, 4), heads = pick(r, 1, 3), hd = 2 * pick(r, 1, 3);
         std::vector<double> pos(seq);
         for (std::size_t i = 0; i < seq; ++i) pos[i] = static_cast<double>(i + pick(r, 0, 7));
         const Tensor w = randn({seq, heads, hd}, r);
         return std::vector<Probe>{{randn({seq, heads, hd}, r), [=](Tape& t, const Tensor& x) {
                                      return weighted(t, rope_rotate(t, x, pos, 10000.0), w);
                                    }}};
       }},
      {"causal_attention",
       [](std::mt19937_64& r) {
         const auto seq = pick(r, 1, 4), groups = pick(r, 1, 2), heads = groups * pick(r, 1, 2), hd = pick(r, 1, 3);
         const Tensor q = randn({seq, heads * hd}, r), k = randn({seq, groups * hd}, r), v = randn({seq, groups * hd}, r);
         const Tensor w = randn({seq, heads * hd}, r);
         auto at = [=](Tape& t, const Tensor& a, const Tensor& b, const Tensor& c) {
           return weighted(t, causal_attention(t, a, b, c, heads, groups), w);
         };
         return std::vector<Probe>{{q, [=](Tape& t, const Tensor& x) { return at(t, x, k, v); }},
                                   {k, [=](Tape& t, const Tensor& x) { return at(t, q, x, v); }},
                                   {v, [=](Tape& t, const Tensor& x) { return at(t, q, k, x); }}};
       }},
      {"softmax",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 1, 3), pick(r, 1, 5)};
         const Tensor w = randn(s, r);
         return std::vector<Probe>{{randn(s, r), [=](Tape& t, const Tensor& x) { return weighted(t, softmax(t, x), w); }}};
       }},
      {"softmax_cross_entropy",
       [](std::mt19937_64& r) {
         const auto n = pick(r, 1, 4), v = pick(r, 2, 6);
         std::vector<std::size_t> targets(n);
         for (auto& tg : targets) tg = pick(r, 0, v - 1);
         return std::vector<Probe>{
             {randn({n, v}, r), [=](Tape& t, const Tensor& x) { return softmax_cross_entropy(t, x, targets); }}};
       }},
      {"cosine_similarity",
       [](std::mt19937_64& r) {
         const Shape s = {pick(r, 2, 6)};
         const Tensor a = randn(s, r), b = randn(s, r);
         return std::vector<Probe>{{a, [=](Tape& t, const Tensor& x) { return cosine_similarity(t, x, b); }},
                                   {b, [=](Tape& t, const Tensor& x) { return cosine_similarity(t, a, x); }}};
       }},
      {"gather_rows",
       [](std::mt19937_64& r) {
         const auto v = pick(r, 1, 5), d = pick(r, 1, 3), n = pick(r, 1, 4);
         std::vector<std::size_t> ids(n);
         for (auto& i : ids) i = pick(r, 0, v - 1);
         const Tensor w = randn({n, d}, r);
         return std::vector<Probe>{
             {randn({v, d}, r), [=](Tape& t, const Tensor& x) { return weighted(t, gather_rows(t, x, ids), w); }}};
       }},
      {"gather_cols",
       [](std::mt19937_64& r) {
         const auto rows = pick(r, 1, 3), v = pick(r, 1, 5), n = pick(r, 1, 4);
         std::vector<std::size_t> ids(n);
         for (auto& i : ids) i = pick(r, 0, v - 1);
         const Tensor w = randn({n, rows}, r);
         return std::vector<Probe>{
             {randn({rows, v}, r), [=](Tape& t, const Tensor& x) { return weighted(t, gather_cols(t, x, ids), w); }}};
       }},
      {"mean_rows",
       [](std::mt19937_64& r) {
         const auto seq = pick(r, 1, 5), d = pick(r, 1, 4);
         const auto start = pick(r, 0, seq - 1), end = pick(r, start + 1, seq);
         const Tensor w = randn({d}, r);
         return std::vector<Probe>{{randn({seq, d}, r), [=](Tape& t, const Tensor& x) {
                                      return weighted(t, mean_rows(t, x, start, end), w);
                                    }}};
       }},
      {"stack",
       [](std::mt19937_64& r) {
         const auto n = pick(r, 1, 5);
         const Tensor w = randn({n}, r);
         return std::vector<Probe>{{randn({n}, r), [=](Tape& t, const Tensor& x) {
                                      std::vector<Tensor> parts;
                                      for (std::size_t i = 0; i < n; ++i) parts.push_back(sum(t, scale(t, x, 1.0 + i)));
                                      return weighted(t, stack(t, parts), w);
                                    }}};
       }},
      {"select",
       [](std::mt19937_64& r) {
         const auto n = pick(r, 1, 5), i = pick(r, 0, n - 1);
         return std::vector<Probe>{{randn({n}, r), [=](Tape& t, const Tensor& x) {
                                      const Tensor s = select(t, x, i);
                                      return mul(t, s, s);
                                    }}};
       }},
      {"logsumexp",
       [](std::mt19937_64& r) {
         return std::vector<Probe>{{randn({pick(r, 1, 6)}, r), [](Tape& t, const Tensor& x) { return logsumexp(t, x); }}};
       }},
  };
  return kCases;
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> kNames = [] {
    std::vector<std::string> names;
    for (const auto& [name, _] : cases()) names.push_back(name);
    return names;
  }();
  return kNames;
}

OpGradReport gradcheck_op(const std::string& op, std::size_t seeds, double h) {
  const auto it = cases().find(op);
  if (it == cases().end()) throw Error(ErrorKind::config, "unknown op '" + op + "'");
  OpGradReport report;
  report.op = op;
  report.seeds = seeds;
  const auto salt = static_cast<std::uint64_t>(std::distance(cases().begin(), it));
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + salt);
    for (const auto& probe : it->second(rng)) {
      const auto r = finite_diff_check(probe.f, probe.x, h);
      report.coordinates += probe.x.numel();
      if (r.max_rel_error > report.max_rel_error) {
        report.max_rel_error = r.max_rel_error;
        report.worst_seed = seed;
      }
    }
  }
  return report;
}

}  // namespace cllmfs::ad
