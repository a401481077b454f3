// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "cllmfs/error.hpp"
#include "cllmfs/tensor.hpp"

namespace cllmfs::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

Map as_mat(std::span<double> s, std::size_t rows, std::size_t cols) {
  return Map(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
CMap as_mat(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return CMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void dim_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorKind::dimension,
              op + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::dimension, op + ": expected rank " + std::to_string(rank) + ", got " +
                                          shape_str(t.shape()));
  }
}

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Accumulate into an input's gradient only when it participates.
template <class F>
void if_grad(const Tensor& t, F&& f) {
  if (t.requires_grad()) f(t.grad());
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) dim_error("matmul", a, b);
  Tensor c = Tensor::zeros({m, n});
  as_mat(c.data(), m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), k, n);
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::matmul, {a.id(), b.id()}, c, [a, b, c, m, k, n]() mutable {
      auto dc = as_mat(std::span<const double>(c.grad()), m, n);
      if_grad(a, [&](std::span<double> g) { as_mat(g, m, k).noalias() += dc * as_mat(b.data(), k, n).transpose(); });
      if_grad(b, [&](std::span<double> g) { as_mat(g, k, n).noalias() += as_mat(a.data(), m, k).transpose() * dc; });
    });
  }
  return c;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) dim_error("matmul_nt", a, b);
  Tensor c = Tensor::zeros({m, n});
  as_mat(c.data(), m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), n, k).transpose();
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::matmul_nt, {a.id(), b.id()}, c, [a, b, c, m, k, n]() mutable {
      auto dc = as_mat(std::span<const double>(c.grad()), m, n);
      if_grad(a, [&](std::span<double> g) { as_mat(g, m, k).noalias() += dc * as_mat(b.data(), n, k); });
      if_grad(b, [&](std::span<double> g) { as_mat(g, n, k).noalias() += dc.transpose() * as_mat(a.data(), m, k); });
    });
  }
  return c;
}

namespace {

template <class Fwd, class Da, class Db>
Tensor elementwise(Tape& tape, OpKind kind, const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da,
                   Db db) {
  if (a.shape() != b.shape()) dim_error(name, a, b);
  Tensor c = Tensor::zeros(a.shape());
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] = fwd(ad[i], bd[i]);
  if (tape.wants({&a, &b})) {
    tape.record(kind, {a.id(), b.id()}, c, [a, b, c, da, db]() mutable {
      auto dc = c.grad();
      auto av = a.data();
      auto bv = b.data();
      if_grad(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * da(av[i], bv[i]);
      });
      if_grad(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * db(av[i], bv[i]);
      });
    });
  }
  return c;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise(
      tape, OpKind::add, "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise(
      tape, OpKind::sub, "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise(
      tape, OpKind::mul, "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor c = Tensor::zeros(a.shape());
  auto cd = c.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] = ad[i] * factor;
  if (tape.wants({&a})) {
    tape.record(OpKind::scale, {a.id()}, c, [a, c, factor]() mutable {
      auto dc = c.grad();
      auto g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * factor;
    });
  }
  return c;
}

Tensor sum(Tape& tape, const Tensor& a) {
  const auto ad = a.data();
  Tensor c = Tensor::scalar(std::accumulate(ad.begin(), ad.end(), 0.0));
  if (tape.wants({&a})) {
    tape.record(OpKind::sum, {a.id()}, c, [a, c]() mutable {
      const double dc = c.grad()[0];
      for (auto& g : a.grad()) g += dc;
    });
  }
  return c;
}

Tensor mean(Tape& tape, const Tensor& a) {
  if (a.numel() == 0) throw Error(ErrorKind::contract, "mean of an empty tensor");
  const auto ad = a.data();
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor c = Tensor::scalar(std::accumulate(ad.begin(), ad.end(), 0.0) * inv);
  if (tape.wants({&a})) {
    tape.record(OpKind::mean, {a.id()}, c, [a, c, inv]() mutable {
      const double dc = c.grad()[0] * inv;
      for (auto& g : a.grad()) g += dc;
    });
  }
  return c;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw Error(ErrorKind::dimension, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto ad = a.data();
  Tensor c = Tensor::from(std::move(shape), std::vector<double>(ad.begin(), ad.end()));
  if (tape.wants({&a})) {
    tape.record(OpKind::reshape, {a.id()}, c, [a, c]() mutable {
      auto dc = c.grad();
      auto g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    });
  }
  return c;
}

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& gain, double eps) {
  if (gain.rank() != 1 || x.rank() == 0 || x.shape().back() != gain.dim(0)) dim_error("rms_norm", x, gain);
  if (eps < 0) throw Error(ErrorKind::config, "rms_norm eps must be nonnegative");
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> inv(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto yd = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xd[r * d + j] * xd[r * d + j];
    ms /= static_cast<double>(d);
    if (ms + eps <= 0.0) throw Error(ErrorKind::degenerate, "rms_norm of an all-zero row with eps = 0");
    inv[r] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j) yd[r * d + j] = gd[j] * xd[r * d + j] * inv[r];
  }
  if (tape.wants({&x, &gain})) {
    tape.record(OpKind::rms_norm, {x.id(), gain.id()}, y, [x, gain, y, inv = std::move(inv), d, rows]() mutable {
      auto dy = y.grad();
      auto xv = x.data();
      auto gv = gain.data();
      if_grad(gain, [&](std::span<double> g) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * xv[r * d + j] * inv[r];
      });
      if_grad(x, [&](std::span<double> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += gv[j] * dy[r * d + j] * xv[r * d + j];
          const double c = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += inv[r] * gv[j] * dy[r * d + j] - c * xv[r * d + j];
        }
      });
    });
  }
  return y;
}

Tensor silu_mul(Tape& tape, const Tensor& gate, const Tensor& up) {
  return elementwise(
      tape, OpKind::silu_mul, "silu_mul", gate, up, [](double g, double u) { return g * sigmoid(g) * u; },
      [](double g, double u) {
        const double s = sigmoid(g);
        return u * s * (1.0 + g * (1.0 - s));
      },
      [](double g, double) { return g * sigmoid(g); });
}

Tensor swiglu(Tape& tape, const Tensor& x, const Tensor& w_gate, const Tensor& w_up) {
  if (w_gate.shape() != w_up.shape()) dim_error("swiglu", w_gate, w_up);
  return silu_mul(tape, matmul(tape, x, w_gate), matmul(tape, x, w_up));
}

Tensor rope_rotate(Tape& tape, const Tensor& x, std::span<const double> positions, double base) {
  require_rank("rope_rotate", x, 3);
  const std::size_t seq = x.dim(0), heads = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) throw Error(ErrorKind::config, "rope_rotate needs an even head dimension, got " + std::to_string(hd));
  if (positions.size() != seq) {
    throw Error(ErrorKind::dimension, "rope_rotate: " + std::to_string(positions.size()) + " positions for sequence " +
                                          std::to_string(seq));
  }
  const std::size_t half = hd / 2;
  std::vector<double> cs(seq * half), sn(seq * half);
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = positions[s] * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      cs[s * half + i] = std::cos(angle);
      sn[s * half + i] = std::sin(angle);
    }
  }
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t o = (s * heads + h) * hd + 2 * i;
        const double c = cs[s * half + i], n = sn[s * half + i];
        yd[o] = xd[o] * c - xd[o + 1] * n;
        yd[o + 1] = xd[o] * n + xd[o + 1] * c;
      }
  if (tape.wants({&x})) {
    tape.record(OpKind::rope, {x.id()}, y, [x, y, cs = std::move(cs), sn = std::move(sn), seq, heads, hd, half]() mutable {
      auto dy = y.grad();
      auto g = x.grad();
      for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < half; ++i) {
            const std::size_t o = (s * heads + h) * hd + 2 * i;
            const double c = cs[s * half + i], n = sn[s * half + i];
            g[o] += dy[o] * c + dy[o + 1] * n;
            g[o + 1] += -dy[o] * n + dy[o + 1] * c;
          }
    });
  }
  return y;
}

Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t n_groups) {
  require_rank("causal_attention", q, 2);
  require_rank("causal_attention", k, 2);
  require_rank("causal_attention", v, 2);
  if (n_heads == 0 || n_groups == 0 || n_heads % n_groups != 0) {
    throw Error(ErrorKind::config, "causal_attention: n_groups must divide n_heads");
  }
  const std::size_t seq = q.dim(0);
  if (q.dim(1) % n_heads != 0) dim_error("causal_attention", q, k);
  const std::size_t hd = q.dim(1) / n_heads;
  if (k.shape() != Shape{seq, n_groups * hd}) dim_error("causal_attention", q, k);
  if (v.shape() != k.shape()) dim_error("causal_attention", k, v);
  const std::size_t per_group = n_heads / n_groups;
  const std::size_t qw = n_heads * hd, kw = n_groups * hd;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

  // probs[h][i][j], j ≤ i
  std::vector<double> probs(n_heads * seq * seq, 0.0);
  Tensor out = Tensor::zeros({seq, qw});
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto od = out.data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t g = h / per_group;
    for (std::size_t i = 0; i < seq; ++i) {
      double* p = &probs[(h * seq + i) * seq];
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += qd[i * qw + h * hd + t] * kd[j * kw + g * hd + t];
        p[j] = s * scl;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= z;
        for (std::size_t t = 0; t < hd; ++t) od[i * qw + h * hd + t] += p[j] * vd[j * kw + g * hd + t];
      }
    }
  }
  if (tape.wants({&q, &k, &v})) {
    tape.record(OpKind::causal_attention, {q.id(), k.id(), v.id()}, out,
                [q, k, v, out, probs = std::move(probs), seq, n_heads, hd, per_group, qw, kw, scl]() mutable {
                  auto dout = out.grad();
                  auto qv = q.data();
                  auto kv = k.data();
                  auto vv = v.data();
                  std::vector<double> dq(q.numel(), 0.0), dk(k.numel(), 0.0), dv(v.numel(), 0.0);
                  std::vector<double> dp(seq);
                  for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t g = h / per_group;
                    for (std::size_t i = 0; i < seq; ++i) {
                      const double* p = &probs[(h * seq + i) * seq];
                      double rowdot = 0.0;
                      for (std::size_t j = 0; j <= i; ++j) {
                        double s = 0.0;
                        for (std::size_t t = 0; t < hd; ++t) {
                          s += dout[i * qw + h * hd + t] * vv[j * kw + g * hd + t];
                          dv[j * kw + g * hd + t] += p[j] * dout[i * qw + h * hd + t];
                        }
                        dp[j] = s;
                        rowdot += s * p[j];
                      }
                      for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = p[j] * (dp[j] - rowdot) * scl;
                        if (ds == 0.0) continue;
                        for (std::size_t t = 0; t < hd; ++t) {
                          dq[i * qw + h * hd + t] += ds * kv[j * kw + g * hd + t];
                          dk[j * kw + g * hd + t] += ds * qv[i * qw + h * hd + t];
                        }
                      }
                    }
                  }
                  auto acc = [](const Tensor& t, const std::vector<double>& d) {
                    if (!t.requires_grad()) return;
                    auto g = t.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
                  };
                  acc(q, dq);
                  acc(k, dk);
                  acc(v, dv);
                });
  }
  return out;
}

Tensor softmax(Tape& tape, const Tensor& x) {
  if (x.rank() == 0 || x.numel() == 0) throw Error(ErrorKind::dimension, "softmax of an empty tensor");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = softmax_values(x.data().subspan(r * d, d));
    std::copy(row.begin(), row.end(), y.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (tape.wants({&x})) {
    tape.record(OpKind::softmax, {x.id()}, y, [x, y, d, rows]() mutable {
      auto dy = y.grad();
      auto yv = y.data();
      auto g = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * yv[r * d + j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += yv[r * d + j] * (dy[r * d + j] - dot);
      }
    });
  }
  return y;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (n == 0 || targets.size() != n) {
    throw Error(ErrorKind::dimension, "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                          " targets for logits " + shape_str(logits.shape()));
  }
  std::vector<double> probs(n * vocab);
  double loss = 0.0;
  auto ld = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= vocab) {
      throw Error(ErrorKind::index, "target " + std::to_string(targets[r]) + " out of range for vocabulary " +
                                        std::to_string(vocab));
    }
    const auto row = ld.subspan(r * vocab, vocab);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - lse);
  }
  Tensor c = Tensor::scalar(loss / static_cast<double>(n));
  if (tape.wants({&logits})) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    tape.record(OpKind::softmax_cross_entropy, {logits.id()}, c,
                [logits, c, probs = std::move(probs), tgt = std::move(tgt), n, vocab]() mutable {
                  const double dc = c.grad()[0] / static_cast<double>(n);
                  auto g = logits.grad();
                  for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += dc * probs[r * vocab + j];
                    g[r * vocab + tgt[r]] -= dc;
                  }
                });
  }
  return c;
}

Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) dim_error("cosine_similarity", a, b);
  auto av = a.data();
  auto bv = b.data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  if (!(na2 > 0.0) || !(nb2 > 0.0)) {
    throw Error(ErrorKind::degenerate, "cosine_similarity of a zero-norm vector");
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double s = dot / (na * nb);
  Tensor c = Tensor::scalar(s);
  if (tape.wants({&a, &b})) {
    tape.record(OpKind::cosine_similarity, {a.id(), b.id()}, c, [a, b, c, na, nb, s]() mutable {
      const double dc = c.grad()[0];
      auto av = a.data();
      auto bv = b.data();
      // ∂s/∂a = b/(|a||b|) − s·a/|a|²
      if_grad(a, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc * (bv[i] / (na * nb) - s * av[i] / (na * na));
      });
      if_grad(b, [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc * (av[i] / (na * nb) - s * bv[i] / (nb * nb));
      });
    });
  }
  return c;
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> ids) {
  require_rank("gather_rows", table, 2);
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Tensor out = Tensor::zeros({ids.size(), d});
  auto td = table.data();
  auto od = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw Error(ErrorKind::index, "id " + std::to_string(ids[i]) + " out of range for table of " +
                                        std::to_string(rows) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, od.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (tape.wants({&table})) {
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    tape.record(OpKind::gather_rows, {table.id()}, out, [table, out, idx = std::move(idx), d]() mutable {
      auto dout = out.grad();
      auto g = table.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += dout[i * d + j];
    });
  }
  return out;
}

Tensor gather_cols(Tape& tape, const Tensor& a, std::span<const std::size_t> ids) {
  require_rank("gather_cols", a, 2);
  const std::size_t r = a.dim(0), cols = a.dim(1);
  Tensor out = Tensor::zeros({ids.size(), r});
  auto av = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= cols) {
      throw Error(ErrorKind::index, "id " + std::to_string(ids[i]) + " out of range for " + std::to_string(cols) +
                                        " columns");
    }
    for (std::size_t j = 0; j < r; ++j) od[i * r + j] = av[j * cols + ids[i]];
  }
  if (tape.wants({&a})) {
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    tape.record(OpKind::gather_cols, {a.id()}, out, [a, out, idx = std::move(idx), r, cols]() mutable {
      auto dout = out.grad();
      auto g = a.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < r; ++j) g[j * cols + idx[i]] += dout[i * r + j];
    });
  }
  return out;
}

Tensor mean_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t end) {
  require_rank("mean_rows", x, 2);
  if (start >= end) throw Error(ErrorKind::contract, "mean_rows over an empty span");
  if (end > x.dim(0)) {
    throw Error(ErrorKind::index, "span [" + std::to_string(start) + ", " + std::to_string(end) +
                                      ") outside " + std::to_string(x.dim(0)) + " rows");
  }
  const std::size_t d = x.dim(1);
  const double inv = 1.0 / static_cast<double>(end - start);
  Tensor out = Tensor::zeros({d});
  auto xv = x.data();
  auto od = out.data();
  for (std::size_t r = start; r < end; ++r)
    for (std::size_t j = 0; j < d; ++j) od[j] += xv[r * d + j];
  for (auto& v : od) v *= inv;
  if (tape.wants({&x})) {
    tape.record(OpKind::mean_rows, {x.id()}, out, [x, out, start, end, d, inv]() mutable {
      auto dout = out.grad();
      auto g = x.grad();
      for (std::size_t r = start; r < end; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dout[j] * inv;
    });
  }
  return out;
}

Tensor stack(Tape& tape, std::span<const Tensor> scalars) {
  if (scalars.empty()) throw Error(ErrorKind::contract, "stack of zero tensors");
  std::vector<double> values;
  values.reserve(scalars.size());
  bool any_grad = false;
  for (const auto& s : scalars) {
    values.push_back(s.item());
    any_grad = any_grad || s.requires_grad();
  }
  Tensor out = Tensor::from({scalars.size()}, std::move(values));
  if (tape.recording() && any_grad) {
    std::vector<Tensor> inputs(scalars.begin(), scalars.end());
    std::vector<const TensorData*> ids;
    for (const auto& s : inputs) ids.push_back(s.id());
    tape.record(OpKind::stack, std::move(ids), out, [inputs = std::move(inputs), out]() mutable {
      auto dout = out.grad();
      for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].requires_grad()) inputs[i].grad()[0] += dout[i];
    });
  }
  return out;
}

Tensor select(Tape& tape, const Tensor& x, std::size_t index) {
  if (index >= x.numel()) {
    throw Error(ErrorKind::index, "select " + std::to_string(index) + " from " + shape_str(x.shape()));
  }
  Tensor out = Tensor::scalar(x.data()[index]);
  if (tape.wants({&x})) {
    tape.record(OpKind::select, {x.id()}, out, [x, out, index]() mutable { x.grad()[index] += out.grad()[0]; });
  }
  return out;
}

Tensor logsumexp(Tape& tape, const Tensor& x) {
  if (x.numel() == 0) throw Error(ErrorKind::contract, "logsumexp of an empty tensor");
  auto xv = x.data();
  const double mx = *std::max_element(xv.begin(), xv.end());
  double z = 0.0;
  for (double v : xv) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Tensor out = Tensor::scalar(lse);
  if (tape.wants({&x})) {
    tape.record(OpKind::logsumexp, {x.id()}, out, [x, out, lse]() mutable {
      const double dout = out.grad()[0];
      auto xv = x.data();
      auto g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout * std::exp(xv[i] - lse);
    });
  }
  return out;
}

}  // namespace cllmfs::ad
