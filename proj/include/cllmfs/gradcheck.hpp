// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cllmfs/tensor.hpp"

namespace cllmfs::ad {

// f must be scalar-valued; it is re-evaluated on a non-recording tape for
// every perturbed coordinate.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Central differences (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h against the autodiff
// gradient. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. `indices` restricts the coordinates probed (all if empty).
GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h,
                                  std::span<const std::size_t> indices = {});

}  // namespace cllmfs::ad

namespace cllmfs::ad {

// Per-op finite-difference sweep over random small inputs. Every
// differentiable input of the op is checked, the output reduced to a scalar
// through a random weighted sum.
struct OpGradReport {
  std::string op;
  std::size_t seeds = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
};

const std::vector<std::string>& gradcheck_ops();
// Throws ErrorKind::config for an unknown op name.
OpGradReport gradcheck_op(const std::string& op, std::size_t seeds, double h = 1e-5);

}  // namespace cllmfs::ad
