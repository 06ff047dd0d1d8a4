#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "promptlab/autodiff.hpp"

namespace promptlab {

/// Builds a scalar loss on the supplied graph from the current parameter
/// values. Must be deterministic.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Central finite differences against reverse-mode gradients. Samples up to
/// `samples_per_param` coordinates of each parameter (all of them when the
/// parameter is smaller). Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-12).
GradCheckResult finite_diff_check(const LossBuilder& loss_fn, std::span<Parameter* const> params,
                                  double eps, std::uint64_t seed = 0,
                                  std::size_t samples_per_param = 64);

}  // namespace promptlab
