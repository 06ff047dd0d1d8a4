#include "promptlab/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace promptlab {

namespace {

double evaluate(const LossBuilder& loss_fn) {
  Graph g;
  Var loss = loss_fn(g);
  if (!loss.value().is_scalar()) throw ShapeError("finite_diff_check: loss is not scalar");
  return loss.value()[0];
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& loss_fn, std::span<Parameter* const> params,
                                  double eps, std::uint64_t seed, std::size_t samples_per_param) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

  for (auto* p : params) p->zero_grad();
  double base = 0.0;
  {
    Graph g;
    Var loss = loss_fn(g);
    base = loss.value()[0];
    g.backward(loss);
  }
  const double again = evaluate(loss_fn);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw std::runtime_error("finite_diff_check: loss function is not deterministic");
  }

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (auto* p : params) {
    const std::size_t n = p->numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > samples_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_param);
    }
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = evaluate(loss_fn);
      p->value[i] = saved - eps;
      const double minus = evaluate(loss_fn);
      p->value[i] = saved;

      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p->name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace promptlab
