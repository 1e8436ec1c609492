#include "mlfn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mlfn/rng.hpp"

namespace mlfn::ad {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Evaluation {
  double loss;
  std::uint64_t pattern;
};

Evaluation evaluate(const LossFn& f) {
  Tape<double> tape(false, true);
  const double loss = f(tape).value().item();
  return {loss, tape.pattern()};
}

}  // namespace

GradCheckResult finite_diff_check(const LossFn& f, Var<double>& v, const GradCheckOptions& opts) {
  if (!(opts.step > 0.0)) throw ContractError("finite_diff_check: step must be positive");

  v.zero_grad();
  double first = 0.0;
  {
    Tape<double> tape;
    Var<double> loss = f(tape);
    first = loss.value().item();
    backward(tape, loss);
  }
  const Evaluation base = evaluate(f);
  const double second = base.loss;
  if (first != second)
    throw DeterminismError("finite_diff_check: two forward passes gave " + std::to_string(first) +
                           " and " + std::to_string(second));

  const Tensor<double> analytic = v.grad();
  const std::size_t n = v.value().size();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.max_coords != 0 && opts.max_coords < n) {
    Rng rng(derive_seed(opts.seed, {v.id(), n}));
    rng.shuffle(coords);
    coords.resize(opts.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  Tensor<double>& value = v.mutable_value();
  for (std::size_t idx : coords) {
    const double saved = value[idx];
    double h = opts.step;
    bool smooth = false;
    double numeric = 0.0;
    // Central difference at step `s`; nullopt when either end leaves the
    // smooth piece the unperturbed point lies on.
    auto central = [&](double s) -> std::optional<double> {
      value[idx] = saved + s;
      const Evaluation up = evaluate(f);
      value[idx] = saved - s;
      const Evaluation down = evaluate(f);
      value[idx] = saved;
      if (up.pattern != base.pattern || down.pattern != base.pattern) return std::nullopt;
      return (up.loss - down.loss) / (2.0 * s);
    };
    while (h >= opts.min_step) {
      if (const auto d = central(h)) {
        if (!opts.extrapolate) {
          numeric = *d;
          smooth = true;
          break;
        }
        if (const auto half = central(h / 2.0)) {
          numeric = (4.0 * *half - *d) / 3.0;
          smooth = true;
          break;
        }
      }
      h /= 10.0;
    }
    if (h < opts.step) ++result.coords_refined;
    if (!smooth) {
      ++result.coords_on_kink;
      continue;
    }
    const double err = relative_error(analytic[idx], numeric, opts.denom_floor);
    ++result.coords_checked;
    if (err > result.max_rel_error || result.coords_checked == 1) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      result.worst_index = idx;
      result.worst_analytic = analytic[idx];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace mlfn::ad
