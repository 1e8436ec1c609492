#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

#include "mlfn/autodiff.hpp"

namespace mlfn::ad {

struct GradCheckOptions {
  double step = 1e-4;
  /// Coordinates checked per variable; 0 checks every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the relative-error denominator, so gradients that are
  /// zero up to rounding compare absolutely.
  double denom_floor = 1e-6;
  /// When a +-step evaluation lands on a different ReLU pattern than the
  /// unperturbed loss, the step is divided by 10 and retried down to this
  /// bound. Coordinates still straddling a kink there are not scored.
  double min_step = 1e-7;
  /// Combine central differences at h and h/2 as (4 D(h/2) - D(h)) / 3,
  /// cancelling the O(h^2) truncation term.
  bool extrapolate = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Coordinates that needed a smaller step to stay on one smooth piece.
  std::size_t coords_refined = 0;
  /// Coordinates left unscored because they sit within min_step of a kink.
  std::size_t coords_on_kink = 0;
};

/// Builds a scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Var<double>(Tape<double>&)>;

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

/// Central-difference check of d(loss)/d(v). Runs `f` twice first and throws
/// DeterminismError when the two loss values differ. Leaves v's analytic
/// gradient in v.grad(). Always 64-bit.
GradCheckResult finite_diff_check(const LossFn& f, Var<double>& v, const GradCheckOptions& opts);

}  // namespace mlfn::ad
