#pragma once

// Self-checks shared by the CLI and the acceptance runner: finite-difference
// gradient suites, gate isolation and linearity, and the all-ones-gate
// equivalence with the plain aggregated-residual network.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mlfn::verify {

struct GradCheckLine {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t refined = 0;
  std::size_t on_kink = 0;
};

/// Central differences against the tape for every differentiable kernel on
/// small random inputs, every coordinate, denominator floor 1e-6.
std::vector<GradCheckLine> kernel_gradient_suite(std::uint64_t seed = 50);

struct ModelGradOptions {
  std::size_t height = 8;
  std::size_t width = 4;
  std::size_t batch = 4;
  std::uint64_t seed = 3;
  double step = 1e-4;
  double denom_floor = 1e-5;
  /// Coordinates per parameter tensor; 0 checks all of them.
  std::size_t max_coords = 0;
  /// Called after each parameter tensor.
  std::function<void(const GradCheckLine&)> progress;
};

struct ModelGradReport {
  std::vector<GradCheckLine> parameters;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t coords = 0;
  std::size_t refined = 0;
  std::size_t on_kink = 0;
  double seconds = 0.0;
};

/// Toy architecture in 64-bit, train-mode batch norm, cross-entropy loss over
/// fixed random images and labels, checked over every parameter tensor.
ModelGradReport model_gradient_check(const ModelGradOptions& opts = {});

struct GateIsolation {
  std::size_t dead_tensors = 0;     // factor-module tensors behind a zero gate
  std::size_t nonzero_dead = 0;     // of those, tensors with any nonzero gradient
  std::size_t live_tensors = 0;     // gated-on tensors with nonzero gradient
};

/// Cross-entropy through the toy model with one factor module per block gated
/// to exactly zero.
GateIsolation gate_isolation_check(std::uint64_t seed = 9);

/// Largest relative deviation of grad(3 s) from 3 grad(s) over one factor
/// module's parameters under a linear probe loss on the block output.
double gate_linearity_check(std::uint64_t seed = 10);

/// Max |difference| of final features between the all-ones-gate model and a
/// weight-sharing plain model, 32-bit, over `inputs` random images.
double resnext_equivalence(std::size_t inputs = 100, std::uint64_t seed = 8);

}  // namespace mlfn::verify
