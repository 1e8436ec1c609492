#pragma once

// Define-by-run reverse-mode differentiation. A Tape records each executed
// kernel together with a closure that pushes the output gradient back to the
// inputs. Gradients accumulate in the Variables until zero_grad().

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "mlfn/hash.hpp"
#include "mlfn/kernels.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::ad {

template <Real T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;

  void accumulate(const Tensor<T>& g);
};

template <Real T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value);
  static Var parameter(Tensor<T> value);

  bool valid() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  std::uint64_t id() const noexcept { return node_->id; }

  /// Accumulated gradient; zeros of the value's shape when nothing flowed in.
  const Tensor<T>& grad() const;
  bool has_grad() const noexcept { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <Real T>
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tensor<T>& grad_out, const Tensor<T>& value_out)>;

  struct Entry {
    std::string_view kernel;
    std::vector<std::uint64_t> inputs;
    std::shared_ptr<Node<T>> output;
    BackwardFn backward;
  };

  explicit Tape(bool recording = true, bool track_pattern = false)
      : recording_(recording), track_pattern_(track_pattern) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

  /// Running hash of the sign pattern of every ReLU input seen so far (only
  /// when constructed with track_pattern). Two evaluations with equal
  /// patterns lie on the same smooth piece of a piecewise-smooth loss.
  bool tracks_pattern() const noexcept { return track_pattern_; }
  std::uint64_t pattern() const noexcept { return pattern_; }
  void note_pattern(const Tensor<T>& pre_activation);

  /// Wraps `value` as the output of `kernel`. A tape entry is kept only when
  /// recording and at least one input requires a gradient.
  Var<T> emit(std::string_view kernel, Tensor<T> value, std::span<const Var<T>> inputs,
              BackwardFn backward);
  Var<T> emit(std::string_view kernel, Tensor<T> value, std::initializer_list<Var<T>> inputs,
              BackwardFn backward) {
    return emit(kernel, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(backward));
  }

 private:
  bool recording_;
  bool track_pattern_;
  std::uint64_t pattern_ = kFnvOffset;
  std::vector<Entry> entries_;
};

/// Reverse sweep from a scalar loss. Throws ContractError on a non-scalar
/// loss or one that does not depend on any differentiable input.
template <Real T>
void backward(Tape<T>& tape, const Var<T>& loss);

// ---- differentiable ops -----------------------------------------------------

template <Real T>
Var<T> mode4_product(Tape<T>& tape, const Var<T>& m, const Var<T>& s);

template <Real T>
Var<T> gated_sum(Tape<T>& tape, std::span<const Var<T>> parts, const Var<T>& gates);

/// `bias` may be an invalid Var (no bias term).
template <Real T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const kernels::ConvSpec& spec);

template <Real T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x);

template <Real T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  kernels::BatchNormState<T>& state, kernels::NormMode mode,
                  const kernels::BatchNormOptions& opts);

template <Real T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <Real T>
Var<T> relu(Tape<T>& tape, const Var<T>& x);

template <Real T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x);

template <Real T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <Real T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <Real T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor);

template <Real T>
Var<T> concat(Tape<T>& tape, std::span<const Var<T>> parts);

/// Scalar sum of all elements.
template <Real T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

/// Scalar <weights, x> with constant weights of x's shape.
template <Real T>
Var<T> inner_product(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights);

template <Real T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels);

}  // namespace mlfn::ad
