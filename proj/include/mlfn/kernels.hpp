#pragma once

// Differentiable kernel set. Every forward kernel has a matching backward
// that maps the upstream gradient to input gradients. All functions are pure
// apart from batch_norm's running-stat update.

#include <array>
#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "mlfn/tensor.hpp"

namespace mlfn::kernels {

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 2> kernel{1, 1};
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};

  /// floor((in + 2*pad - kernel) / stride) + 1; throws ShapeError when < 1.
  std::size_t out_extent(std::size_t in, int axis) const;
  std::size_t fan_in() const { return in_channels * kernel[0] * kernel[1]; }
};

// ---- mode-4 product -------------------------------------------------------

/// out[h,w,c] = sum_i s[i] * m[h,w,c,i]
template <Real T>
Tensor<T> mode4_product(const Tensor<T>& m, const Tensor<T>& s);

template <Real T>
struct Mode4Grads {
  Tensor<T> dm;
  Tensor<T> ds;
};

template <Real T>
Mode4Grads<T> mode4_product_backward(const Tensor<T>& m, const Tensor<T>& s,
                                     const Tensor<T>& dout);

/// Batched gated sum: out[n,...] = sum_i gates[n,i] * parts[i][n,...].
/// This is the mode-4 product applied per sample with the FM outputs kept
/// as separate tensors instead of a stacked trailing axis.
template <Real T>
Tensor<T> gated_sum(std::span<const Tensor<T>* const> parts, const Tensor<T>& gates);

/// Gradient w.r.t. parts[i]; returns gates[:,i] * dout.
template <Real T>
Tensor<T> gated_sum_backward_part(const Tensor<T>& gates, std::size_t i, const Tensor<T>& dout);

/// Gradient w.r.t. gates: dg[n,i] = <parts[i][n], dout[n]>.
template <Real T>
Tensor<T> gated_sum_backward_gates(std::span<const Tensor<T>* const> parts,
                                   const Tensor<T>& dout);

// ---- convolution ----------------------------------------------------------

/// Cross-correlation, NCHW input, OIHW weights. `bias` may be null.
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvSpec& spec);

template <Real T>
struct Conv2dGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <Real T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                               const Tensor<T>& dout, bool need_dx, bool need_dw, bool need_db);

// ---- pooling --------------------------------------------------------------

template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <Real T>
Tensor<T> global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& dout);

// ---- batch norm -----------------------------------------------------------

enum class NormMode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  /// running = momentum * running + (1 - momentum) * batch
  double momentum = 0.9;
};

template <Real T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <Real T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  NormMode mode = NormMode::train;
};

/// Normalizes per channel (axis 1) over all other axes. Train mode requires
/// N >= 2 and updates `state`; eval mode reads it. `cache` may be null.
template <Real T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, NormMode mode, const BatchNormOptions& opts,
                     std::type_identity_t<BatchNormCache<T>>* cache);

template <Real T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <Real T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                      const Tensor<T>& dout);

// ---- dense ----------------------------------------------------------------

/// x[N,D] * w[D,E] + b[E]
template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <Real T>
struct LinearGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <Real T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dout,
                               bool need_dx, bool need_dw, bool need_db);

// ---- elementwise ----------------------------------------------------------

enum class Activation { relu, sigmoid };

template <Real T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

/// Uses the forward output `y` (both derivatives are expressible through it).
template <Real T>
Tensor<T> activation_backward(const Tensor<T>& y, Activation kind, const Tensor<T>& dout);

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// ---- concat / split -------------------------------------------------------

/// Concatenates rank-2 tensors [N, D_i] along the last axis.
template <Real T>
Tensor<T> concat(std::span<const Tensor<T>* const> parts);

template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& whole, std::span<const std::size_t> widths);

// ---- loss -----------------------------------------------------------------

template <Real T>
struct CrossEntropyResult {
  T loss;
  Tensor<T> probs;
};

/// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
template <Real T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            std::span<const int> labels);

/// d(loss)/d(logits) = (softmax - onehot) / N, times the upstream scalar.
template <Real T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probs, std::span<const int> labels,
                                         T dloss);

/// Throws NumericError naming `kernel` when any value is NaN/Inf.
template <Real T>
void ensure_finite(const Tensor<T>& t, const char* kernel);

}  // namespace mlfn::kernels
