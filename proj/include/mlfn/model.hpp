#pragma once

// Multi-level factorisation network: a stem convolution followed by N gated
// blocks. Block n holds K_n identical factor modules (bottleneck conv paths)
// and a factor selection module whose sigmoid output S_n weights them:
//
//   Y_n = sum_i S_n[i] * F_{n,i}(X_n) + shortcut(X_n)
//
// The concatenated gates form the factor signature, which the head projects
// and averages with the pooled final feature before classification.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mlfn/autodiff.hpp"
#include "mlfn/kernels.hpp"
#include "mlfn/rng.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::model {

enum class Mode { mlfn, nofusion, resnext, resnet };

std::string_view mode_name(Mode mode);
/// Accepts mlfn | nofusion | resnext | resnet.
Mode parse_mode(std::string_view name);

struct BlockConfig {
  std::size_t out_channels = 8;
  std::size_t stride = 1;
  /// K_n, the number of factor modules.
  std::size_t factors = 4;
  /// Bottleneck width inside each factor module.
  std::size_t fm_width = 4;
  /// Output widths of the three selection-MLP layers; the last equals `factors`.
  std::array<std::size_t, 3> fsm_widths{16, 8, 4};
};

struct MlfnConfig {
  std::size_t input_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 16;
  std::size_t stem_channels = 8;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::vector<BlockConfig> blocks;
  std::size_t fusion_dim = 64;
  std::size_t num_classes = 32;
  Mode mode = Mode::mlfn;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  /// N=4, K_n=4, channels 8/16/32/64, strides 1/2/2/1, input 32x16.
  static MlfnConfig toy(std::size_t num_classes = 32);
  /// 16 blocks of 32 factor modules on a ResNeXt-50 (32x4d) channel plan,
  /// selection widths per block group (128,64,32 / 256,128,32 / 512,128,32),
  /// d = 1024, input 256x128.
  static MlfnConfig reid_reference(std::size_t num_classes = 751);
  /// 9 blocks of 32 factor modules (ResNeXt-29 layout), d = 1024, input 32x32.
  static MlfnConfig cifar_reference(std::size_t num_classes = 100);

  std::size_t block_count() const { return blocks.size(); }
  /// K = sum of K_n. Independent of channel widths and spatial size.
  std::size_t signature_dim() const;
  bool has_selection() const { return mode == Mode::mlfn || mode == Mode::nofusion; }
  bool fuses_signature() const { return mode == Mode::mlfn; }

  /// Multiplies every channel count and bottleneck width by `factor`.
  MlfnConfig scaled_channels(std::size_t factor) const;

  /// Throws ContractError describing the first inconsistency.
  void validate() const;
};

/// Width of the single holistic module used in RESNET mode, chosen so its
/// parameter count is closest to that of the block's K_n factor modules.
std::size_t holistic_width(std::size_t in_channels, const BlockConfig& block);

/// Parameter count of one factor module (convs without bias + batch-norms).
std::size_t factor_module_params(std::size_t in_channels, std::size_t width,
                                 std::size_t out_channels);

/// Canonical key=value text of the configuration; its hash is the digest
/// stored in checkpoints.
std::string serialize(const MlfnConfig& cfg);
std::uint64_t config_digest(const MlfnConfig& cfg);

// ---- layers ---------------------------------------------------------------

template <Real T>
struct ForwardContext {
  ad::Tape<T>& tape;
  kernels::NormMode norm_mode;
  kernels::BatchNormOptions bn;
};

template <Real T>
struct ConvLayer {
  kernels::ConvSpec spec;
  ad::Var<T> weight;
  ad::Var<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const;
};

template <Real T>
struct BatchNormLayer {
  ad::Var<T> gamma;
  ad::Var<T> beta;
  std::shared_ptr<kernels::BatchNormState<T>> state;
  ad::Var<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const;
};

template <Real T>
struct LinearLayer {
  ad::Var<T> weight;  // [in, out]
  ad::Var<T> bias;    // [out]
  ad::Var<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const;
};

/// 1x1 reduce -> BN -> ReLU -> 3x3 (strided) -> BN -> ReLU -> 1x1 expand -> BN.
template <Real T>
struct FactorModule {
  ConvLayer<T> reduce, spatial, expand;
  BatchNormLayer<T> bn_reduce, bn_spatial, bn_expand;
  ad::Var<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const;
};

template <Real T>
struct SelectionOutput {
  ad::Var<T> pre_activation;  // [N, K_n]
  ad::Var<T> gates;           // sigmoid of the above
};

/// GAP -> fc -> BN -> ReLU -> fc -> BN -> ReLU -> fc -> sigmoid.
template <Real T>
struct FactorSelectionModule {
  LinearLayer<T> fc1, fc2, fc3;
  BatchNormLayer<T> bn1, bn2;
  SelectionOutput<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x) const;
};

template <Real T>
struct BlockOutput {
  ad::Var<T> y;
  ad::Var<T> gates;  // invalid in RESNEXT/RESNET mode unless overridden
};

template <Real T>
struct MlfnBlock {
  std::size_t in_channels = 0;
  BlockConfig config;
  std::vector<FactorModule<T>> factors;
  std::optional<FactorSelectionModule<T>> selector;
  std::optional<ConvLayer<T>> projection;
  std::optional<BatchNormLayer<T>> projection_bn;

  ad::Var<T> shortcut(ForwardContext<T>& ctx, const ad::Var<T>& x) const;

  /// `gate_override`, when valid, replaces the selection module's output
  /// ([N, K_n]); the selection module is then not evaluated.
  BlockOutput<T> forward(ForwardContext<T>& ctx, const ad::Var<T>& x,
                         const ad::Var<T>& gate_override = {}) const;
};

template <Real T>
struct FusionHead {
  LinearLayer<T> project_features;   // T_Y: pooled Y_N -> d
  std::optional<LinearLayer<T>> project_signature;  // T_S: K -> d
  LinearLayer<T> classifier;         // d -> identities
};

// ---- model ----------------------------------------------------------------

template <Real T>
struct NamedVar {
  std::string name;
  ad::Var<T> var;
};

template <Real T>
struct NamedBuffer {
  std::string name;
  std::shared_ptr<kernels::BatchNormState<T>> state;
  bool is_var;  // running_var when true, running_mean otherwise
  Tensor<T>& tensor() const { return is_var ? state->running_var : state->running_mean; }
};

template <Real T>
struct ForwardOptions {
  /// Per-block gate overrides; missing or invalid entries use the block's
  /// own selection (or constant 1 without one).
  std::vector<ad::Var<T>> gate_overrides;
};

template <Real T>
struct ForwardResult {
  ad::Var<T> logits;
  ad::Var<T> representation;  // R
  ad::Var<T> signature;       // concatenated gates; invalid without gates
  ad::Var<T> final_features;  // Y_N
  ad::Var<T> pooled;          // GAP(Y_N)
  std::vector<ad::Var<T>> block_outputs;
  std::vector<ad::Var<T>> selections;
};

template <Real T>
class MlfnModel {
 public:
  /// Deterministic: the same (config, seed) gives bit-identical parameters.
  MlfnModel(MlfnConfig config, std::uint64_t seed);

  const MlfnConfig& config() const noexcept { return config_; }

  void set_training(bool training) noexcept { training_ = training; }
  bool training() const noexcept { return training_; }

  /// images: [N, C, H, W] matching the configured input.
  ForwardResult<T> forward(ad::Tape<T>& tape, const Tensor<T>& images,
                           const ForwardOptions<T>& opts = {}) const;

  const std::vector<NamedVar<T>>& parameters() const noexcept { return params_; }
  const std::vector<NamedBuffer<T>>& buffers() const noexcept { return buffers_; }
  const NamedVar<T>& parameter(std::string_view name) const;

  std::size_t parameter_count() const;
  /// FNV-1a over parameter bytes and buffers in registration order.
  std::uint64_t checksum() const;
  void zero_grad();

  const std::vector<MlfnBlock<T>>& blocks() const noexcept { return blocks_; }
  const FusionHead<T>& head() const noexcept { return head_; }

  /// Copies every parameter and buffer whose name and shape also exist in
  /// `other`. Returns the number of tensors copied.
  template <Real U>
  std::size_t copy_matching_from(const MlfnModel<U>& other);

 private:
  ConvLayer<T> make_conv(Rng& rng, const std::string& name, const kernels::ConvSpec& spec);
  BatchNormLayer<T> make_bn(const std::string& name, std::size_t channels);
  LinearLayer<T> make_linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out);
  FactorModule<T> make_factor(Rng& rng, const std::string& name, std::size_t in,
                              std::size_t width, std::size_t out, std::size_t stride);

  MlfnConfig config_;
  bool training_ = true;
  ConvLayer<T> stem_;
  BatchNormLayer<T> stem_bn_;
  std::vector<MlfnBlock<T>> blocks_;
  FusionHead<T> head_;
  std::vector<NamedVar<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

template <Real T>
template <Real U>
std::size_t MlfnModel<T>::copy_matching_from(const MlfnModel<U>& other) {
  std::size_t copied = 0;
  for (const auto& src : other.parameters())
    for (auto& dst : params_)
      if (dst.name == src.name && dst.var.shape() == src.var.shape()) {
        dst.var.mutable_value() = src.var.value().template cast<T>();
        ++copied;
      }
  for (const auto& src : other.buffers())
    for (auto& dst : buffers_)
      if (dst.name == src.name && dst.tensor().shape() == src.tensor().shape()) {
        dst.tensor() = src.tensor().template cast<T>();
        ++copied;
      }
  return copied;
}

// ---- stand-alone pieces of the forward pass ---------------------------------

/// S_n = sigmoid(A_n) for a block's selection module.
template <Real T>
SelectionOutput<T> fsm_forward(const MlfnBlock<T>& block, ForwardContext<T>& ctx,
                               const ad::Var<T>& x);

template <Real T>
BlockOutput<T> block_forward(const MlfnBlock<T>& block, ForwardContext<T>& ctx,
                             const ad::Var<T>& x, const ad::Var<T>& gate_override = {});

/// Concatenates per-block gates [N, K_n] in block order into [N, K].
/// Throws ContractError when `selections` is shorter than `expected_blocks`
/// or contains an invalid entry.
template <Real T>
ad::Var<T> factor_signature(ad::Tape<T>& tape, std::span<const ad::Var<T>> selections,
                            std::size_t expected_blocks);

/// R = (T_Y(pool(y_final)) + T_S(signature)) / 2
template <Real T>
ad::Var<T> fuse(const FusionHead<T>& head, ForwardContext<T>& ctx, const ad::Var<T>& pooled,
                const ad::Var<T>& signature);

}  // namespace mlfn::model
