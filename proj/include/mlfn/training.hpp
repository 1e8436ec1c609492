#pragma once

// Identity-classification training: Adam or Nesterov SGD over the model's
// parameters, constant or step-decay learning rate, horizontal-flip
// augmentation, CSV loss log and resumable checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlfn/checkpoint.hpp"
#include "mlfn/model.hpp"
#include "mlfn/rng.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::train {

enum class OptimizerKind { adam, sgd_nesterov };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct Schedule {
  enum class Kind { constant, step_decay };
  Kind kind = Kind::constant;
  double factor = 0.1;
  /// Iterations between drops.
  std::size_t period = 0;

  static Schedule step_decay(double factor, std::size_t period) {
    return {Kind::step_decay, factor, period};
  }

  /// Learning rate in effect for 0-based iteration `iter`. Each drop
  /// multiplies the previous rate by `factor`, so consecutive rates differ
  /// by exactly that product.
  double rate(double base, std::size_t iter) const;
};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.00035;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
  Schedule schedule;
};

/// Moments (Adam) or momentum buffers (Nesterov) for a fixed parameter list.
template <Real T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<model::NamedVar<T>> params);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t steps() const noexcept { return steps_; }
  /// Rate the next step() will use.
  double current_lr() const { return config_.schedule.rate(config_.lr, steps_); }

  /// Applies one update from the accumulated gradients. Parameters without
  /// a gradient are treated as having a zero gradient.
  void step();

  const std::vector<Tensor<T>>& first_moment() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moment() const noexcept { return v_; }

  /// Appends `opt.m.<name>`, `opt.v.<name>` (Adam only) and `opt.step`.
  void save(checkpoint::Checkpoint& ckpt) const;
  /// Throws ContractError on missing or mis-shaped state.
  void load(const checkpoint::Checkpoint& ckpt);

 private:
  OptimizerConfig config_;
  std::vector<model::NamedVar<T>> params_;
  std::vector<Tensor<T>> m_;  // Adam first moment or Nesterov buffer
  std::vector<Tensor<T>> v_;  // Adam second moment
  std::size_t steps_ = 0;
};

/// Mirrors each image of an NCHW batch left-right with probability `p`.
template <Real T>
void augment_flip(Tensor<T>& batch, Rng& rng, double p = 0.5);

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// Forward, cross-entropy, backward, update, zero gradients. Throws
/// DivergenceError when the loss or any intermediate value is not finite.
template <Real T>
StepResult train_step(model::MlfnModel<T>& model, const Tensor<T>& images,
                      std::span<const int> labels, Optimizer<T>& opt);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
  bool flip = true;
  OptimizerConfig optimizer;
  /// Iterations between checkpoints written to the output directory; 0 disables.
  std::size_t checkpoint_every = 0;
  /// Iterations between log rows; 1 logs every step.
  std::size_t log_every = 1;
  /// Divergence guard: abort after this many consecutive steps whose loss
  /// exceeds `divergence_ratio` times the first loss.
  double divergence_ratio = 10.0;
  std::size_t divergence_patience = 50;

  /// Throws ContractError.
  void validate() const;
};

/// Images with dense class labels 0..classes-1.
struct LabeledImages {
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t classes = 0;
};

struct LogRow {
  std::size_t iteration;  // 1-based count of completed steps
  double loss;
  double lr;
  double train_acc;  // fraction of the batch classified correctly
};

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t iterations = 0;
  double final_loss = 0.0;
};

struct RunOptions {
  /// Receives loss.csv and checkpoints when set.
  std::optional<std::filesystem::path> out_dir;
  /// Checkpoint written by a previous run to continue from.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many total iterations (simulates an interruption).
  std::optional<std::size_t> stop_after;
  std::function<void(const LogRow&)> on_log;
};

/// Indices of the training batch for 0-based iteration `iter`: consecutive
/// slices of a per-epoch permutation; the incomplete tail of each epoch is
/// dropped.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                       std::uint64_t seed, std::size_t iter);

std::size_t iterations_per_epoch(std::size_t dataset_size, std::size_t batch_size);

/// Runs config.iterations steps (or until stop_after). The trajectory depends
/// only on (config, data, initial model), and resuming from a checkpoint of
/// the same run continues it exactly.
template <Real T>
TrainResult run_training(const TrainConfig& config, const LabeledImages& data,
                         model::MlfnModel<T>& model, const RunOptions& run = {});

/// Model plus optimizer state and the iteration counter.
template <Real T>
void save_training_state(const model::MlfnModel<T>& model, const Optimizer<T>& opt,
                         std::size_t iteration, const std::filesystem::path& path);

/// Restores model and optimizer; returns the iteration counter.
template <Real T>
std::size_t load_training_state(model::MlfnModel<T>& model, Optimizer<T>& opt,
                                const std::filesystem::path& path);

/// Fraction of images whose argmax logit equals the label, eval mode,
/// in chunks of `batch` images.
template <Real T>
double classification_accuracy(model::MlfnModel<T>& model, const LabeledImages& data,
                               std::size_t batch = 128);

void write_loss_csv(const std::filesystem::path& path, std::span<const LogRow> rows);

}  // namespace mlfn::train
