#pragma once

// One complete toy run: train a model on the training identities, then
// evaluate cross-view retrieval and the factor-signature analyses on the
// test identities.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mlfn/inspect.hpp"
#include "mlfn/model.hpp"
#include "mlfn/reid_eval.hpp"
#include "mlfn/synth.hpp"
#include "mlfn/training.hpp"

namespace mlfn::experiment {

struct ExperimentConfig {
  model::MlfnConfig model = model::MlfnConfig::toy();
  train::TrainConfig train;
  std::vector<std::size_t> ranks{1, 5, 10};
  eval::LogisticOptions pair_matcher;
  eval::LogisticOptions attribute_probe;
  /// Factor-signature analyses (pair matcher, probes, gate correlations);
  /// skipped for modes without selection modules.
  bool analyses = true;

  /// Toy defaults: batch 16, Adam at 1e-3, 800 iterations.
  static ExperimentConfig toy();
};

struct ExperimentResult {
  std::string mode;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;  // eval mode over all training images
  double final_loss = 0.0;
  eval::EvalReport r_report;
  eval::EvalReport pixel_report;
  std::optional<eval::EvalReport> fs_pair_report;
  std::optional<double> fs_pair_train_accuracy;
  std::optional<eval::AttributeProbeResult> probe;
  std::optional<inspect::CorrelationTable> correlations;
  std::uint64_t model_checksum = 0;
  double seconds = 0.0;
};

/// Dense labels 0..n_train-1 over the training identities' images.
train::LabeledImages training_images(const synth::ToyReIDDataset& data);

/// Trains a fresh model initialised from `seed`. When out_dir is set it
/// receives loss.csv, checkpoint.bin and metrics.csv.
ExperimentResult run(const synth::ToyReIDDataset& data, const ExperimentConfig& config,
                     std::uint64_t seed, const std::optional<std::filesystem::path>& out_dir = {});

/// Evaluations only, on an already trained model.
ExperimentResult evaluate(model::MlfnModel<float>& model, const synth::ToyReIDDataset& data,
                          const ExperimentConfig& config, std::uint64_t seed);

/// Single header row plus one row per result: mode,seed,train_acc,R1,...
void write_metrics_csv(const std::vector<ExperimentResult>& results, const std::filesystem::path& path);

}  // namespace mlfn::experiment
