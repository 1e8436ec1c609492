#pragma once

// Run configuration: INI file plus command-line overrides. Every output
// directory gets the fully resolved configuration as `config_resolved`.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mlfn/experiment.hpp"
#include "mlfn/reid_eval.hpp"
#include "mlfn/synth.hpp"

namespace mlfn::config {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string preset = "toy";
  synth::GenerateOptions data;
  /// Dataset directory written by gen-data; empty generates in memory.
  std::string data_dir;
  experiment::ExperimentConfig experiment = experiment::ExperimentConfig::toy();
  std::vector<eval::FeatureKind> features{eval::FeatureKind::R};
  std::size_t inspect_m = 20;
};

/// Sections and keys:
///   seed
///   [model] preset mode stem_channels channels strides factors fm_widths
///           fsm_widths fusion_dim num_classes (digest, ignored on input)
///   [data] seed n_ids n_train imgs_per_id_per_view views dir
///   [train] batch_size iterations lr optimizer momentum schedule
///           decay_factor decay_period weight_decay flip checkpoint_every
///           log_every
///   [eval] ranks features pair_l2 probe_l2
///   [inspect] m
/// Per-block lists are comma separated; a single value applies to every
/// block. fsm_widths entries are `a/b/c`. Unknown keys throw ContractError.
RunConfig parse(std::istream& in);
RunConfig load(const std::filesystem::path& path);

std::string to_ini(const RunConfig& cfg);
/// Writes `dir/config_resolved`, including the model digest.
void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir);

std::vector<std::size_t> parse_size_list(std::string_view text);
std::vector<eval::FeatureKind> parse_feature_list(std::string_view text);

/// Model config of a named preset: toy | reid | cifar.
model::MlfnConfig preset_model(std::string_view name);

}  // namespace mlfn::config
