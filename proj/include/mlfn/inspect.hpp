#pragma once

// Qualitative analysis of the selection gates: rank images by a single gate
// S_{n,i}, export top/bottom montages, and measure how strongly each gate
// tracks each ground-truth attribute.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mlfn/model.hpp"
#include "mlfn/synth.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::inspect {

/// Eval-mode gate values of every block, one [n, K_n] tensor per block, for
/// the given images. ContractError when the model has no selection modules.
template <Real T>
std::vector<Tensor<double>> selection_outputs(model::MlfnModel<T>& model,
                                              const synth::ToyReIDDataset& data,
                                              std::span<const std::size_t> indices,
                                              std::size_t batch = 128);

struct UnitRanking {
  std::size_t block = 0;
  std::size_t unit = 0;
  /// Image indices by descending score, ties by ascending index.
  std::vector<std::size_t> order;
  std::vector<double> sorted_scores;
  std::vector<std::size_t> top;     // first m of order
  std::vector<std::size_t> bottom;  // last m of order, lowest score last
};

/// Ranks `images` by `scores` (aligned). Throws ContractError when 2m
/// exceeds the number of images.
UnitRanking rank_scores(std::size_t block, std::size_t unit, std::span<const double> scores,
                        std::span<const std::size_t> images, std::size_t m);

/// Ranks every image of `data` by S_{block,unit}. Throws ContractError for an
/// out-of-range block or unit.
template <Real T>
UnitRanking rank_by_unit(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data,
                         std::size_t block, std::size_t unit, std::size_t m);

/// |Pearson correlation| of the unit with the indicator of a binary
/// attribute; for more values, the largest one-vs-rest value. 0 when the unit
/// or the attribute is constant.
double association(std::span<const double> unit, std::span<const int> labels);

struct UnitId {
  std::size_t block;
  std::size_t unit;
};

struct CorrelationTable {
  std::vector<std::string> attributes;
  std::vector<UnitId> units;
  Tensor<double> association;  // [units, attributes]
  /// Per attribute, the unit with the largest association and its block.
  std::vector<std::size_t> best_unit;
  std::vector<std::size_t> best_block;
};

/// selections: per-block [n, K_n] gate values; labels[a][k] is the value
/// of attribute a for image k.
CorrelationTable correlate_units(const std::vector<Tensor<double>>& selections,
                                 const std::vector<std::vector<int>>& labels,
                                 const std::vector<std::string>& attribute_names);

template <Real T>
CorrelationTable correlate_units(model::MlfnModel<T>& model, const synth::ToyReIDDataset& data);

/// The attribute most associated with any unit of `block`.
std::size_t dominant_attribute(const CorrelationTable& table, std::size_t block);

/// Tiles [3, H, W] images row-major into a grid of `cols` columns.
std::vector<float> montage(const synth::ToyReIDDataset& data, std::span<const std::size_t> images,
                           std::size_t cols, std::size_t& height, std::size_t& width);

/// Writes `{block}_{unit}/top.ppm`, `bottom.ppm`, `montage.ppm` (top row
/// above bottom row) and `scores.csv` per ranking under `out_dir`. An empty
/// list writes nothing.
void export_report(std::span<const UnitRanking> rankings, const synth::ToyReIDDataset& data,
                   const std::filesystem::path& out_dir);

void write_correlations_csv(const CorrelationTable& table, const std::filesystem::path& path);

}  // namespace mlfn::inspect
