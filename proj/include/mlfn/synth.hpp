#pragma once

// Toy re-identification data. Each identity is a unique combination of four
// categorical factors rendered at increasing semantic level (colour,
// texture, garment layout, carried bag) onto a 32x16 figure. Two views apply
// different lighting, background and jitter so that raw pixels match poorly
// across views while the factors stay intact.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mlfn/tensor.hpp"

namespace mlfn::synth {

struct Factor {
  std::string name;
  std::vector<std::string> values;
};

struct FactorSpec {
  std::vector<Factor> factors;

  /// colour {red, green, blue, yellow}, texture {solid, stripes, checks},
  /// layout {upper, lower}, carry {none, bag}.
  static FactorSpec standard();
  /// Product of the factor cardinalities.
  std::size_t identity_space() const;
};

struct GenerateOptions {
  std::size_t n_ids = 48;
  std::size_t imgs_per_id_per_view = 4;
  /// Identities 0..n_train-1 form the training set, the rest the test set.
  std::size_t n_train = 32;
  std::size_t views = 2;
  std::uint64_t seed = 0;
};

struct ToyReIDDataset {
  std::size_t height = 32;
  std::size_t width = 16;
  Tensor<float> images;   // [M, 3, height, width], values k/255
  std::vector<int> ids;   // identity of each image
  std::vector<int> views;
  std::vector<int> index;  // position within its (id, view) group
  std::vector<std::string> attribute_names;
  std::vector<std::vector<std::string>> attribute_values;  // per attribute
  /// attributes[id][a] indexes attribute_values[a].
  std::vector<std::vector<int>> attributes;
  std::vector<int> train_ids;
  std::vector<int> test_ids;

  std::size_t size() const { return ids.size(); }
  std::size_t id_count() const { return attributes.size(); }
  std::size_t view_count() const;
  bool is_train(int id) const;
  /// Copy of image i as [3, height, width].
  Tensor<float> image(std::size_t i) const;
  /// Images at the given indices as one [n, 3, height, width] batch.
  Tensor<float> gather(const std::vector<std::size_t>& which) const;
  /// Indices of all images whose identity is in the training set (or test set).
  std::vector<std::size_t> images_of(bool train) const;
};

/// Deterministic in (spec, options). Throws CapacityError when n_ids exceeds
/// the identity space, ContractError on other inconsistent options.
ToyReIDDataset generate_dataset(const FactorSpec& spec, const GenerateOptions& opts);

struct GalleryProbeSplit {
  std::vector<std::size_t> gallery;  // image indices
  std::vector<std::size_t> probes;
};

/// Cross-view protocol over the given identities: probes come from view 0,
/// the gallery from view 1. Throws ContractError for a single-view dataset
/// or an identity missing from either view.
GalleryProbeSplit split_gallery_probe(const ToyReIDDataset& data, const std::vector<int>& identities);

/// Writes `{id}_{view}_{idx}.ppm` files, `manifest.csv` and `splits.csv`.
void export_dataset(const ToyReIDDataset& data, const std::filesystem::path& dir);
/// Reads a directory written by export_dataset (or any directory following
/// the same manifest layout). Without splits.csv the lowest two thirds of
/// the identity numbers are used for training.
ToyReIDDataset load_dataset(const std::filesystem::path& dir);

/// FNV-1a over manifest.csv and every image file, in manifest order.
std::uint64_t directory_checksum(const std::filesystem::path& dir);

}  // namespace mlfn::synth
