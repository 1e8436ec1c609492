#pragma once

// Checkpoint container, all integers little-endian:
//
//   "MLFN" | u32 version | u64 config digest
//   then until end of file, one record per tensor:
//   u32 name length | name bytes (UTF-8) | u32 rank | rank x u64 extents |
//   product(extents) x f32 values

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mlfn/model.hpp"
#include "mlfn/tensor.hpp"

namespace mlfn::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Record {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  std::uint32_t version = kFormatVersion;
  std::uint64_t digest = 0;
  std::vector<Record> records;

  const Record* find(const std::string& name) const;
};

void write(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read(const std::filesystem::path& path);

/// Parameters followed by batch-norm running statistics.
template <Real T>
Checkpoint capture(const model::MlfnModel<T>& model);

/// Throws ContractError when the digest differs from the model's config
/// digest or a tensor is missing / mis-shaped.
template <Real T>
void restore(model::MlfnModel<T>& model, const Checkpoint& ckpt);

template <Real T>
void save_model(const model::MlfnModel<T>& model, const std::filesystem::path& path) {
  write(path, capture(model));
}

template <Real T>
void load_model(model::MlfnModel<T>& model, const std::filesystem::path& path) {
  restore(model, read(path));
}

}  // namespace mlfn::checkpoint
